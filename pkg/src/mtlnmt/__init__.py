"""Multi-task multilingual NMT at desk scale: bitext MT jointly trained with MLM and denoising."""

__version__ = "0.1.0"

import sys

import numpy as np
import pytest

from mtlnmt.corpus import load_manifest, write_lines, write_manifest
from mtlnmt.trainer import TrainConfig, Trainer

COPY_WORDS = ["ab", "cd", "ef", "gh", "abc", "de", "fgh", "ba", "dc", "hg"]


def copy_sentences(n, seed=0):
    rng = np.random.default_rng(seed)
    out = set()
    while len(out) < n:
        out.add(" ".join(rng.choice(COPY_WORDS, int(rng.integers(2, 6)))))
    return sorted(out)


def write_copy_manifest(root, n=40):
    sents = copy_sentences(n)
    write_lines(root / "copy.src", sents)
    write_lines(root / "copy.tgt", sents)
    write_lines(root / "mono.en", sents)
    write_lines(root / "mono.xx", sents[::-1])
    write_manifest(root / "manifest.yaml", ["xx", "en"], "x2en",
                   [{"src": "xx", "tgt": "en", "src_file": "copy.src", "tgt_file": "copy.tgt"}],
                   [{"lang": "en", "side": "both", "file": "mono.en"},
                    {"lang": "xx", "side": "both", "file": "mono.xx"}])
    return root / "manifest.yaml", sents


COPY_CONFIG = dict(
    tasks=["MT"],
    vocab_size=60,
    batch_tokens=200,
    model=dict(layers_enc=1, layers_dec=1, d_model=32, d_ff=64, heads=2, dropout=0.0, label_smoothing=0.0),
    optim=dict(accumulation=1, warmup_steps=50, peak_lr=3e-3, max_updates=400, seed=0),
)


@pytest.fixture(scope="session")
def copy_trainer(tmp_path_factory):
    """Small model trained to copy its input; shared by decoding and back-translation tests."""
    root = tmp_path_factory.mktemp("copy")
    path, sents = write_copy_manifest(root)
    trainer = Trainer(load_manifest(path), TrainConfig.from_dict(COPY_CONFIG))
    trainer.train()
    trainer.model.eval()
    trainer.copy_sentences = sents
    return trainer


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, seconds, detail in sorted(acceptance.RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:>2} {title} ({seconds:.1f}s) {detail}".rstrip())

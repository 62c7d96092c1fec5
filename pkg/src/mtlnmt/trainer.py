"""Multi-task optimization loop, checkpoints, and the back-translation harness."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .corpus import BitextCorpus, CorpusManifest, corpus_sizes
from .evaluate import DecodeConfig, teacher_forced_accuracy, translate_ids
from .model import (
    ModelConfig,
    NumericalError,
    Seq2SeqTransformer,
    collate_mlm,
    collate_seq2seq,
    mlm_loss_sum,
    seq2seq_loss_sum,
)
from .noising import DAE, MLM, MT, DaeConfig, MlmConfig, make_mt_example
from .scheduling import BatchMixer, MixPlan, NoiseSchedule, TemperatureSchedule
from .tokenizer import SubwordVocab, decode, encode, train_vocab

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mtlnmt-checkpoint/1"


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    peak_lr: float = 5e-4
    warmup_steps: int = 400
    accumulation: int = 4
    max_updates: int = 1000
    clip_norm: float = 0.0
    seed: int = 1

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        if self.warmup_steps < 1 or self.accumulation < 1:
            raise ValueError("warmup_steps and accumulation must be >= 1")


# batch 4096 tokens x 16 accumulated batches
LARGE_OPTIM = dict(peak_lr=5e-4, warmup_steps=4000, accumulation=16)
LARGE_BATCH_TOKENS = 4096


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = cfg.warmup_steps
    return cfg.peak_lr * min(step / w, math.sqrt(w / step))


def build_optimizer(params, cfg: OptimConfig) -> torch.optim.Adam:
    """Adam with the configured betas; the learning rate is set per update from ``lr_at``."""
    return torch.optim.Adam(params, lr=lr_at(1, cfg), betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr


@dataclass
class TrainConfig:
    """Everything besides the corpora that determines a training run."""

    model: dict = field(default_factory=dict)
    optim: OptimConfig = field(default_factory=OptimConfig)
    tasks: tuple = (MT, MLM, DAE)
    batch_tokens: int = 512
    loss_weights: dict = field(default_factory=lambda: {MT: 1.0, MLM: 1.0, DAE: 1.0})
    temperature: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    mlm: MlmConfig = field(default_factory=MlmConfig)
    dae: DaeConfig = field(default_factory=DaeConfig)
    mlm_schedule: Optional[NoiseSchedule] = None
    dae_schedule: Optional[NoiseSchedule] = None
    vocab_size: int = 1000
    checkpoint_every: int = 0
    eval_every: int = 0
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "TrainConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        nested = {
            "optim": OptimConfig,
            "temperature": TemperatureSchedule,
            "mlm": MlmConfig,
            "dae": DaeConfig,
        }
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        if isinstance(d.get("mlm_schedule"), dict):
            d["mlm_schedule"] = NoiseSchedule(**{"applies_to": "mlm_mask", **d["mlm_schedule"]})
        if isinstance(d.get("dae_schedule"), dict):
            d["dae_schedule"] = NoiseSchedule(**{"applies_to": "dae_infill", **d["dae_schedule"]})
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def tokenize_manifest(manifest: CorpusManifest, vocab: SubwordVocab):
    bitext = {
        b.key: [(encode(s, vocab), encode(t, vocab)) for s, t in b.pairs] for b in manifest.bitext
    }
    mlm = {lang: [encode(s, vocab) for s in sents] for lang, sents in manifest.mlm_pools().items()}
    dae = {lang: [encode(s, vocab) for s in sents] for lang, sents in manifest.dae_pools().items()}
    return bitext, mlm, dae


def vocab_from_manifest(manifest: CorpusManifest, size: int) -> SubwordVocab:
    text = []
    for b in manifest.bitext:
        for s, t in b.pairs:
            text += [s, t]
    for m in manifest.mono:
        text += m.sentences
    return train_vocab(text, size, manifest.languages)


class Trainer:
    """Owns model, optimizer, mixer and the step/epoch bookkeeping of one run."""

    def __init__(
        self,
        manifest: CorpusManifest,
        config: TrainConfig,
        vocab: Optional[SubwordVocab] = None,
        valid: Optional[dict[str, list[tuple[str, str]]]] = None,
        out_dir=None,
    ):
        self.manifest = manifest
        self.config = config
        self.vocab = vocab or vocab_from_manifest(manifest, config.vocab_size)
        seed = config.optim.seed
        self.sizes = corpus_sizes(manifest)
        bitext, mlm_pools, dae_pools = tokenize_manifest(manifest, self.vocab)
        tasks = tuple(t for t in config.tasks)
        plan = MixPlan(
            tasks=tasks,
            batch_tokens={t: config.batch_tokens for t in tasks},
            loss_weights=dict(config.loss_weights),
        )
        self.plan = plan
        self.mixer = BatchMixer(
            self.vocab,
            bitext,
            self.sizes,
            mlm_pools if MLM in tasks else {},
            dae_pools if DAE in tasks else {},
            plan,
            config.temperature,
            config.mlm,
            config.dae,
            config.mlm_schedule,
            config.dae_schedule,
            seed=seed,
        )
        # private dropout stream, swapped into torch's global generator around each update
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self._build_model(config)
            self.torch_rng = torch.get_rng_state()
        self.optimizer = build_optimizer(self.model.parameters(), config.optim)
        self.step = 0
        self.valid = None
        if valid:
            self.valid = {
                key: [make_mt_example(encode(s, self.vocab), encode(t, self.vocab), key.split("-", 1)[1], self.vocab)
                      for s, t in pairs]
                for key, pairs in valid.items()
            }
        self.best_valid = math.inf
        self.out_dir = Path(out_dir) if out_dir else None
        self.log: list[dict] = []

    def _build_model(self, config: TrainConfig) -> None:
        mcfg = ModelConfig(vocab_size=len(self.vocab), pad_id=self.vocab.pad_id, **config.model)
        self.model = Seq2SeqTransformer(mcfg)
        self.dtype = getattr(torch, config.dtype)
        self.model.to(self.dtype)

    @property
    def epoch(self) -> int:
        return self.mixer.epoch

    def _collate(self, batch):
        v = self.vocab
        if batch.task == MLM:
            return collate_mlm(batch.examples, v.pad_id)
        return collate_seq2seq(batch.examples, v.pad_id, v.bos_id, v.eos_id)

    def _loss_sum(self, task, collated):
        if task == MLM:
            return mlm_loss_sum(self.model, collated)
        return seq2seq_loss_sum(self.model, collated)

    def accumulate(self, micro_batches: Sequence[dict]) -> dict[str, float]:
        """Backprop summed task losses over micro-batches, each task normalized by its total token count.

        Returns mean per-token loss per task. Gradients equal those of one
        big batch holding all micro-batches.
        """
        totals = {t: 0 for t in self.plan.tasks}
        for mb in micro_batches:
            for task, c in mb.items():
                totals[task] += c.n_tokens
        sums = {t: 0.0 for t in self.plan.tasks}
        for mb in micro_batches:
            loss = None
            for task, c in mb.items():
                s, n = self._loss_sum(task, c)
                sums[task] += float(s.detach())
                if totals[task] == 0:
                    continue
                term = self.plan.loss_weights.get(task, 1.0) * s / totals[task]
                loss = term if loss is None else loss + term
            if loss is not None:
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite loss at update {self.step + 1}")
                loss.backward()
        return {t: (sums[t] / totals[t] if totals[t] else 0.0) for t in self.plan.tasks}

    def train_step(self) -> dict:
        with torch.random.fork_rng(devices=[]):
            torch.set_rng_state(self.torch_rng)
            rec = self._update()
            self.torch_rng = torch.get_rng_state()
        return rec

    def _update(self) -> dict:
        self.model.train()
        k = self.mixer.epoch
        T = self.mixer.current_temperature()
        ratios = self.mixer.current_ratios()
        micro = []
        for _ in range(self.config.optim.accumulation):
            micro.append({b.task: self._collate(b) for b in self.mixer.next_batches()})
        self.optimizer.zero_grad(set_to_none=True)
        losses = self.accumulate(micro)
        for p in self.model.parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient at update {self.step + 1}")
        if self.config.optim.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.optim.clip_norm)
        self.step += 1
        lr = lr_at(self.step, self.config.optim)
        set_lr(self.optimizer, lr)
        self.optimizer.step()
        rec = {
            "step": self.step,
            "k": k,
            "T": T,
            "R_mlm": ratios[MLM],
            "R_dae": ratios[DAE],
            "L_MT": losses.get(MT, 0.0),
            "L_MLM": losses.get(MLM, 0.0),
            "L_DAE": losses.get(DAE, 0.0),
            "lr": lr,
        }
        self.log.append(rec)
        return rec

    def train(self, updates: Optional[int] = None, callback: Optional[Callable[[dict], None]] = None) -> list[dict]:
        target = updates if updates is not None else self.config.optim.max_updates
        log_f = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_f = open(self.out_dir / "metrics.jsonl", "a", encoding="utf-8")
        try:
            while self.step < target:
                try:
                    rec = self.train_step()
                except NumericalError as e:
                    self._dump_failure(e)
                    raise
                if self.valid and self.config.eval_every and self.step % self.config.eval_every == 0:
                    rec.update(self.validate())
                if log_f:
                    log_f.write(json.dumps(rec) + "\n")
                    log_f.flush()
                if callback:
                    callback(rec)
                if self.out_dir and self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                    self.save(self.out_dir / f"checkpoint_{self.step}.pt")
        finally:
            if log_f:
                log_f.close()
        if self.out_dir:
            self.save(self.out_dir / "checkpoint_last.pt")
        return self.log

    def _dump_failure(self, err: Exception) -> None:
        info = {"error": str(err), "step": self.step, "k": self.epoch, "last_records": self.log[-5:]}
        logger.error("numerical failure at update %d: %s", self.step + 1, err)
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "numerical_failure.json").write_text(json.dumps(info, indent=2))

    @torch.no_grad()
    def validate(self) -> dict:
        self.model.eval()
        total, n = 0.0, 0
        out = {}
        for key, examples in self.valid.items():
            c = collate_seq2seq(examples, self.vocab.pad_id, self.vocab.bos_id, self.vocab.eos_id)
            s, cnt = seq2seq_loss_sum(self.model, c)
            total += float(s)
            n += cnt
            out[f"valid_acc[{key}]"] = teacher_forced_accuracy(self.model, examples, self.vocab)
        out["valid_L_MT"] = total / max(n, 1)
        if out["valid_L_MT"] < self.best_valid:
            self.best_valid = out["valid_L_MT"]
            if self.out_dir:
                self.save(self.out_dir / "checkpoint_best.pt")
        return out

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "model_config": self.model.cfg.to_dict(),
            "train_config": self.config.to_dict(),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "mixer": self.mixer.state_dict(),
            "torch_rng": self.torch_rng,
            "best_valid": self.best_valid,
            "vocab": {"tokens": self.vocab.tokens, "merges": self.vocab.merges, "languages": self.vocab.languages},
            "log": list(self.log),
        }

    def save(self, path) -> None:
        _atomic_save(self.state_dict(), Path(path))

    def load_state_dict(self, state: dict) -> None:
        if state.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {state.get('format')!r}")
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = state["step"]
        self.mixer.load_state_dict(state["mixer"])
        self.torch_rng = state["torch_rng"]
        self.best_valid = state["best_valid"]
        self.log = list(state["log"])

    @classmethod
    def resume(cls, path, manifest: CorpusManifest, valid=None, out_dir=None) -> "Trainer":
        state = load_checkpoint_state(path)
        vocab = vocab_from_state(state)
        trainer = cls(manifest, TrainConfig.from_dict(state["train_config"]), vocab, valid, out_dir)
        trainer.load_state_dict(state)
        return trainer


def load_checkpoint_state(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def vocab_from_state(state: dict) -> SubwordVocab:
    v = state["vocab"]
    return SubwordVocab(list(v["tokens"]), [tuple(m) for m in v["merges"]], list(v["languages"]))


def load_model(path) -> tuple[Seq2SeqTransformer, SubwordVocab]:
    """Model (in eval mode) and vocabulary from a training checkpoint."""
    state = load_checkpoint_state(path)
    model = Seq2SeqTransformer(ModelConfig(**state["model_config"]))
    dtype = getattr(torch, state["train_config"].get("dtype", "float32"))
    model.to(dtype)
    model.load_state_dict(state["model"])
    model.eval()
    return model, vocab_from_state(state)


def generate_back_translations(
    model: Seq2SeqTransformer,
    vocab: SubwordVocab,
    mono: Sequence[str],
    mono_lang: str,
    synth_lang: str,
    decode_cfg=None,
    seed: int = 0,
) -> tuple[BitextCorpus, int]:
    """Translate ``mono_lang`` sentences into ``synth_lang`` to build synthetic (source, target) pairs.

    Returns the synthetic ``synth_lang -> mono_lang`` corpus and the number of
    sentences skipped because decoding produced nothing usable.
    """
    decode_cfg = decode_cfg or DecodeConfig()
    pairs = []
    skipped = 0
    for sentence in mono:
        try:
            hyp = translate_ids(model, vocab, encode(sentence, vocab).ids, synth_lang, decode_cfg)
        except (RuntimeError, ValueError) as e:
            logger.warning("back-translation failed: %s", e)
            skipped += 1
            continue
        text = decode(hyp, vocab)
        if not text:
            skipped += 1
            continue
        pairs.append((text, sentence))
    rng = np.random.default_rng(seed)
    pairs = [pairs[i] for i in rng.permutation(len(pairs))]
    return BitextCorpus(synth_lang, mono_lang, pairs), skipped


def merge_synthetic(manifest: CorpusManifest, synthetic: Sequence[BitextCorpus], seed: int = 0) -> CorpusManifest:
    """New manifest whose bitext pools also hold the synthetic pairs, shuffled in."""
    rng = np.random.default_rng(seed)
    merged = {b.key: list(b.pairs) for b in manifest.bitext}
    langs = {b.key: (b.src_lang, b.tgt_lang) for b in manifest.bitext}
    for s in synthetic:
        merged.setdefault(s.key, []).extend(s.pairs)
        langs[s.key] = (s.src_lang, s.tgt_lang)
    bitext = []
    for key, pairs in merged.items():
        pairs = [pairs[i] for i in rng.permutation(len(pairs))]
        bitext.append(BitextCorpus(*langs[key], pairs))
    return CorpusManifest(
        languages=list(manifest.languages),
        direction=manifest.direction,
        bitext=bitext,
        mono=list(manifest.mono),
        pivot=manifest.pivot,
        filter=manifest.filter,
        path=manifest.path,
    )

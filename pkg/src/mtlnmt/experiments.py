"""End-to-end toy experiments: baseline vs multi-task vs back-translation, plus zero-shot x2x."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Optional

from .corpus import BitextCorpus, load_manifest
from .evaluate import DecodeConfig, bleu, language_partition, lid_compliance, teacher_forced_accuracy, translate_ids
from .noising import make_mt_example
from .synthetic import ToySetup, build_toy_corpora
from .tokenizer import decode, encode
from .model import LARGE_MODEL
from .trainer import LARGE_BATCH_TOKENS, LARGE_OPTIM, TrainConfig, Trainer, generate_back_translations, merge_synthetic

logger = logging.getLogger(__name__)


def derive_seed(seed: int, component: str) -> int:
    """Stable per-component seed from the single run seed."""
    digest = hashlib.sha256(f"{seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


class StageError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"stage {stage!r} failed: {err}")
        self.stage = stage
        self.__cause__ = err


NOISE_SCHEDULES = dict(
    mlm_schedule=dict(R0=0.10, Rm=0.20, M=5),
    dae_schedule=dict(R0=0.20, Rm=0.40, M=5),
)

BASE_TRAIN = dict(
    vocab_size=400,
    batch_tokens=512,
    model=dict(layers_enc=2, layers_dec=2, d_model=64, d_ff=256, heads=4, dropout=0.1),
    optim=dict(accumulation=1, warmup_steps=200, peak_lr=1e-3),
    temperature=dict(T0=1, Tm=5, N=5),
    **NOISE_SCHEDULES,
)

LARGE_TRAIN = dict(
    vocab_size=64000,
    batch_tokens=LARGE_BATCH_TOKENS,
    model=LARGE_MODEL,
    optim=LARGE_OPTIM,
    temperature=dict(T0=1, Tm=5, N=5),
    **NOISE_SCHEDULES,
)

# plain training configs selectable with ``train --preset``, next to the experiment presets
TRAIN_PRESETS = {"desk": BASE_TRAIN, "large": LARGE_TRAIN}

MTL_TASKS = ["MT", "MLM", "DAE"]


@dataclasses.dataclass
class ExperimentPreset:
    name: str
    description: str
    setup: dict
    tasks: list
    updates: int
    train: dict = dataclasses.field(default_factory=dict)
    # back-translation: reverse model trained on the focus pair, then target-side mono decoded into the source
    back_translate: bool = False
    bt_updates: int = 300
    bt_sentences: int = 200
    # pair key whose validation accuracy is the headline number
    focus_pair: Optional[str] = None
    # zero-shot source/target languages (no direct bitext between them)
    zero_shot: Optional[tuple] = None
    baseline: Optional[str] = None
    thresholds: dict = dataclasses.field(default_factory=dict)
    eval_bleu_sentences: int = 50

    def train_config(self, seed: int) -> TrainConfig:
        d = copy.deepcopy(BASE_TRAIN)
        for k, v in self.train.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k].update(v)
            else:
                d[k] = v
        d["tasks"] = list(self.tasks)
        d["optim"]["max_updates"] = self.updates
        d["optim"]["seed"] = derive_seed(seed, "trainer")
        return TrainConfig.from_dict(d)


LOW_RESOURCE = dict(languages=("en", "xa", "xb"), direction="en2x", bitext={"xa": 200, "xb": 20}, mono=500, valid=100)
ZERO_SHOT = dict(languages=("en", "xa", "xb"), direction="x2x", bitext={"xa": 200, "xb": 200}, mono=500, valid=100)

PRESETS = {
    p.name: p
    for p in [
        ExperimentPreset(
            "toy-baseline", "bitext only, low-resource en2x", LOW_RESOURCE, ["MT"], 800, focus_pair="en-xb"
        ),
        ExperimentPreset(
            "toy-mtl", "bitext + MLM + DAE, low-resource en2x", LOW_RESOURCE, MTL_TASKS, 800,
            focus_pair="en-xb", baseline="toy-baseline", thresholds={"focus_valid_acc_gain": 0.02},
        ),
        ExperimentPreset(
            "toy-bt", "bitext + back-translated xb mono, low-resource en2x", LOW_RESOURCE, ["MT"], 800,
            focus_pair="en-xb", back_translate=True,
        ),
        ExperimentPreset(
            "toy-bt-mtl", "bitext + back-translation + MLM + DAE, low-resource en2x", LOW_RESOURCE, MTL_TASKS, 800,
            focus_pair="en-xb", back_translate=True,
        ),
        ExperimentPreset(
            "toy-x2x-baseline", "English-centric x2x bitext only; xa->xb evaluated zero-shot", ZERO_SHOT, ["MT"], 1600,
            zero_shot=("xa", "xb"),
        ),
        ExperimentPreset(
            "toy-x2x-zeroshot", "English-centric x2x + MLM + DAE; xa->xb evaluated zero-shot", ZERO_SHOT, MTL_TASKS,
            1600, zero_shot=("xa", "xb"), baseline="toy-x2x-baseline",
            thresholds={"zero_shot_compliance": 0.80, "zero_shot_compliance_gain": 0.0},
        ),
    ]
}


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:  # noqa: BLE001 - re-raised with the stage name attached
        raise StageError(name, e) from e


def _train_accuracy(trainer: Trainer) -> float:
    v = trainer.vocab
    ex = [
        make_mt_example(encode(s, v), encode(t, v), b.tgt_lang, v)
        for b in trainer.manifest.bitext
        for s, t in b.pairs
    ]
    return teacher_forced_accuracy(trainer.model, ex, v)


def _back_translate(preset: ExperimentPreset, seed: int, data: dict, cfg: TrainConfig, out: Optional[Path]):
    """Train a reverse model for the focus pair and back-translate target-side monolingual text."""
    manifest = load_manifest(data["manifest"])
    src, tgt = preset.focus_pair.split("-")
    reverse_pairs = [(t, s) for b in manifest.bitext if b.key == preset.focus_pair for s, t in b.pairs]
    reverse = copy.copy(manifest)
    reverse.bitext = [BitextCorpus(tgt, src, reverse_pairs)]
    reverse.direction = "en2x" if tgt == manifest.pivot else "x2en"
    rcfg = TrainConfig.from_dict({**cfg.to_dict(), "tasks": ["MT"]})
    rcfg.optim.max_updates = preset.bt_updates
    rcfg.optim.seed = derive_seed(seed, "reverse")
    rtrainer = Trainer(reverse, rcfg, out_dir=out / "reverse" if out else None)
    rtrainer.train()
    mono = [m for m in manifest.mono if m.lang == tgt][0].sentences[: preset.bt_sentences]
    synthetic, skipped = generate_back_translations(
        rtrainer.model, rtrainer.vocab, mono, tgt, src, DecodeConfig(beam_size=1), seed=derive_seed(seed, "bt")
    )
    return merge_synthetic(manifest, [synthetic], seed=derive_seed(seed, "bt-merge")), synthetic.size, skipped


def run_experiment(preset, seed: int = 0, out_dir=None, updates: Optional[int] = None, work_dir=None) -> dict:
    """Run one preset end to end and return its metrics summary.

    ``updates`` overrides the preset's update count (used for quick smoke runs).
    """
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise KeyError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        preset = PRESETS[preset]
    out = Path(out_dir) if out_dir else None
    if updates is not None:
        preset = dataclasses.replace(preset, updates=updates)
    t0 = time.time()
    setup = ToySetup(**{**preset.setup, "seed": derive_seed(seed, "corpus")})
    data_dir = Path(work_dir or out or ".") / "data"
    data = _stage("prepare-data", build_toy_corpora, setup, data_dir)
    cfg = preset.train_config(seed)
    manifest = load_manifest(data["manifest"])
    summary = {"preset": preset.name, "seed": seed, "updates": preset.updates, "tasks": list(preset.tasks)}
    if preset.back_translate:
        manifest, n_synth, skipped = _stage("backtranslate", _back_translate, preset, seed, data, cfg, out)
        summary["bt_pairs"] = n_synth
        summary["bt_skipped"] = skipped
    trainer = Trainer(manifest, cfg, valid=data["valid"], out_dir=out / "train" if out else None)
    _stage("train", trainer.train)
    last = trainer.log[-1]
    summary.update({"L_MT": last["L_MT"], "L_MLM": last["L_MLM"], "L_DAE": last["L_DAE"], "k": last["k"]})
    summary["train_acc"] = _stage("evaluate", _train_accuracy, trainer)
    valid = _stage("evaluate", trainer.validate)
    summary["valid_L_MT"] = valid["valid_L_MT"]
    summary["valid_acc"] = {k[len("valid_acc["):-1]: v for k, v in valid.items() if k.startswith("valid_acc[")}
    if preset.focus_pair:
        summary["focus_valid_acc"] = summary["valid_acc"][preset.focus_pair]
        pairs = data["valid"][preset.focus_pair][: preset.eval_bleu_sentences]
        summary["focus_bleu"] = _stage("evaluate", _pair_bleu, trainer, pairs, preset.focus_pair.split("-")[1])
    if preset.zero_shot:
        summary.update(_stage("evaluate", _zero_shot_metrics, trainer, data, preset))
    summary["seconds"] = round(time.time() - t0, 1)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _pair_bleu(trainer: Trainer, pairs, tgt_lang: str, cfg: Optional[DecodeConfig] = None) -> float:
    cfg = cfg or DecodeConfig(beam_size=1)
    v = trainer.vocab
    hyps = [decode(translate_ids(trainer.model, v, encode(s, v).ids, tgt_lang, cfg), v) for s, _ in pairs]
    return bleu(hyps, [t for _, t in pairs]).score


def _zero_shot_metrics(trainer: Trainer, data: dict, preset: ExperimentPreset) -> dict:
    src, tgt = preset.zero_shot
    v = trainer.vocab
    n = preset.eval_bleu_sentences
    sources = data["test"][src][:n]
    refs = data["test"][tgt][:n]
    cfg = DecodeConfig(beam_size=1)
    hyps = [translate_ids(trainer.model, v, encode(s, v).ids, tgt, cfg) for s in sources]
    parts = language_partition(v, {tgt: data["test"][tgt]})
    # a token is on-target when the target language's text can produce it
    target_ids = parts[tgt]
    return {
        "zero_shot_pair": f"{src}-{tgt}",
        "zero_shot_compliance": lid_compliance(hyps, target_ids, v),
        "zero_shot_bleu": bleu([decode(h, v) for h in hyps], refs).score,
    }


def check_thresholds(result: dict, baseline: Optional[dict], thresholds: dict) -> dict[str, bool]:
    """Pass/fail per threshold; gains compare against the baseline run with the same seed."""
    checks = {}
    for name, value in thresholds.items():
        if name.endswith("_gain"):
            metric = name[: -len("_gain")]
            if baseline is None:
                raise ValueError(f"threshold {name!r} needs a baseline result")
            diff = result[metric] - baseline[metric]
            # a zero gain threshold means strictly better
            checks[name] = diff > value if value == 0 else diff >= value
        else:
            checks[name] = result[name] >= value
    return checks


SUMMARY_COLUMNS = ["preset", "seed", "L_MT", "L_MLM", "L_DAE", "train_acc", "focus_valid_acc", "focus_bleu",
                   "zero_shot_compliance", "zero_shot_bleu", "seconds"]


def summary_table(results: list[dict]) -> str:
    """Plain-text table, one row per run."""
    rows = [SUMMARY_COLUMNS]
    for r in results:
        row = []
        for c in SUMMARY_COLUMNS:
            v = r.get(c, "")
            row.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(SUMMARY_COLUMNS))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)

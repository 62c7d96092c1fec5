"""Temperature/noise-ratio curricula and the per-update three-task batch mixer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .noising import (
    DAE,
    MLM,
    MT,
    DaeConfig,
    MlmConfig,
    NoisedExample,
    make_dae_example,
    make_mt_example,
    mask_mlm,
    sentence_rng,
)
from .tokenizer import SubwordVocab, TokenizedSentence


class ScheduleError(ValueError):
    pass


@dataclass
class TemperatureSchedule:
    T0: float = 1.0
    Tm: float = 5.0
    N: int = 5

    def __post_init__(self):
        if not self.T0 > 0:
            raise ScheduleError("T0 must be positive")
        if self.Tm < self.T0:
            raise ScheduleError("Tm must be >= T0")
        if self.N < 1:
            raise ScheduleError("N must be >= 1")


@dataclass
class NoiseSchedule:
    R0: float = 0.1
    Rm: float = 0.2
    M: int = 5
    applies_to: str = "mlm_mask"

    def __post_init__(self):
        if not 0.0 <= self.R0 <= self.Rm <= 1.0:
            raise ScheduleError("need 0 <= R0 <= Rm <= 1")
        if self.M < 1:
            raise ScheduleError("M must be >= 1")
        if self.applies_to not in ("mlm_mask", "dae_infill"):
            raise ScheduleError(f"bad applies_to {self.applies_to!r}")


def _linear_warmup(k: float, start: float, stop: float, warmup: int) -> float:
    if k < 1:
        raise ScheduleError(f"epoch index must be >= 1, got {k}")
    return min(stop, (k - 1) * (stop - start) / warmup + start)


def temperature_at(sched: TemperatureSchedule, k: float) -> float:
    """Sampling temperature for epoch ``k`` (1-based), linear from T0 then clamped at Tm."""
    return _linear_warmup(k, sched.T0, sched.Tm, sched.N)


def noise_ratio_at(sched: NoiseSchedule, k: float) -> float:
    return _linear_warmup(k, sched.R0, sched.Rm, sched.M)


def pair_sampling_probs(sizes: Mapping[str, int], T: float) -> dict[str, float]:
    """Probabilities proportional to (|D_l| / sum |D|) ** (1/T), normalized."""
    if not sizes:
        raise ScheduleError("empty size map")
    if not T > 0:
        raise ScheduleError("temperature must be positive")
    keys = list(sizes)
    counts = np.array([sizes[k] for k in keys], dtype=np.float64)
    if np.any(counts <= 0):
        raise ScheduleError(f"all corpus sizes must be positive: {dict(sizes)}")
    logits = np.log(counts / counts.sum()) / T
    w = np.exp(logits - logits.max())
    p = w / w.sum()
    return dict(zip(keys, p.tolist()))


def entropy(probs: Mapping[str, float]) -> float:
    return -sum(p * math.log(p) for p in probs.values() if p > 0)


@dataclass
class MixPlan:
    tasks: tuple[str, ...] = (MT, MLM, DAE)
    batch_tokens: dict[str, int] = field(default_factory=lambda: {MT: 512, MLM: 512, DAE: 512})
    loss_weights: dict[str, float] = field(default_factory=lambda: {MT: 1.0, MLM: 1.0, DAE: 1.0})


@dataclass
class TaskBatch:
    task: str
    examples: list[NoisedExample]
    # pair key for MT, language code for MLM/DAE
    sources: list[str]

    @property
    def n_tokens(self) -> int:
        return sum(max(len(e.input_ids), len(e.target_ids)) for e in self.examples)


class Pool:
    """Cycles through items in shuffled order, reshuffling whenever it runs dry."""

    def __init__(self, items: Sequence, seed):
        self.items = items
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(items))
        self.cursor = 0
        self.restarts = 0

    def next(self):
        if self.cursor >= len(self.order):
            self.order = self.rng.permutation(len(self.items))
            self.cursor = 0
            self.restarts += 1
        item = self.items[int(self.order[self.cursor])]
        self.cursor += 1
        return item

    def state_dict(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "order": self.order.tolist(),
            "cursor": self.cursor,
            "restarts": self.restarts,
        }

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.order = np.array(state["order"], dtype=np.int64)
        self.cursor = state["cursor"]
        self.restarts = state["restarts"]


class BatchMixer:
    """Draws one batch per configured task for every parameter update.

    MT instances pick their language pair from temperature-scaled corpus
    shares at T(k); MLM/DAE instances pick a language the same way over
    monolingual pool sizes, and use noise ratios R(k) when noise schedules
    are given. The epoch counter k advances each time sum(|D_l|) MT
    instances have been drawn.
    """

    def __init__(
        self,
        vocab: SubwordVocab,
        bitext: Mapping[str, Sequence[tuple[TokenizedSentence, TokenizedSentence]]],
        sizes: Mapping[str, int],
        mlm_pools: Mapping[str, Sequence[TokenizedSentence]],
        dae_pools: Mapping[str, Sequence[TokenizedSentence]],
        plan: MixPlan,
        temperature: TemperatureSchedule,
        mlm_cfg: MlmConfig,
        dae_cfg: DaeConfig,
        mlm_schedule: Optional[NoiseSchedule] = None,
        dae_schedule: Optional[NoiseSchedule] = None,
        seed: int = 0,
    ):
        self.vocab = vocab
        self.plan = plan
        self.temperature = temperature
        self.mlm_cfg = mlm_cfg
        self.dae_cfg = dae_cfg
        self.mlm_schedule = mlm_schedule
        self.dae_schedule = dae_schedule
        self.seed = seed
        self.sizes = sizes
        if set(sizes) != set(bitext):
            raise ScheduleError("sizes and bitext pools disagree on pair keys")
        if MT in plan.tasks and not bitext:
            raise ScheduleError("MT task configured but no bitext available")
        if MLM in plan.tasks and not mlm_pools:
            raise ScheduleError("MLM task configured but no source-side monolingual data")
        if DAE in plan.tasks and not dae_pools:
            raise ScheduleError("DAE task configured but no target-side monolingual data")
        self.pair_tgt = {key: key.split("-", 1)[1] for key in bitext}
        self.mt_pools = {k: Pool(v, [seed, 1, i]) for i, (k, v) in enumerate(sorted(bitext.items()))}
        self.mlm_pools = {k: Pool(v, [seed, 2, i]) for i, (k, v) in enumerate(sorted(mlm_pools.items()))}
        self.dae_pools = {k: Pool(v, [seed, 3, i]) for i, (k, v) in enumerate(sorted(dae_pools.items()))}
        self.mono_sizes = {
            MLM: {k: len(v) for k, v in sorted(mlm_pools.items())},
            DAE: {k: len(v) for k, v in sorted(dae_pools.items())},
        }
        self.rng = np.random.default_rng([seed, 0])
        self.epoch_size = sum(sizes.values())
        self.mt_drawn = 0
        self.noise_counter = 0
        self.updates = 0

    @property
    def epoch(self) -> int:
        if self.epoch_size == 0:
            return 1
        return 1 + self.mt_drawn // self.epoch_size

    def current_temperature(self) -> float:
        return temperature_at(self.temperature, self.epoch)

    def current_ratios(self) -> dict[str, float]:
        k = self.epoch
        mlm = noise_ratio_at(self.mlm_schedule, k) if self.mlm_schedule else self.mlm_cfg.mask_ratio
        dae = noise_ratio_at(self.dae_schedule, k) if self.dae_schedule else self.dae_cfg.infill_ratio
        return {MLM: mlm, DAE: dae}

    def _choose(self, probs: dict[str, float]) -> str:
        keys = list(probs)
        return keys[int(self.rng.choice(len(keys), p=list(probs.values())))]

    def next_batches(self) -> list[TaskBatch]:
        """Batches for one update; schedules are evaluated once at the current epoch."""
        T = self.current_temperature()
        ratios = self.current_ratios()
        out = []
        for task in self.plan.tasks:
            if task == MT:
                out.append(self._mt_batch(T))
            elif task == MLM:
                out.append(self._mono_batch(MLM, T, ratios[MLM]))
            elif task == DAE:
                out.append(self._mono_batch(DAE, T, ratios[DAE]))
        self.updates += 1
        return out

    def _mt_batch(self, T: float) -> TaskBatch:
        probs = pair_sampling_probs(self.sizes, T)
        budget = self.plan.batch_tokens[MT]
        examples, sources, used = [], [], 0
        while True:
            key = self._choose(probs)
            src, tgt = self.mt_pools[key].next()
            ex = make_mt_example(src, tgt, self.pair_tgt[key], self.vocab)
            self.mt_drawn += 1
            examples.append(ex)
            sources.append(key)
            used += max(len(ex.input_ids), len(ex.target_ids))
            if used >= budget:
                break
        return TaskBatch(MT, examples, sources)

    def _mono_batch(self, task: str, T: float, ratio: float) -> TaskBatch:
        pools = self.mlm_pools if task == MLM else self.dae_pools
        probs = pair_sampling_probs(self.mono_sizes[task], T)
        budget = self.plan.batch_tokens[task]
        examples, sources, used = [], [], 0
        while True:
            lang = self._choose(probs)
            sent = pools[lang].next()
            rng = sentence_rng(self.seed, self.noise_counter)
            self.noise_counter += 1
            if task == MLM:
                cfg = MlmConfig(ratio, self.mlm_cfg.level, self.mlm_cfg.policy)
                ex = mask_mlm(sent, cfg, rng, self.vocab)
            else:
                cfg = DaeConfig(
                    ratio,
                    self.dae_cfg.poisson_lambda,
                    self.dae_cfg.drop_prob,
                    self.dae_cfg.blank_prob,
                    self.dae_cfg.swap_distance,
                )
                ex = make_dae_example(sent, cfg, lang, rng, self.vocab)
            examples.append(ex)
            sources.append(lang)
            used += max(len(ex.input_ids), len(ex.target_ids))
            if used >= budget:
                break
        return TaskBatch(task, examples, sources)

    def state_dict(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "mt_drawn": self.mt_drawn,
            "noise_counter": self.noise_counter,
            "updates": self.updates,
            "mt": {k: p.state_dict() for k, p in self.mt_pools.items()},
            "mlm": {k: p.state_dict() for k, p in self.mlm_pools.items()},
            "dae": {k: p.state_dict() for k, p in self.dae_pools.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.mt_drawn = state["mt_drawn"]
        self.noise_counter = state["noise_counter"]
        self.updates = state["updates"]
        for name, pools in (("mt", self.mt_pools), ("mlm", self.mlm_pools), ("dae", self.dae_pools)):
            for k, p in pools.items():
                p.load_state_dict(state[name][k])


def schedule_table(
    temperature: TemperatureSchedule,
    sizes: Mapping[str, int],
    epochs: int,
    mlm_schedule: Optional[NoiseSchedule] = None,
    dae_schedule: Optional[NoiseSchedule] = None,
) -> list[dict]:
    """Per-epoch audit rows: k, T(k), R(k) for each noise schedule, pair probabilities."""
    rows = []
    for k in range(1, epochs + 1):
        T = temperature_at(temperature, k)
        row = {"k": k, "T": T}
        if mlm_schedule:
            row["R_mlm"] = noise_ratio_at(mlm_schedule, k)
        if dae_schedule:
            row["R_dae"] = noise_ratio_at(dae_schedule, k)
        if sizes:
            for key, p in pair_sampling_probs(sizes, T).items():
                row[f"p[{key}]"] = p
        rows.append(row)
    return rows

"""MLM masking and the DAE noising model (text infilling, word drop/blank, local swaps).

Every function is a pure function of its inputs and the supplied
``numpy.random.Generator``; DAE noise works on word units, i.e. lists of the
subword ids making up one whitespace word.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional, Sequence, Union

import numpy as np

from .tokenizer import SubwordVocab, TokenizedSentence

MT, MLM, DAE = "MT", "MLM", "DAE"
TASKS = (MT, MLM, DAE)

Units = list[list[int]]


@dataclass
class MlmConfig:
    mask_ratio: float = 0.15
    level: str = "word"
    # "mask": every chosen token becomes [MASK]; "bert": 80/10/10 mask/random/keep
    policy: str = "mask"

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.level not in ("token", "word"):
            raise ValueError(f"level must be 'token' or 'word', got {self.level!r}")
        if self.policy not in ("mask", "bert"):
            raise ValueError(f"policy must be 'mask' or 'bert', got {self.policy!r}")


@dataclass
class DaeConfig:
    infill_ratio: float = 0.3
    poisson_lambda: float = 3.5
    drop_prob: float = 0.1
    blank_prob: float = 0.1
    swap_distance: int = 3

    def __post_init__(self):
        for name in ("infill_ratio", "drop_prob", "blank_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.poisson_lambda <= 0:
            raise ValueError("poisson_lambda must be positive")
        if self.swap_distance < 0:
            raise ValueError("swap_distance must be nonnegative")


@dataclass
class NoisedExample:
    input_ids: list[int]
    target_ids: list[int]
    loss_mask: list[bool]
    task: str
    tgt_lid: Optional[str] = None

    def to_json(self, vocab: Optional[SubwordVocab] = None) -> str:
        """One-line debug record; token strings are used when a vocab is given."""
        d = asdict(self)
        if vocab is not None:
            d["input_tokens"] = [vocab.tokens[i] for i in self.input_ids]
            d["target_tokens"] = [vocab.tokens[i] for i in self.target_ids]
        d["loss_mask"] = "".join("1" if b else "0" for b in self.loss_mask)
        return json.dumps(d, ensure_ascii=False)


def round_half_up(x: float) -> int:
    return int(Decimal(repr(float(x))).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def unit_budget(ratio: float, n_units: int) -> int:
    """Number of units to noise: round-half-up of ratio * n, at least 1 when ratio > 0."""
    if ratio <= 0 or n_units == 0:
        return 0
    return min(n_units, max(1, round_half_up(Decimal(repr(float(ratio))) * n_units)))


def sentence_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per sentence so serial and parallel noising agree."""
    return np.random.default_rng([int(seed), int(index)])


def _as_units(sent: Union[TokenizedSentence, Units]) -> Units:
    if isinstance(sent, TokenizedSentence):
        return sent.words()
    return [list(u) for u in sent]


def flatten(units: Units) -> list[int]:
    return [i for u in units for i in u]


def mask_mlm(
    sent: TokenizedSentence, cfg: MlmConfig, rng: np.random.Generator, vocab: SubwordVocab
) -> NoisedExample:
    ids = list(sent.ids)
    if cfg.level == "token":
        units = [(i, i + 1) for i in range(len(ids))]
    else:
        units = list(sent.word_spans)
    n_mask = unit_budget(cfg.mask_ratio, len(units))
    chosen = rng.choice(len(units), size=n_mask, replace=False) if n_mask else []
    loss_mask = [False] * len(ids)
    inputs = list(ids)
    for u in sorted(int(c) for c in chosen):
        s, e = units[u]
        for p in range(s, e):
            loss_mask[p] = True
            inputs[p] = vocab.mask_id
    if cfg.policy == "bert":
        # positions stay in the loss; only the corrupted input changes
        for p in range(len(ids)):
            if loss_mask[p]:
                r = rng.random()
                if r >= 0.9:
                    inputs[p] = ids[p]
                elif r >= 0.8:
                    inputs[p] = _random_regular_token(vocab, rng)
    return NoisedExample(inputs, ids, loss_mask, MLM, None)


def _random_regular_token(vocab: SubwordVocab, rng: np.random.Generator) -> int:
    n_special = len(vocab.specials)
    return int(rng.integers(n_special, len(vocab)))


def poisson_span_lengths(rng: np.random.Generator, lam: float, size: int) -> np.ndarray:
    """Raw Poisson(lam) span-length draws, before any truncation."""
    return rng.poisson(lam, size=size)


def sample_infill_spans(
    n_words: int, ratio: float, lam: float, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """Sample non-overlapping (start, length) spans covering the word budget.

    Zero-length draws are redrawn; a length is cut to the remaining budget
    and, if no free run is long enough, to the longest free run.
    """
    budget = unit_budget(ratio, n_words)
    free = np.ones(n_words, dtype=bool)
    spans = []
    remaining = budget
    while remaining > 0:
        length = 0
        while length == 0:
            length = int(poisson_span_lengths(rng, lam, 1)[0])
        length = min(length, remaining)
        starts = _valid_starts(free, length)
        if len(starts) == 0:
            length = _longest_run(free)
            starts = _valid_starts(free, length)
        start = int(starts[rng.integers(len(starts))])
        free[start : start + length] = False
        spans.append((start, length))
        remaining -= length
    return sorted(spans)


def _valid_starts(free: np.ndarray, length: int) -> np.ndarray:
    if length > len(free):
        return np.empty(0, dtype=int)
    window = np.convolve(free.astype(int), np.ones(length, dtype=int), mode="valid")
    return np.flatnonzero(window == length)


def _longest_run(free: np.ndarray) -> int:
    best = run = 0
    for f in free:
        run = run + 1 if f else 0
        best = max(best, run)
    return best


def infill_spans(
    sent: Union[TokenizedSentence, Units], cfg: DaeConfig, rng: np.random.Generator, blank_id: int
) -> Units:
    units = _as_units(sent)
    spans = sample_infill_spans(len(units), cfg.infill_ratio, cfg.poisson_lambda, rng)
    out: Units = []
    pos = 0
    for start, length in spans:
        out.extend(units[pos:start])
        out.append([blank_id])
        pos = start + length
    out.extend(units[pos:])
    return out


def drop_and_blank(units: Units, cfg: DaeConfig, rng: np.random.Generator, blank_id: int) -> Units:
    """Drop each word with ``drop_prob``; otherwise blank every token of it with ``blank_prob``.

    Units that are already a single blank (from infilling) pass through untouched.
    """
    out: Units = []
    for u in units:
        r_drop, r_blank = rng.random(2)
        if u == [blank_id]:
            out.append(list(u))
        elif r_drop < cfg.drop_prob:
            continue
        elif r_blank < cfg.blank_prob:
            out.append([blank_id] * len(u))
        else:
            out.append(list(u))
    return out


def bounded_permutation(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation ``order`` with ``|order[p] - p| <= k`` via jittered stable sort."""
    if k == 0 or n <= 1:
        return np.arange(n)
    keys = np.arange(n) + rng.uniform(0.0, k + 1.0, size=n)
    return np.argsort(keys, kind="stable")


def swap_words(units: Sequence, k: int, rng: np.random.Generator) -> list:
    if k < 0:
        raise ValueError("swap distance must be nonnegative")
    order = bounded_permutation(len(units), k, rng)
    return [units[i] for i in order]


def make_dae_example(
    sent: TokenizedSentence,
    cfg: DaeConfig,
    lang: str,
    rng: np.random.Generator,
    vocab: SubwordVocab,
) -> NoisedExample:
    units = infill_spans(sent, cfg, rng, vocab.blank_id)
    units = drop_and_blank(units, cfg, rng, vocab.blank_id)
    units = swap_words(units, cfg.swap_distance, rng)
    inputs = flatten(units) + [vocab.lid(lang)]
    target = list(sent.ids)
    return NoisedExample(inputs, target, [True] * len(target), DAE, lang)


def make_mt_example(
    src: TokenizedSentence, tgt: TokenizedSentence, tgt_lang: str, vocab: SubwordVocab
) -> NoisedExample:
    target = list(tgt.ids)
    return NoisedExample(list(src.ids) + [vocab.lid(tgt_lang)], target, [True] * len(target), MT, tgt_lang)

"""Greedy/beam decoding, corpus BLEU, teacher-forced accuracy and target-language compliance."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import torch

from .model import Seq2SeqTransformer, collate_seq2seq
from .noising import NoisedExample
from .tokenizer import SubwordVocab, encode


@dataclass
class DecodeConfig:
    beam_size: int = 5
    length_penalty: float = 1.0
    # "simple": score / len**alpha ; "gnmt": score / ((5 + len) / 6)**alpha
    penalty_style: str = "simple"
    max_len_a: float = 1.5
    max_len_b: int = 10

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.length_penalty < 0:
            raise ValueError("length_penalty must be >= 0")
        if self.penalty_style not in ("simple", "gnmt"):
            raise ValueError(f"unknown penalty_style {self.penalty_style!r}")

    def max_len(self, src_len: int) -> int:
        return max(1, int(self.max_len_a * src_len + self.max_len_b))


def normalized_score(logprob: float, length: int, cfg: DecodeConfig) -> float:
    """Length-normalized hypothesis score; ``length`` counts generated tokens including EOS."""
    alpha = cfg.length_penalty
    if cfg.penalty_style == "simple":
        return logprob / (length**alpha)
    return logprob / (((5.0 + length) / 6.0) ** alpha)


def _next_logprobs(model, memory, src_mask, prefixes: torch.Tensor) -> torch.Tensor:
    logits = model.decode(prefixes, memory, src_mask)
    return torch.log_softmax(logits[:, -1, :].double(), dim=-1)


@torch.no_grad()
def greedy_decode(model: Seq2SeqTransformer, src_ids: Sequence[int], vocab: SubwordVocab, max_len: int):
    """Argmax decoding; returns (ids without BOS/EOS, summed log-prob incl. EOS)."""
    model.eval()
    src = torch.tensor([list(src_ids)], dtype=torch.long)
    memory, src_mask = model.encode(src)
    tokens = [vocab.bos_id]
    score = 0.0
    for step in range(max_len):
        lp = _next_logprobs(model, memory, src_mask, torch.tensor([tokens]))[0]
        nxt = int(lp.argmax()) if step < max_len - 1 else vocab.eos_id
        score += float(lp[nxt])
        if nxt == vocab.eos_id:
            break
        tokens.append(nxt)
    return tokens[1:], score


@torch.no_grad()
def beam_decode(model: Seq2SeqTransformer, src_ids: Sequence[int], vocab: SubwordVocab, cfg: DecodeConfig):
    """Beam search; returns (best ids without BOS/EOS, its length-normalized score).

    An EOS candidate is accepted only when it ranks within the top
    ``beam_size`` expansions, so ``beam_size=1`` reproduces greedy search
    exactly. Search stops once ``beam_size`` hypotheses have finished; at the
    length limit every live hypothesis is closed with EOS.
    """
    model.eval()
    B = cfg.beam_size
    max_len = cfg.max_len(len(src_ids))
    src = torch.tensor([list(src_ids)], dtype=torch.long)
    memory, src_mask = model.encode(src)
    alive: list[tuple[list[int], float]] = [([vocab.bos_id], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(max_len):
        n = len(alive)
        prefixes = torch.tensor([toks for toks, _ in alive])
        lp = _next_logprobs(model, memory.expand(n, -1, -1), src_mask.expand(n, -1, -1, -1), prefixes)
        if step == max_len - 1:
            for (toks, s), row in zip(alive, lp):
                finished.append((toks[1:], s + float(row[vocab.eos_id])))
            break
        cum = torch.tensor([s for _, s in alive], dtype=torch.float64)[:, None] + lp
        flat = cum.flatten()
        k = min(2 * B, flat.numel())
        top_scores, top_idx = flat.topk(k)
        V = lp.shape[1]
        new_alive = []
        for rank, (sc, idx) in enumerate(zip(top_scores.tolist(), top_idx.tolist())):
            beam, tok = divmod(idx, V)
            if tok == vocab.eos_id:
                if rank < B:
                    finished.append((alive[beam][0][1:], sc))
            elif len(new_alive) < B:
                new_alive.append((alive[beam][0] + [tok], sc))
        if len(finished) >= B or not new_alive:
            break
        alive = new_alive
    best = max(finished, key=lambda h: normalized_score(h[1], len(h[0]) + 1, cfg))
    return best[0], normalized_score(best[1], len(best[0]) + 1, cfg)


@torch.no_grad()
def sequence_logprob(model: Seq2SeqTransformer, src_ids: Sequence[int], hyp_ids: Sequence[int], vocab: SubwordVocab) -> float:
    """Model log-probability of ``hyp_ids`` followed by EOS."""
    model.eval()
    src = torch.tensor([list(src_ids)])
    tgt_in = torch.tensor([[vocab.bos_id] + list(hyp_ids)])
    lp = torch.log_softmax(model(src, tgt_in).double(), -1)[0]
    gold = list(hyp_ids) + [vocab.eos_id]
    return float(sum(lp[t, g] for t, g in enumerate(gold)))


def translate_ids(
    model: Seq2SeqTransformer, vocab: SubwordVocab, src_ids: Sequence[int], tgt_lang: str, cfg: DecodeConfig
) -> list[int]:
    ids, _ = beam_decode(model, list(src_ids) + [vocab.lid(tgt_lang)], vocab, cfg)
    return ids


def translate(model, vocab: SubwordVocab, sentences: Iterable[str], tgt_lang: str, cfg: Optional[DecodeConfig] = None) -> list[str]:
    from .tokenizer import decode

    cfg = cfg or DecodeConfig()
    return [decode(translate_ids(model, vocab, encode(s, vocab).ids, tgt_lang, cfg), vocab) for s in sentences]


@torch.no_grad()
def teacher_forced_accuracy(model: Seq2SeqTransformer, examples: Sequence[NoisedExample], vocab: SubwordVocab, batch_size: int = 64) -> float:
    """Fraction of target positions (EOS included) whose argmax equals the gold token."""
    was_training = model.training
    model.eval()
    correct = total = 0
    for i in range(0, len(examples), batch_size):
        b = collate_seq2seq(examples[i : i + batch_size], vocab.pad_id, vocab.bos_id, vocab.eos_id)
        pred = model(b.src, b.tgt_in).argmax(-1)
        correct += int(((pred == b.tgt_out) & b.mask).sum())
        total += int(b.mask.sum())
    model.train(was_training)
    return correct / max(total, 1)


# ---------------------------------------------------------------- BLEU

_TOK_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(line: str) -> list[str]:
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = line.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    line = f" {line} "
    for pattern, repl in _TOK_RULES:
        line = pattern.sub(repl, line)
    return line.split()


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    brevity_penalty: float
    sys_len: int
    ref_len: int
    correct: list[int]
    total: list[int]

    def __str__(self):
        p = "/".join(f"{x:.1f}" for x in self.precisions)
        return (
            f"BLEU = {self.score:.2f} {p} (BP = {self.brevity_penalty:.3f} "
            f"ratio = {self.sys_len / max(self.ref_len, 1):.3f} hyp_len = {self.sys_len} ref_len = {self.ref_len})"
        )


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str], max_order: int = 4) -> BleuReport:
    """Case-sensitive corpus BLEU with 13a tokenization and exponential smoothing of zero counts."""
    if not references:
        raise ValueError("empty reference set")
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    correct = [0] * max_order
    total = [0] * max_order
    sys_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        ht, rt = tokenize_13a(h), tokenize_13a(r)
        sys_len += len(ht)
        ref_len += len(rt)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(ht) - n + 1, 0)

    bp = 1.0
    if sys_len < ref_len:
        bp = math.exp(1 - ref_len / sys_len) if sys_len > 0 else 0.0
    precisions = [0.0] * max_order
    if not any(correct):
        return BleuReport(0.0, precisions, bp, sys_len, ref_len, correct, total)
    smooth = 1.0
    for n in range(max_order):
        if total[n] == 0:
            break
        if correct[n] == 0:
            smooth *= 2
            precisions[n] = 100.0 / (smooth * total[n])
        else:
            precisions[n] = 100.0 * correct[n] / total[n]
    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        # geometric mean of fractions, so a perfect match scores exactly 100
        score = 100.0 * bp * math.exp(sum(math.log(p / 100.0) for p in precisions) / max_order)
    return BleuReport(score, precisions, bp, sys_len, ref_len, correct, total)


# ---------------------------------------------------------------- zero-shot language compliance

def language_partition(vocab: SubwordVocab, corpora: Mapping[str, Iterable[str]]) -> dict[str, set[int]]:
    """Token ids each language's text produces (specials excluded)."""
    parts = {}
    for lang, sentences in corpora.items():
        ids = set()
        for s in sentences:
            ids.update(encode(s, vocab).ids)
        parts[lang] = ids - vocab.special_ids
    return parts


def lid_compliance(hypotheses: Sequence[Sequence[int]], target_ids: set[int], vocab: Optional[SubwordVocab] = None) -> float:
    """Fraction of emitted content tokens (specials excluded) that belong to the target language."""
    skip = vocab.special_ids if vocab is not None else frozenset()
    hits = n = 0
    for hyp in hypotheses:
        for t in hyp:
            if t in skip:
                continue
            n += 1
            hits += t in target_ids
    return hits / n if n else 0.0

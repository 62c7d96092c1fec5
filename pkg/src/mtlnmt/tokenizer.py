"""Shared multilingual BPE vocabulary with reserved specials and word-span tracking.

Non-initial subwords carry a ``##`` prefix so word boundaries can be read back
from ids alone. A token string starts with ``##`` if and only if it continues
a word; merges that would break that rule are never learned.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK, MASK, BLANK = "[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]", "[BLANK]"
BASE_SPECIALS = (PAD, BOS, EOS, UNK, MASK, BLANK)
CONT = "##"
VOCAB_HEADER = "#mtlnmt-vocab v1"


def lid_token(lang: str) -> str:
    return f"[LID_{lang}]"


class VocabError(ValueError):
    pass


@dataclass
class TokenizedSentence:
    ids: list[int]
    # one (start, end) half-open range per whitespace word
    word_spans: list[tuple[int, int]]

    def words(self) -> list[list[int]]:
        return [self.ids[s:e] for s, e in self.word_spans]

    def __len__(self):
        return len(self.ids)


@dataclass
class SubwordVocab:
    tokens: list[str]
    merges: list[tuple[str, str]]
    languages: list[str]
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise VocabError("duplicate token in vocabulary")
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache: dict[str, list[str]] = {}
        self.pad_id = self.token_to_id[PAD]
        self.bos_id = self.token_to_id[BOS]
        self.eos_id = self.token_to_id[EOS]
        self.unk_id = self.token_to_id[UNK]
        self.mask_id = self.token_to_id[MASK]
        self.blank_id = self.token_to_id[BLANK]
        self.lid_ids = {lang: self.token_to_id[lid_token(lang)] for lang in self.languages}
        self.special_ids = frozenset(self.token_to_id[t] for t in self.specials)
        self._strip_ids = frozenset([self.pad_id, self.bos_id, self.eos_id, *self.lid_ids.values()])

    @property
    def specials(self) -> list[str]:
        return [*BASE_SPECIALS, *(lid_token(l) for l in self.languages)]

    def __len__(self):
        return len(self.tokens)

    def lid(self, lang: str) -> int:
        return self.lid_ids[lang]

    def is_continuation(self, token_id: int) -> bool:
        return self.tokens[token_id].startswith(CONT)

    def _segment(self, word: str) -> list[str]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = [word[0]] + [CONT + c for c in word[1:]]
        while len(symbols) > 1:
            best, best_rank = None, None
            for i in range(len(symbols) - 1):
                r = self._ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            pair = (symbols[best], symbols[best + 1])
            merged = _join(*pair)
            out, i = [], 0
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbols = out
        self._cache[word] = symbols
        return symbols

    def save(self, path) -> None:
        lines = [VOCAB_HEADER, "#languages " + " ".join(self.languages), f"#tokens {len(self.tokens)}"]
        lines += self.tokens
        lines.append(f"#merges {len(self.merges)}")
        lines += [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SubwordVocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if not lines or lines[0] != VOCAB_HEADER:
            raise VocabError(f"{path}: not a vocabulary file")
        languages = lines[1].split()[1:]
        n_tok = int(lines[2].split()[1])
        tokens = lines[3 : 3 + n_tok]
        n_merge = int(lines[3 + n_tok].split()[1])
        merges = [tuple(l.split(" ")) for l in lines[4 + n_tok : 4 + n_tok + n_merge]]
        return cls(tokens, merges, languages)


def _join(a: str, b: str) -> str:
    return a + b[len(CONT):]


def train_vocab(
    corpora: Iterable[str], size: int, languages: Sequence[str] = (), min_frequency: int = 2
) -> SubwordVocab:
    """Learn BPE merges over whitespace words until the vocabulary reaches ``size``.

    Every character seen gets both a word-initial and a ``##`` continuation
    token so any word over the training charset is encodable. Ties between
    equally frequent pairs break lexicographically.
    """
    word_freq: Counter = Counter()
    for line in corpora:
        word_freq.update(line.split())

    specials = [*BASE_SPECIALS, *(lid_token(l) for l in languages)]
    chars = sorted({c for w in word_freq for c in w})
    base = []
    for c in chars:
        base += [c, CONT + c]
    base = [t for t in base if t not in specials]
    if size < len(specials) + len(base):
        raise VocabError(
            f"vocab size {size} cannot hold {len(specials)} specials + {len(base)} base symbols"
        )
    tokens = specials + base
    reserved = set(specials)
    present = set(tokens)

    words = []
    freqs = []
    for w, f in sorted(word_freq.items()):
        words.append([w[0]] + [CONT + c for c in w[1:]])
        freqs.append(f)

    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, (syms, f) in enumerate(zip(words, freqs)):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += f
            where[pair].add(idx)

    merges: list[tuple[str, str]] = []
    banned: set[tuple[str, str]] = set()
    while len(tokens) < size:
        candidates = [(-c, p) for p, c in pair_counts.items() if c >= min_frequency and p not in banned]
        if not candidates:
            break
        _, best = min(candidates)
        merged = _join(*best)
        if merged in reserved or (not best[0].startswith(CONT) and merged.startswith(CONT)):
            banned.add(best)
            continue
        merges.append(best)
        if merged not in present:
            tokens.append(merged)
            present.add(merged)
        for idx in sorted(where.pop(best, ())):
            syms, f = words[idx], freqs[idx]
            for pair in zip(syms, syms[1:]):
                pair_counts[pair] -= f
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            out, i = [], 0
            while i < len(syms):
                if i < len(syms) - 1 and (syms[i], syms[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[idx] = out
            for pair in zip(out, out[1:]):
                pair_counts[pair] += f
                where[pair].add(idx)
    return SubwordVocab(tokens, merges, list(languages))


def encode(sentence: str, vocab: SubwordVocab) -> TokenizedSentence:
    ids: list[int] = []
    spans = []
    get = vocab.token_to_id.get
    for word in sentence.split():
        start = len(ids)
        ids.extend(get(t, vocab.unk_id) for t in vocab._segment(word))
        spans.append((start, len(ids)))
    return TokenizedSentence(ids, spans)


def decode(ids: Sequence[int], vocab: SubwordVocab) -> str:
    words: list[str] = []
    n = len(vocab.tokens)
    for i in ids:
        i = int(i)
        if i < 0 or i >= n:
            raise VocabError(f"token id {i} out of range for vocab of size {n}")
        if i in vocab._strip_ids:
            continue
        tok = vocab.tokens[i]
        if tok.startswith(CONT) and words:
            words[-1] += tok[len(CONT):]
        elif tok.startswith(CONT):
            words.append(tok[len(CONT):])
        else:
            words.append(tok)
    return " ".join(words)


def word_spans_from_ids(ids: Sequence[int], vocab: SubwordVocab) -> list[tuple[int, int]]:
    """Recover word spans from ids alone; specials are excluded from every span."""
    spans: list[tuple[int, int]] = []
    start = None
    for pos, i in enumerate(ids):
        if i in vocab.special_ids and i != vocab.unk_id:
            if start is not None:
                spans.append((start, pos))
                start = None
            continue
        if start is None or not vocab.is_continuation(i):
            if start is not None:
                spans.append((start, pos))
            start = pos
    if start is not None:
        spans.append((start, len(ids)))
    return spans

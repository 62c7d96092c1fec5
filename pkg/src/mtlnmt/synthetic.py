"""Toy languages with disjoint alphabets sharing one concept grammar.

Sentences are generated as concept structures (subject/object noun phrases,
a verb, an optional prepositional phrase) with class agreement between nouns,
adjectives and verbs, then realized in each language with its own lexicon and
word-order rules. Translation between any two languages is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .corpus import write_lines, write_manifest

# consonants / vowels per language; alphabets are pairwise disjoint
ALPHABETS = {
    "en": ("bcdfg", "ae"),
    "xa": ("hjklm", "io"),
    "xb": ("npqrs", "uy"),
    "xc": ("tvwxz", "ōū"),
}
N_CLASSES = 3
N_DET, N_ADJ, N_NOUN, N_VERB, N_PREP = 3, 12, 24, 12, 3


@dataclass(frozen=True)
class NP:
    det: int
    adj: Optional[int]
    noun: int


@dataclass(frozen=True)
class Clause:
    subj: NP
    verb: int
    obj: NP
    prep: Optional[int]
    pobj: Optional[NP]


def _lexicon(lang: str, n_words: int, seed: int) -> list[str]:
    cons, vows = ALPHABETS[lang]
    rng = np.random.default_rng([seed, sum(map(ord, lang))])
    syllables = [c + v for c in cons for v in vows]
    words: list[str] = []
    seen = set()
    while len(words) < n_words:
        n_syl = int(rng.integers(2, 4))
        w = "".join(syllables[int(i)] for i in rng.integers(len(syllables), size=n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class ToyLanguage:
    def __init__(self, code: str, seed: int = 0):
        self.code = code
        words = _lexicon(code, N_DET + N_ADJ + N_NOUN + N_VERB + N_PREP, seed)
        it = iter(words)
        self.det = [next(it) for _ in range(N_DET)]
        self.adj = [next(it) for _ in range(N_ADJ)]
        self.noun = [next(it) for _ in range(N_NOUN)]
        self.verb = [next(it) for _ in range(N_VERB)]
        self.prep = [next(it) for _ in range(N_PREP)]

    def np(self, x: NP) -> list[str]:
        adj = [self.adj[x.adj]] if x.adj is not None else []
        det, noun = [self.det[x.det]], [self.noun[x.noun]]
        if self.code == "en":
            return det + adj + noun
        if self.code == "xa":
            return det + noun + adj
        if self.code == "xb":
            return noun + adj + det
        return adj + noun + det

    def realize(self, c: Clause) -> str:
        s, o, v = self.np(c.subj), self.np(c.obj), [self.verb[c.verb]]
        pp = []
        if c.prep is not None:
            pobj = self.np(c.pobj)
            pp = [self.prep[c.prep]] + pobj if self.code in ("en", "xa") else pobj + [self.prep[c.prep]]
        if self.code == "en":
            return " ".join(s + v + o + pp)
        if self.code == "xa":
            return " ".join(s + o + v + pp)
        if self.code == "xb":
            return " ".join(v + s + o + pp)
        return " ".join(pp + s + o + v)


def sample_np(rng: np.random.Generator, cls: Optional[int] = None) -> NP:
    noun = int(rng.integers(N_NOUN)) if cls is None else int(cls + N_CLASSES * rng.integers(N_NOUN // N_CLASSES))
    c = noun % N_CLASSES
    adj = None
    if rng.random() < 0.6:
        adj = int(c + N_CLASSES * rng.integers(N_ADJ // N_CLASSES))
    return NP(int(rng.integers(N_DET)), adj, noun)


def sample_clause(rng: np.random.Generator) -> Clause:
    subj = sample_np(rng)
    c = subj.noun % N_CLASSES
    verb = int(c + N_CLASSES * rng.integers(N_VERB // N_CLASSES))
    # objects agree with the verb's class shifted by one
    obj = sample_np(rng, (verb + 1) % N_CLASSES)
    prep = pobj = None
    if rng.random() < 0.4:
        prep = int(rng.integers(N_PREP))
        pobj = sample_np(rng, prep % N_CLASSES)
    return Clause(subj, verb, obj, prep, pobj)


def sample_clauses(n: int, rng: np.random.Generator, exclude: frozenset = frozenset()) -> list[Clause]:
    out, seen = [], set(exclude)
    while len(out) < n:
        c = sample_clause(rng)
        if c in seen:
            continue
        seen.add(c)
        out.append(c)
    return out


@dataclass
class ToySetup:
    """Corpus-shape parameters of one synthetic experiment."""

    languages: tuple = ("en", "xa", "xb")
    direction: str = "x2en"
    # bitext sizes per non-English language (English-centric pairs)
    bitext: Optional[dict] = None
    mono: int = 500
    valid: int = 100
    seed: int = 0

    def sizes(self) -> dict:
        if self.bitext is not None:
            return dict(self.bitext)
        return {l: 200 for l in self.languages if l != "en"}


def build_toy_corpora(setup: ToySetup, out_dir) -> dict:
    """Write bitext, monolingual files and a manifest under ``out_dir``.

    Returns a dict with the manifest path, held-out validation pairs per
    training pair key, multi-way test clauses realized in every language,
    and each language's ``ToyLanguage``.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng([setup.seed, 7])
    langs = {code: ToyLanguage(code, setup.seed) for code in setup.languages}
    sizes = setup.sizes()
    test = sample_clauses(setup.valid, rng)
    used = frozenset(test)
    bitext_entries, valid = [], {}
    for x, n in sizes.items():
        clauses = sample_clauses(n, rng, used)
        used = used | frozenset(clauses)
        vclauses = sample_clauses(setup.valid, rng, used)
        used = used | frozenset(vclauses)
        xs = [langs[x].realize(c) for c in clauses]
        ens = [langs["en"].realize(c) for c in clauses]
        write_lines(out_dir / f"train.{x}-en.{x}", xs)
        write_lines(out_dir / f"train.{x}-en.en", ens)
        vx = [langs[x].realize(c) for c in vclauses]
        ve = [langs["en"].realize(c) for c in vclauses]
        pairs = []
        if setup.direction in ("x2en", "x2x"):
            pairs.append((x, "en"))
            valid[f"{x}-en"] = list(zip(vx, ve))
        if setup.direction in ("en2x", "x2x"):
            pairs.append(("en", x))
            valid[f"en-{x}"] = list(zip(ve, vx))
        for s, t in pairs:
            bitext_entries.append(
                {"src": s, "tgt": t, "src_file": f"train.{x}-en.{s}", "tgt_file": f"train.{x}-en.{t}"}
            )
    mono_entries = []
    for code, lang in langs.items():
        # independent draws: monolingual text shares no sentence with bitext or test
        clauses = sample_clauses(setup.mono, rng, used)
        used = used | frozenset(clauses)
        write_lines(out_dir / f"mono.{code}", [lang.realize(c) for c in clauses])
        mono_entries.append({"lang": code, "side": "both", "file": f"mono.{code}"})
    manifest = out_dir / "manifest.yaml"
    write_manifest(manifest, list(setup.languages), setup.direction, bitext_entries, mono_entries)
    return {
        "manifest": manifest,
        "valid": valid,
        "test": {code: [lang.realize(c) for c in test] for code, lang in langs.items()},
        "languages": langs,
    }

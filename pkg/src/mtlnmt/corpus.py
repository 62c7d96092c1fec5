"""Corpus manifests, bitext/monolingual loading and monolingual filtration."""

from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import yaml

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "mtlnmt-manifest/1"
DIRECTIONS = ("x2en", "en2x", "x2x")
SIDES = ("source", "target", "both")

_LANG_RE = re.compile(r"^[a-z][a-z0-9_]*$")


class CorpusError(ValueError):
    """Raised for any malformed manifest or corpus file."""


class AlignmentError(CorpusError):
    pass


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def pair_key(src: str, tgt: str) -> str:
    return f"{src}-{tgt}"


@dataclass
class FilterConfig:
    dedup: bool = True
    max_punct_frac: float = 0.5
    min_words: int = 1
    max_words: int = 250
    # Optional regex every character must match; None means "printable, non-control".
    allowed_chars: Optional[str] = None

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "FilterConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CorpusError(f"unknown filter keys: {sorted(unknown)}")
        return cls(**d)


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _chars_ok(text: str, allowed: Optional[re.Pattern]) -> bool:
    for ch in text:
        if ch == " ":
            continue
        if unicodedata.category(ch).startswith("C") or not ch.isprintable():
            return False
        if allowed is not None and not allowed.fullmatch(ch):
            return False
    return True


def filter_monolingual(sentences: Iterable[str], rules: Optional[FilterConfig] = None) -> list[str]:
    """Drop low-quality lines and return the whitespace-normalized survivors in input order.

    Rules: exact duplicates (after whitespace normalization), lines whose
    punctuation fraction over non-space characters exceeds ``max_punct_frac``,
    lines containing control/unprintable characters (or characters outside
    ``allowed_chars``), and lines with a word count outside
    ``[min_words, max_words]``.
    """
    rules = rules or FilterConfig()
    allowed = re.compile(rules.allowed_chars) if rules.allowed_chars else None
    seen = set()
    out = []
    for raw in sentences:
        line = normalize_ws(raw)
        if not line:
            continue
        n_words = line.count(" ") + 1
        if n_words < rules.min_words or n_words > rules.max_words:
            continue
        chars = line.replace(" ", "")
        if sum(map(_is_punct, chars)) / len(chars) > rules.max_punct_frac:
            continue
        if not _chars_ok(line, allowed):
            continue
        if rules.dedup:
            if line in seen:
                continue
            seen.add(line)
        out.append(line)
    return out


@dataclass
class BitextCorpus:
    src_lang: str
    tgt_lang: str
    pairs: list[tuple[str, str]]
    src_file: Optional[str] = None
    tgt_file: Optional[str] = None

    @property
    def key(self) -> str:
        return pair_key(self.src_lang, self.tgt_lang)

    @property
    def size(self) -> int:
        return len(self.pairs)


@dataclass
class MonoCorpus:
    lang: str
    side: str
    sentences: list[str]
    file: Optional[str] = None


@dataclass
class CorpusManifest:
    languages: list[str]
    direction: str
    bitext: list[BitextCorpus] = field(default_factory=list)
    mono: list[MonoCorpus] = field(default_factory=list)
    pivot: str = "en"
    filter: FilterConfig = field(default_factory=FilterConfig)
    path: Optional[str] = None

    def __post_init__(self):
        validate_manifest(self)

    def source_side_langs(self) -> list[str]:
        """Languages whose monolingual data feeds MLM under ``direction``."""
        others = [l for l in self.languages if l != self.pivot]
        if self.direction == "x2en":
            return others
        if self.direction == "en2x":
            return [self.pivot]
        return list(self.languages)

    def target_side_langs(self) -> list[str]:
        """Languages whose monolingual data feeds DAE under ``direction``."""
        others = [l for l in self.languages if l != self.pivot]
        if self.direction == "x2en":
            return [self.pivot]
        if self.direction == "en2x":
            return others
        return list(self.languages)

    def mlm_pools(self) -> dict[str, list[str]]:
        langs = set(self.source_side_langs())
        return _merge_pools(m for m in self.mono if m.lang in langs and m.side in ("source", "both"))

    def dae_pools(self) -> dict[str, list[str]]:
        langs = set(self.target_side_langs())
        return _merge_pools(m for m in self.mono if m.lang in langs and m.side in ("target", "both"))


def _merge_pools(corpora) -> dict[str, list[str]]:
    pools: dict[str, list[str]] = {}
    for m in corpora:
        pools.setdefault(m.lang, []).extend(m.sentences)
    return {k: v for k, v in pools.items() if v}


def validate_manifest(m: CorpusManifest) -> None:
    if m.direction not in DIRECTIONS:
        raise CorpusError(f"direction must be one of {DIRECTIONS}, got {m.direction!r}")
    if len(set(m.languages)) != len(m.languages):
        raise CorpusError(f"duplicate language codes in {m.languages}")
    for lang in m.languages:
        if not isinstance(lang, str) or not _LANG_RE.match(lang):
            raise CorpusError(f"bad language code {lang!r}")
    known = set(m.languages)
    # x2x does not need an English-centric pivot to route monolingual data
    if m.direction != "x2x" and m.pivot not in known:
        raise CorpusError(f"pivot language {m.pivot!r} not in languages")
    seen = set()
    for b in m.bitext:
        for lang in (b.src_lang, b.tgt_lang):
            if lang not in known:
                raise CorpusError(f"bitext {b.key} uses unknown language {lang!r}")
        if b.key in seen:
            raise CorpusError(f"duplicate bitext pair {b.key}")
        seen.add(b.key)
    for mono in m.mono:
        if mono.lang not in known:
            raise CorpusError(f"monolingual corpus uses unknown language {mono.lang!r}")
        if mono.side not in SIDES:
            raise CorpusError(f"mono side must be one of {SIDES}, got {mono.side!r}")


def read_lines(path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"missing file: {path}")
    with open(path, encoding="utf-8-sig", newline="\n") as f:
        return [line.rstrip("\r\n") for line in f]


def read_bitext(src_path: Path, tgt_path: Path) -> list[tuple[str, str]]:
    src = read_lines(src_path)
    tgt = read_lines(tgt_path)
    if len(src) != len(tgt):
        raise AlignmentError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    pairs = []
    for s, t in zip(src, tgt):
        s, t = normalize_ws(s), normalize_ws(t)
        if s and t:
            pairs.append((s, t))
    dropped = len(src) - len(pairs)
    if dropped:
        logger.info("dropped %d pairs with an empty side from %s", dropped, src_path)
    return pairs


def load_manifest(path) -> CorpusManifest:
    """Load a YAML/JSON manifest and every corpus it references.

    Relative file paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"missing manifest: {path}")
    with open(path, encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    fmt = raw.get("format")
    if fmt != MANIFEST_FORMAT:
        raise CorpusError(f"unsupported manifest format {fmt!r}, expected {MANIFEST_FORMAT!r}")
    base = path.parent
    for key in ("languages", "direction"):
        if key not in raw:
            raise CorpusError(f"manifest missing key {key!r}")
    languages = list(raw["languages"])
    known = set(languages)
    rules = FilterConfig.from_dict(raw.get("filter"))

    bitext = []
    for entry in raw.get("bitext") or []:
        try:
            src, tgt = entry["src"], entry["tgt"]
            src_file, tgt_file = entry["src_file"], entry["tgt_file"]
        except KeyError as e:
            raise CorpusError(f"bitext entry missing key {e}") from None
        if src not in known or tgt not in known:
            raise CorpusError(f"bitext pair {pair_key(src, tgt)} uses a language not in {languages}")
        pairs = read_bitext(base / src_file, base / tgt_file)
        bitext.append(BitextCorpus(src, tgt, pairs, str(src_file), str(tgt_file)))

    mono = []
    for entry in raw.get("mono") or []:
        try:
            lang, side, file = entry["lang"], entry.get("side", "both"), entry["file"]
        except KeyError as e:
            raise CorpusError(f"mono entry missing key {e}") from None
        sentences = filter_monolingual(read_lines(base / file), rules)
        mono.append(MonoCorpus(lang, side, sentences, str(file)))

    return CorpusManifest(
        languages=languages,
        direction=raw["direction"],
        bitext=bitext,
        mono=mono,
        pivot=raw.get("pivot", "en"),
        filter=rules,
        path=str(path),
    )


def corpus_sizes(manifest: CorpusManifest) -> dict[str, int]:
    return {b.key: b.size for b in manifest.bitext}


def write_lines(path, lines: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def write_manifest(path, languages, direction, bitext, mono, pivot="en", filter=None) -> None:
    """Write a manifest file; ``bitext``/``mono`` are lists of plain dicts in the file schema."""
    doc = {
        "format": MANIFEST_FORMAT,
        "languages": list(languages),
        "direction": direction,
        "pivot": pivot,
        "bitext": list(bitext),
        "mono": list(mono),
    }
    if filter:
        doc["filter"] = dict(filter)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(doc, f, sort_keys=False)

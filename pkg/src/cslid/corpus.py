"""Utterance manifests, silver code-mix synthesis, up-sampling and phoneme tokenization."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import LANGUAGES
from .errors import ConfigError, IntegrityError, ManifestError

ZH_SUFFIX = "_cn"
BLANK = "<blank>"
UNK = "<unk>"
# Mandarin strings longer than this are segmented before lexicon lookup
SEGMENT_MIN_CHARS = 4

_FIELDS = ("id", "audio_path", "offset_s", "duration_s", "language", "transcript", "corpus_tag")


@dataclass(frozen=True)
class Utterance:
    id: str
    audio_path: str
    offset_s: float
    duration_s: float
    language: str
    transcript: tuple[str, ...] = ()
    corpus_tag: str = ""

    def __post_init__(self):
        if self.language not in LANGUAGES:
            raise ValueError(f"language must be one of {LANGUAGES}, got {self.language!r}")
        if not self.duration_s > 0:
            raise ValueError(f"duration must be positive, got {self.duration_s}")
        object.__setattr__(self, "transcript", tuple(self.transcript))

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "audio_path": self.audio_path,
            "offset_s": self.offset_s,
            "duration_s": self.duration_s,
            "language": self.language,
            "transcript": list(self.transcript),
            "corpus_tag": self.corpus_tag,
        }


@dataclass(frozen=True)
class Manifest:
    entries: tuple[Utterance, ...] = ()
    provenance: str = ""

    def __post_init__(self):
        entries = tuple(self.entries)
        seen = set()
        for u in entries:
            if u.id in seen:
                raise IntegrityError(f"duplicate utterance id {u.id!r}")
            seen.add(u.id)
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def total_duration_s(self) -> float:
        return math.fsum(u.duration_s for u in self.entries)

    def duration_s(self, language: str | None = None) -> float:
        return math.fsum(u.duration_s for u in self.entries if language is None or u.language == language)

    def filter(self, language: str) -> "Manifest":
        return Manifest(tuple(u for u in self.entries if u.language == language), self.provenance)

    def counts(self) -> dict[str, int]:
        return {lang: sum(1 for u in self.entries if u.language == lang) for lang in LANGUAGES}

    def __add__(self, other: "Manifest") -> "Manifest":
        return Manifest(self.entries + other.entries, f"{self.provenance}+{other.provenance}".strip("+"))


# ---------------------------------------------------------------------------
# manifest files
# ---------------------------------------------------------------------------

_TAG_COLON = re.compile(r"<[A-Za-z_]+:([^>]*)>")
_TAG_PLAIN = re.compile(r"</?[A-Za-z_]+>")
_TAG_BRACKET = re.compile(r"[\[(]([^\])]*)[\])]")


def strip_special_tags(token: str) -> str:
    """Remove corpus markup but keep the wrapped content.

    ``<mandarin:你好>`` becomes ``你好``; ``<cs>word</cs>`` becomes ``word``;
    ``[word]`` and ``(word)`` become ``word``.
    """
    token = _TAG_COLON.sub(r"\1", token)
    token = _TAG_PLAIN.sub("", token)
    return _TAG_BRACKET.sub(r"\1", token)


def _parse_record(obj, line: int, strip_tags: bool) -> Utterance:
    if not isinstance(obj, dict):
        raise ManifestError("record is not an object", line)
    missing = [k for k in _FIELDS if k not in obj]
    if missing:
        raise ManifestError(f"missing field(s) {', '.join(missing)}", line)
    unknown = sorted(set(obj) - set(_FIELDS))
    if unknown:
        raise ManifestError(f"unknown field(s) {', '.join(unknown)}", line)
    transcript = obj["transcript"]
    if not isinstance(transcript, list) or not all(isinstance(w, str) for w in transcript):
        raise ManifestError("transcript must be an array of strings", line)
    if strip_tags:
        transcript = [t for t in (strip_special_tags(w) for w in transcript) if t]
    for key in ("offset_s", "duration_s"):
        if isinstance(obj[key], bool) or not isinstance(obj[key], (int, float)):
            raise ManifestError(f"{key} must be a number", line)
    for key in ("id", "audio_path", "language", "corpus_tag"):
        if not isinstance(obj[key], str):
            raise ManifestError(f"{key} must be a string", line)
    try:
        return Utterance(
            id=obj["id"],
            audio_path=obj["audio_path"],
            offset_s=float(obj["offset_s"]),
            duration_s=float(obj["duration_s"]),
            language=obj["language"],
            transcript=tuple(transcript),
            corpus_tag=obj["corpus_tag"],
        )
    except ValueError as exc:
        raise ManifestError(str(exc), line) from None


def load_manifest(path, strip_tags: bool = False) -> Manifest:
    """Read a JSON-lines manifest.

    With ``strip_tags`` the transcript tokens go through
    :func:`strip_special_tags` (used for corpora with inline language markup).
    Blank lines are skipped.
    """
    entries = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
            utt = _parse_record(obj, lineno, strip_tags)
            if utt.id in seen:
                raise IntegrityError(f"line {lineno}: duplicate id {utt.id!r} (first on line {seen[utt.id]})")
            seen[utt.id] = lineno
            entries.append(utt)
    return Manifest(tuple(entries), provenance=str(path))


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u in manifest.entries:
            fh.write(json.dumps(u.to_record(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# manifest transforms
# ---------------------------------------------------------------------------


def synthesize_codemix(
    en_manifest: Manifest,
    zh_manifest: Manifest,
    seg_len_s: tuple[float, float] = (1.0, 5.0),
    rng: np.random.Generator | None = None,
    balance: bool = True,
) -> Manifest:
    """Cut monolingual utterances into sub-utterance segments and interleave them.

    Segment lengths are uniform in ``seg_len_s``; a final remainder is kept if
    it is at least the minimum length.  Segments are drawn alternately from
    whichever language has less accumulated duration.  With ``balance`` the
    larger language stops as soon as it has caught up with the exhausted one,
    so the two totals differ by at most one segment; without it every segment
    is emitted.  Transcripts are dropped.
    """
    if not len(en_manifest) or not len(zh_manifest):
        raise ValueError("both monolingual manifests must be non-empty")
    lo, hi = float(seg_len_s[0]), float(seg_len_s[1])
    if not 0 < lo <= hi:
        raise ValueError(f"segment range must satisfy 0 < min <= max, got {seg_len_s}")
    rng = rng if rng is not None else np.random.default_rng(0)

    def cut(manifest: Manifest) -> list[Utterance]:
        segs = []
        for u in manifest.entries:
            pos, k = 0.0, 0
            while True:
                length = lo if lo == hi else float(rng.uniform(lo, hi))
                if pos + length <= u.duration_s + 1e-9:
                    seg = length
                else:
                    seg = u.duration_s - pos
                    if seg < lo - 1e-9:
                        break
                segs.append(
                    Utterance(
                        id=f"{u.id}__seg{k:03d}",
                        audio_path=u.audio_path,
                        offset_s=u.offset_s + pos,
                        duration_s=seg,
                        language=u.language,
                        corpus_tag=u.corpus_tag,
                    )
                )
                pos += seg
                k += 1
                if u.duration_s - pos < 1e-9:
                    break
        order = rng.permutation(len(segs))
        return [segs[i] for i in order]

    pools = {"en": cut(en_manifest), "zh": cut(zh_manifest)}
    taken = {"en": 0, "zh": 0}
    total = {"en": 0.0, "zh": 0.0}
    out: list[Utterance] = []
    while True:
        lang = "en" if total["en"] <= total["zh"] else "zh"
        other = "zh" if lang == "en" else "en"
        if taken[lang] >= len(pools[lang]):
            if balance:
                break
            lang, other = other, lang
            if taken[lang] >= len(pools[lang]):
                break
        seg = pools[lang][taken[lang]]
        taken[lang] += 1
        total[lang] += seg.duration_s
        out.append(seg)
    note = "balanced" if balance else "unbalanced"
    return Manifest(tuple(out), provenance=f"silver code-mix ({note}) seg={lo}-{hi}s")


def upsample_class(manifest: Manifest, language: str, factor: int) -> Manifest:
    """Repeat every ``language`` utterance ``factor`` times; copies get ``~upK`` id suffixes."""
    if language not in LANGUAGES:
        raise ValueError(f"unknown language {language!r}")
    if isinstance(factor, bool) or int(factor) != factor or factor < 1:
        raise ValueError(f"up-sampling factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return manifest
    out = []
    for u in manifest.entries:
        out.append(u)
        if u.language == language:
            out.extend(replace(u, id=f"{u.id}~up{k}") for k in range(1, factor))
    return Manifest(tuple(out), provenance=f"{manifest.provenance} | {language}x{factor}")


def speed_perturb_manifest(manifest: Manifest, factors: Sequence[float] = (0.9, 1.1)) -> Manifest:
    """Add speed-perturbed copies of every utterance.

    Copies carry an ``sp<factor>_`` id prefix (read back by
    :func:`speed_factor_of`) and a duration scaled by ``1/factor``; offsets
    still refer to the unperturbed source audio.
    """
    out = list(manifest.entries)
    for f in factors:
        if f == 1.0:
            continue
        out.extend(replace(u, id=f"sp{f:g}_{u.id}", duration_s=u.duration_s / f) for u in manifest.entries)
    return Manifest(tuple(out), provenance=f"{manifest.provenance} | speed{tuple(factors)}")


_SP_PREFIX = re.compile(r"^sp(\d+(?:\.\d+)?)_")


def speed_factor_of(utt: Utterance) -> float:
    m = _SP_PREFIX.match(utt.id)
    return float(m.group(1)) if m else 1.0


def split_holdout(manifest: Manifest, fraction: float, rng: np.random.Generator) -> tuple[Manifest, Manifest]:
    """Seeded per-language split; returns (train, held_out) with at least one held-out item per present language."""
    held: set[str] = set()
    for lang in LANGUAGES:
        ids = [u.id for u in manifest.entries if u.language == lang]
        if len(ids) < 2:
            continue
        n = min(len(ids) - 1, max(1, int(round(fraction * len(ids)))))
        for i in rng.permutation(len(ids))[:n]:
            held.add(ids[i])
    train = tuple(u for u in manifest.entries if u.id not in held)
    dev = tuple(u for u in manifest.entries if u.id in held)
    return Manifest(train, manifest.provenance + " | train"), Manifest(dev, manifest.provenance + " | heldout")


# ---------------------------------------------------------------------------
# lexicon and tokenization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LexiconEntry:
    word: str
    phonemes: tuple[str, ...]
    language: str

    def __post_init__(self):
        if not self.phonemes:
            raise ValueError(f"lexicon entry {self.word!r} has no phonemes")
        phones = tuple(self.phonemes)
        if self.language == "zh":
            phones = tuple(p if p.endswith(ZH_SUFFIX) else p + ZH_SUFFIX for p in phones)
        object.__setattr__(self, "phonemes", phones)


@dataclass(frozen=True)
class Lexicon:
    language: str
    entries: dict = field(default_factory=dict)  # word -> LexiconEntry

    def __len__(self):
        return len(self.entries)

    def __contains__(self, word):
        return word in self.entries

    def __getitem__(self, word) -> LexiconEntry:
        return self.entries[word]

    @property
    def phonemes(self) -> set[str]:
        return {p for e in self.entries.values() for p in e.phonemes}

    @property
    def max_word_len(self) -> int:
        return max((len(w) for w in self.entries), default=0)


def load_lexicon(path, language: str) -> Lexicon:
    """Read ``word<TAB>ph ph ...`` lines; Mandarin phonemes get the ``_cn`` suffix."""
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise ManifestError("expected word<TAB>phonemes", lineno)
            word, phones = line.split("\t", 1)
            try:
                entries[word] = LexiconEntry(word, tuple(phones.split()), language)
            except ValueError as exc:
                raise ManifestError(str(exc), lineno) from None
    return Lexicon(language, entries)


def save_lexicon(lexicon: Lexicon, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for word in sorted(lexicon.entries):
            phones = lexicon.entries[word].phonemes
            if lexicon.language == "zh":
                phones = tuple(p[: -len(ZH_SUFFIX)] for p in phones)
            fh.write(f"{word}\t{' '.join(phones)}\n")


def make_lexicon(language: str, mapping: dict[str, Sequence[str]]) -> Lexicon:
    return Lexicon(language, {w: LexiconEntry(w, tuple(p), language) for w, p in mapping.items()})


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.symbols)

    def __len__(self):
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        return self._lookup.get(symbol, self._lookup[UNK])

    @property
    def _lookup(self) -> dict[str, int]:
        cached = self.__dict__.get("_cache")
        if cached is None:
            cached = {s: i for i, s in enumerate(self.symbols)}
            object.__setattr__(self, "_cache", cached)
        return cached


def build_vocab(lexicons: Iterable[Lexicon]) -> Vocabulary:
    """Blank at index 0, UNK at 1, then every phoneme in sorted order."""
    lexicons = list(lexicons)
    if not lexicons or not any(len(lx) for lx in lexicons):
        raise ConfigError("cannot build a vocabulary from an empty lexicon set")
    phones = sorted(set().union(*(lx.phonemes for lx in lexicons)))
    return Vocabulary((BLANK, UNK, *phones))


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    vocab_size: int

    def __len__(self):
        return len(self.tokens)


def segment_longest_match(text: str, lexicon: Lexicon) -> list[str]:
    """Greedy forward maximum matching; characters with no match become single-char pieces."""
    longest = max(lexicon.max_word_len, 1)
    out, i = [], 0
    while i < len(text):
        for j in range(min(len(text), i + longest), i, -1):
            if text[i:j] in lexicon:
                out.append(text[i:j])
                i = j
                break
        else:
            out.append(text[i])
            i += 1
    return out


def tokenize_transcript(
    words: Sequence[str], lexicons: dict[str, Lexicon], language: str, vocab: Vocabulary
) -> TokenSequence:
    """Map words to vocabulary indices through the pronunciation lexicons.

    English words are looked up directly.  Mandarin strings longer than four
    characters are first segmented by longest match against the Mandarin
    lexicon.  Anything not in a lexicon becomes UNK.  A Mandarin transcript may
    contain English words (code-switched corpora); those fall through to the
    English lexicon.
    """
    if language not in LANGUAGES:
        raise ValueError(f"unknown language {language!r}")
    zh = lexicons.get("zh")
    en = lexicons.get("en")
    unk = vocab.index(UNK)
    tokens: list[int] = []
    for word in words:
        pieces = [word]
        if zh is not None and len(word) > SEGMENT_MIN_CHARS and word not in zh:
            pieces = segment_longest_match(word, zh)
        for piece in pieces:
            entry = None
            preferred = (zh, en) if language == "zh" else (en, zh)
            for lex in preferred:
                if lex is not None and piece in lex:
                    entry = lex[piece]
                    break
            if entry is None:
                tokens.append(unk)
            else:
                tokens.extend(vocab.index(p) for p in entry.phonemes)
    return TokenSequence(tuple(tokens), vocab.size)

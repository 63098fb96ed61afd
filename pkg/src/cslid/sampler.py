"""Batch construction and the gradual fine-tuning schedule.

Batches are sized by total audio duration rather than utterance count.  All
streams are materialized eagerly from ``(manifest, rng)`` so that iterating
twice yields the same sequence.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from . import LANGUAGES
from .corpus import Manifest, Utterance, upsample_class
from .errors import ScheduleError

HOUR = 3600.0
# in-domain zh:en is rebalanced against an out-of-domain pool sampled at this zh:en ratio
SEAME_ZH_EN_RATIO = 2.0
DEFAULT_MAX_BATCH_DURATION_S = 120.0


class SamplingCapWarning(UserWarning):
    pass


class UnbalancedStreamWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    zh_hours: float
    en_hours: float

    @property
    def total_hours(self) -> float:
        return self.zh_hours + self.en_hours

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "CorpusStats":
        return cls(manifest.duration_s("zh") / HOUR, manifest.duration_s("en") / HOUR)


@dataclass(frozen=True)
class ScheduleStage:
    stage_index: int
    merlion_upsample_zh: int
    seame_fraction: float
    target_ood_id_ratio: float
    epochs: int
    merlion_zh_h: float
    merlion_en_h: float
    seame_zh_h: float
    seame_en_h: float

    @property
    def merlion_total_h(self) -> float:
        return self.merlion_zh_h + self.merlion_en_h

    @property
    def seame_total_h(self) -> float:
        return self.seame_zh_h + self.seame_en_h

    @property
    def total_zh_h(self) -> float:
        return self.merlion_zh_h + self.seame_zh_h

    @property
    def total_en_h(self) -> float:
        return self.merlion_en_h + self.seame_en_h

    @property
    def total_h(self) -> float:
        return self.total_zh_h + self.total_en_h

    def as_row(self) -> dict:
        def ratio(a, b):
            return a / b if b > 0 else None

        return {
            "stage": self.stage_index,
            "upsample_zh": self.merlion_upsample_zh,
            "merlion_zh_h": self.merlion_zh_h,
            "merlion_en_h": self.merlion_en_h,
            "merlion_total_h": self.merlion_total_h,
            "merlion_zh_en": ratio(self.merlion_zh_h, self.merlion_en_h),
            "seame_zh_h": self.seame_zh_h,
            "seame_en_h": self.seame_en_h,
            "seame_total_h": self.seame_total_h,
            "seame_zh_en": ratio(self.seame_zh_h, self.seame_en_h),
            "total_zh_h": self.total_zh_h,
            "total_en_h": self.total_en_h,
            "total_h": self.total_h,
            "s_over_m": ratio(self.seame_total_h, self.merlion_total_h),
            "zh_en": ratio(self.total_zh_h, self.total_en_h),
            "epochs": self.epochs,
        }


def _broadcast(values, n: int, name: str) -> list:
    if isinstance(values, (int, float)):
        return [values] * n
    values = list(values)
    if len(values) == 1:
        return values * n
    if len(values) != n:
        raise ScheduleError(f"{name} has {len(values)} entries but the schedule has {n} stages")
    return values


def build_gft_schedule(
    merlion_stats: CorpusStats,
    seame_stats: CorpusStats,
    ratios: Sequence[float],
    upsample_factors: int | Sequence[int] = 1,
    epochs: int | Sequence[int] = 1,
) -> list[ScheduleStage]:
    """Plan the stages of gradual fine-tuning.

    Stage ``k`` up-samples in-domain zh by ``upsample_factors[k]`` and draws
    ``ratios[k]`` times the up-sampled in-domain duration from the
    out-of-domain pool at zh:en = 2.  Ratios must be non-increasing and end at 0.
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ScheduleError("schedule needs at least one stage")
    if any(r < 0 or not math.isfinite(r) for r in ratios):
        raise ScheduleError(f"ratios must be finite and non-negative, got {ratios}")
    for k in range(1, len(ratios)):
        if ratios[k] > ratios[k - 1]:
            raise ScheduleError(f"ratio increases from {ratios[k - 1]} to {ratios[k]} at stage {k + 1}")
    if ratios[-1] != 0:
        raise ScheduleError(f"final stage must be in-domain only (ratio 0), got {ratios[-1]}")
    factors = _broadcast(upsample_factors, len(ratios), "upsample_factors")
    epoch_list = _broadcast(epochs, len(ratios), "epochs")
    pool = seame_stats.total_hours
    stages = []
    for k, (ratio, factor, ep) in enumerate(zip(ratios, factors, epoch_list), start=1):
        if int(factor) != factor or factor < 1:
            raise ScheduleError(f"stage {k}: up-sampling factor must be a positive integer, got {factor}")
        if int(ep) != ep or ep < 1:
            raise ScheduleError(f"stage {k}: epochs must be a positive integer, got {ep}")
        m_zh = merlion_stats.zh_hours * factor
        m_en = merlion_stats.en_hours
        s_total = ratio * (m_zh + m_en)
        s_zh = s_total * SEAME_ZH_EN_RATIO / (1.0 + SEAME_ZH_EN_RATIO)
        stages.append(
            ScheduleStage(
                stage_index=k,
                merlion_upsample_zh=int(factor),
                seame_fraction=min(1.0, s_total / pool) if pool > 0 else 0.0,
                target_ood_id_ratio=ratio,
                epochs=int(ep),
                merlion_zh_h=m_zh,
                merlion_en_h=m_en,
                seame_zh_h=s_zh,
                seame_en_h=s_total - s_zh,
            )
        )
    return stages


# The four-stage up-sampled schedule.  In-domain base durations are chosen so
# that x1/x2/x3 zh and their totals all round to the published row values;
# each out-of-domain ratio is the published out-of-domain total divided by the
# up-sampled in-domain total of the same stage.
TABLE1_MERLION = CorpusStats(zh_hours=5.36, en_hours=21.64)
TABLE1_SEAME_POOL = CorpusStats(zh_hours=200.0 / 3.0, en_hours=100.0 / 3.0)
TABLE1_UPSAMPLE = (1, 2, 2, 3)
_TABLE1_SEAME_TOTALS = (26.8, 16.1, 6.7, 0.0)
TABLE1_RATIOS = tuple(
    s / (TABLE1_MERLION.zh_hours * f + TABLE1_MERLION.en_hours)
    for s, f in zip(_TABLE1_SEAME_TOTALS, TABLE1_UPSAMPLE)
)
# out-of-domain : in-domain ratios used with the five-epoch schedule
FIVE_STAGE_RATIOS = (3.0, 2.0, 1.0, 0.5, 0.0)


def table1_schedule(epochs: int | Sequence[int] = 1) -> list[ScheduleStage]:
    return build_gft_schedule(TABLE1_MERLION, TABLE1_SEAME_POOL, TABLE1_RATIOS, TABLE1_UPSAMPLE, epochs)


def format_schedule(stages: Sequence[ScheduleStage]) -> str:
    """Render stages as a fixed-width table (hours to 0.1, zh/en totals to 0.01)."""

    def fmt(v, nd):
        return "-" if v is None else f"{v:.{nd}f}"

    header = (
        f"{'stage':>5} | {'M zh':>10} {'M en':>6} {'M tot':>6} {'zh/en':>5} | "
        f"{'S zh':>6} {'S en':>6} {'S tot':>6} {'zh/en':>5} | "
        f"{'zh':>6} {'en':>6} {'total':>6} | {'S/M':>4} {'zh/en':>5}"
    )
    lines = [header, "-" * len(header)]
    for st in stages:
        r = st.as_row()
        mzh = f"{r['merlion_zh_h']:.1f} ({r['upsample_zh']})"
        seame_ratio = r["seame_zh_en"] if r["seame_total_h"] > 0 else None
        lines.append(
            f"{r['stage']:>5} | {mzh:>10} {r['merlion_en_h']:>6.1f} {r['merlion_total_h']:>6.1f} "
            f"{fmt(r['merlion_zh_en'], 1):>5} | "
            f"{r['seame_zh_h']:>6.1f} {r['seame_en_h']:>6.1f} {r['seame_total_h']:>6.1f} "
            f"{fmt(seame_ratio, 1):>5} | "
            f"{r['total_zh_h']:>6.1f} {r['total_en_h']:>6.1f} {r['total_h']:>6.1f} | "
            f"{fmt(r['s_over_m'], 1):>4} {fmt(r['zh_en'], 2):>5}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# batch streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CutBatch:
    utterances: tuple[Utterance, ...]

    @property
    def total_duration_s(self) -> float:
        return math.fsum(u.duration_s for u in self.utterances)

    @property
    def labels(self) -> list[str]:
        return [u.language for u in self.utterances]

    def __len__(self):
        return len(self.utterances)


class BatchStream:
    """A replayable sequence of :class:`CutBatch`.

    ``unbalanced`` is set when language balancing was requested but could not
    be honoured (only one language present).
    """

    def __init__(self, batches: Sequence[CutBatch], unbalanced: bool = False):
        self.batches = list(batches)
        self.unbalanced = unbalanced

    def __iter__(self) -> Iterator[CutBatch]:
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)

    def utterances(self) -> list[Utterance]:
        return [u for b in self.batches for u in b.utterances]


def _pack(utts: Sequence[Utterance], max_batch_duration_s: float) -> list[CutBatch]:
    batches, current, total = [], [], 0.0
    for u in utts:
        if current and total + u.duration_s > max_batch_duration_s:
            batches.append(CutBatch(tuple(current)))
            current, total = [], 0.0
        current.append(u)
        total += u.duration_s
    if current:
        batches.append(CutBatch(tuple(current)))
    return batches


def _shuffled(utts: Sequence[Utterance], rng: np.random.Generator) -> list[Utterance]:
    return [utts[i] for i in rng.permutation(len(utts))]


def duration_batches(
    manifest: Manifest, max_batch_duration_s: float, rng: np.random.Generator, shuffle: bool = True
) -> BatchStream:
    """Plain duration-capped batches over the whole manifest."""
    utts = list(manifest.entries)
    if shuffle:
        utts = _shuffled(utts, rng)
    return BatchStream(_pack(utts, max_batch_duration_s))


def balanced_language_batches(
    manifest: Manifest, max_batch_duration_s: float, rng: np.random.Generator
) -> BatchStream:
    """Alternate en/zh utterances so every batch is balanced to within one utterance.

    The epoch ends when the smaller language pool runs out.  A single-language
    manifest falls back to :func:`duration_batches` and flags the stream.
    """
    pools = {lang: _shuffled([u for u in manifest.entries if u.language == lang], rng) for lang in LANGUAGES}
    if not all(pools.values()):
        warnings.warn("manifest has a single language; batches are not language-balanced", UnbalancedStreamWarning)
        stream = duration_batches(manifest, max_batch_duration_s, rng)
        stream.unbalanced = True
        return stream
    n = min(len(p) for p in pools.values())
    order = [pools[lang][i] for i in range(n) for lang in LANGUAGES]
    return BatchStream(_pack(order, max_batch_duration_s))


def duration_balanced_draws(a: Manifest, b: Manifest, rng: np.random.Generator) -> list[tuple[int, Utterance]]:
    """Draw from whichever source has less cumulative duration until one is exhausted.

    Returns ``(source, utterance)`` pairs with source 0 for ``a`` and 1 for ``b``.
    """
    if not len(a) or not len(b):
        raise ValueError("both manifests must be non-empty")
    pools = (_shuffled(list(a.entries), rng), _shuffled(list(b.entries), rng))
    taken = [0, 0]
    cum = [0.0, 0.0]
    out = []
    while True:
        src = 0 if cum[0] <= cum[1] else 1
        if taken[src] >= len(pools[src]):
            break
        u = pools[src][taken[src]]
        taken[src] += 1
        cum[src] += u.duration_s
        out.append((src, u))
    return out


def duration_balanced_mix(
    a: Manifest,
    b: Manifest,
    rng: np.random.Generator,
    max_batch_duration_s: float = DEFAULT_MAX_BATCH_DURATION_S,
) -> BatchStream:
    draws = duration_balanced_draws(a, b, rng)
    return BatchStream(_pack([u for _, u in draws], max_batch_duration_s))


def _take_duration(pool: list[Utterance], target_s: float) -> tuple[list[Utterance], bool]:
    """Greedy prefix of ``pool`` whose duration lands within half an utterance of ``target_s``."""
    out, total = [], 0.0
    for u in pool:
        if total + u.duration_s / 2.0 > target_s:
            return out, False
        out.append(u)
        total += u.duration_s
    return out, total + 1e-9 < target_s - (pool[-1].duration_s / 2.0 if pool else 0.0)


def realize_stage(stage: ScheduleStage, merlion: Manifest, seame: Manifest, rng: np.random.Generator) -> Manifest:
    """Materialize one schedule stage as a shuffled training manifest.

    The out-of-domain draw is sized against the realized (up-sampled)
    in-domain duration, not the planned hours.  If the pool cannot supply the
    target, everything available is used and a :class:`SamplingCapWarning`
    is issued; the returned provenance then contains ``capped``.
    """
    m = upsample_class(merlion, "zh", stage.merlion_upsample_zh)
    if stage.target_ood_id_ratio == 0:
        return Manifest(m.entries, provenance=f"stage {stage.stage_index}: in-domain only")
    s_total = stage.target_ood_id_ratio * m.total_duration_s
    targets = {"zh": s_total * SEAME_ZH_EN_RATIO / (1.0 + SEAME_ZH_EN_RATIO)}
    targets["en"] = s_total - targets["zh"]
    picked, capped = [], False
    for lang in LANGUAGES:
        pool = _shuffled([u for u in seame.entries if u.language == lang], rng)
        taken, short = _take_duration(pool, targets[lang])
        picked.extend(taken)
        capped = capped or short
    if capped:
        warnings.warn(
            f"stage {stage.stage_index}: out-of-domain pool too small for {s_total / HOUR:.2f} h; using what is available",
            SamplingCapWarning,
        )
    # the two corpora may reuse ids; keep the in-domain ones and tag the others
    taken_ids = {u.id for u in m.entries}
    picked = [u if u.id not in taken_ids else replace(u, id=f"ood~{u.id}") for u in picked]
    combined = list(m.entries) + picked
    note = " (capped)" if capped else ""
    return Manifest(tuple(_shuffled(combined, rng)), provenance=f"stage {stage.stage_index}{note}")

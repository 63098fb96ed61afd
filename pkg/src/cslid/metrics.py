"""Per-class recall, balanced accuracy and equal error rate.

Mandarin (``zh``) is the target class for EER: an English trial scoring at or
above the threshold is a false acceptance, a Mandarin trial below it a false
rejection.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import LANGUAGES
from .errors import UndefinedClassError


@dataclass(frozen=True)
class ScoredTrial:
    utterance_id: str
    true_language: str
    predicted_language: str
    zh_score: float

    def __post_init__(self):
        for lang in (self.true_language, self.predicted_language):
            if lang not in LANGUAGES:
                raise ValueError(f"unknown language {lang!r}")
        if not (np.isfinite(self.zh_score) and 0.0 <= self.zh_score <= 1.0):
            raise ValueError(f"zh_score must be in [0, 1], got {self.zh_score}")

    def to_record(self) -> dict:
        return {
            "id": self.utterance_id,
            "true": self.true_language,
            "predicted": self.predicted_language,
            "zh_score": self.zh_score,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ScoredTrial":
        return cls(rec["id"], rec["true"], rec["predicted"], float(rec["zh_score"]))


def confusion(trials: Sequence[ScoredTrial]) -> np.ndarray:
    """2x2 counts, rows = true language, columns = predicted, in (en, zh) order."""
    counts = np.zeros((2, 2), dtype=np.int64)
    index = {lang: i for i, lang in enumerate(LANGUAGES)}
    for t in trials:
        counts[index[t.true_language], index[t.predicted_language]] += 1
    return counts


def recalls(trials: Sequence[ScoredTrial]) -> dict[str, float]:
    counts = confusion(trials)
    out = {}
    for i, lang in enumerate(LANGUAGES):
        row = counts[i].sum()
        if row == 0:
            raise UndefinedClassError(f"no trials with true language {lang!r}; recall is undefined")
        out[lang] = counts[i, i] / row
    return out


def balanced_accuracy(trials: Sequence[ScoredTrial]) -> float:
    r = recalls(trials)
    return float(np.mean([r[lang] for lang in LANGUAGES]))


def _split_scores(trials: Sequence[ScoredTrial]) -> tuple[np.ndarray, np.ndarray]:
    en = np.array([t.zh_score for t in trials if t.true_language == "en"], dtype=np.float64)
    zh = np.array([t.zh_score for t in trials if t.true_language == "zh"], dtype=np.float64)
    if en.size == 0 or zh.size == 0:
        raise UndefinedClassError("EER needs trials from both languages")
    return en, zh


def error_rates(en_scores: np.ndarray, zh_scores: np.ndarray, thresholds: np.ndarray):
    """FAR and FRR at each threshold (accept when score >= threshold)."""
    en_sorted = np.sort(en_scores)
    zh_sorted = np.sort(zh_scores)
    far = (en_sorted.size - np.searchsorted(en_sorted, thresholds, side="left")) / en_sorted.size
    frr = np.searchsorted(zh_sorted, thresholds, side="left") / zh_sorted.size
    return far, frr


def equal_error_rate(trials: Sequence[ScoredTrial]) -> tuple[float, float]:
    """Return ``(eer, threshold)``.

    Thresholds sweep every distinct score plus +inf.  FAR falls and FRR rises
    along the sweep; at the first threshold where FAR <= FRR either the two
    are equal (exact crossing) or the crossing is interpolated linearly
    between that operating point and the previous one.  When the bracketing
    upper threshold is +inf the reported threshold is the last finite one.
    """
    en, zh = _split_scores(trials)
    thresholds = np.append(np.unique(np.concatenate([en, zh])), np.inf)
    far, frr = error_rates(en, zh, thresholds)
    gap = far - frr
    i = int(np.argmax(gap <= 0))
    if gap[i] == 0 or i == 0:
        return float(far[i]), float(thresholds[i])
    lam = gap[i - 1] / (gap[i - 1] - gap[i])
    eer = far[i - 1] + lam * (far[i] - far[i - 1])
    hi = thresholds[i] if np.isfinite(thresholds[i]) else thresholds[i - 1]
    thr = thresholds[i - 1] + lam * (hi - thresholds[i - 1])
    return float(eer), float(thr)


@dataclass(frozen=True)
class EvalReport:
    recall_en: float
    recall_zh: float
    balanced_accuracy: float
    eer: float
    eer_threshold: float
    confusion: tuple[tuple[int, int], tuple[int, int]]
    n_trials: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = [list(row) for row in self.confusion]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["confusion"] = tuple(tuple(int(v) for v in row) for row in d["confusion"])
        return cls(**d)

    def render(self) -> str:
        (ee, ez), (ze, zz) = self.confusion
        return (
            f"English {self.recall_en:.3f} | Mandarin {self.recall_zh:.3f} | "
            f"Balanced {self.balanced_accuracy:.3f} | EER {self.eer:.3f} | n={self.n_trials}\n"
            f"confusion (rows true en/zh): [[{ee}, {ez}], [{ze}, {zz}]]"
        )


def evaluate_trials(trials: Sequence[ScoredTrial]) -> EvalReport:
    r = recalls(trials)
    eer, thr = equal_error_rate(trials)
    counts = confusion(trials)
    return EvalReport(
        recall_en=float(r["en"]),
        recall_zh=float(r["zh"]),
        balanced_accuracy=float((r["en"] + r["zh"]) / 2.0),
        eer=eer,
        eer_threshold=thr,
        confusion=tuple(tuple(int(v) for v in row) for row in counts),
        n_trials=len(trials),
    )


def save_trials(trials: Iterable[ScoredTrial], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            fh.write(json.dumps(t.to_record(), ensure_ascii=False) + "\n")


def load_trials(path) -> list[ScoredTrial]:
    with open(path, encoding="utf-8") as fh:
        return [ScoredTrial.from_record(json.loads(line)) for line in fh if line.strip()]

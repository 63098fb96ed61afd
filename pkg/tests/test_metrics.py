import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cslid.errors import UndefinedClassError
from cslid.metrics import (
    EvalReport,
    ScoredTrial,
    balanced_accuracy,
    confusion,
    equal_error_rate,
    evaluate_trials,
    load_trials,
    recalls,
    save_trials,
)


def trials_from(en_scores, zh_scores, thr=0.5):
    out = []
    for i, s in enumerate(en_scores):
        out.append(ScoredTrial(f"e{i}", "en", "zh" if s >= thr else "en", float(s)))
    for i, s in enumerate(zh_scores):
        out.append(ScoredTrial(f"z{i}", "zh", "zh" if s >= thr else "en", float(s)))
    return out


def with_recalls(r_en, r_zh, n=1000):
    k_en, k_zh = int(round(r_en * n)), int(round(r_zh * n))
    out = [ScoredTrial(f"e{i}", "en", "en" if i < k_en else "zh", 0.0) for i in range(n)]
    out += [ScoredTrial(f"z{i}", "zh", "zh" if i < k_zh else "en", 1.0) for i in range(n)]
    return out


def brute_eer(en, zh):
    """Plain loop sweep; linear interpolation between neighbouring operating points."""
    thresholds = sorted(set(list(en) + list(zh))) + [float("inf")]
    points = []
    for t in thresholds:
        far = sum(1 for s in en if s >= t) / len(en)
        frr = sum(1 for s in zh if s < t) / len(zh)
        points.append((far, frr))
    for (far, frr) in points:
        if far == frr:
            return far, True
    for (f0, r0), (f1, r1) in zip(points, points[1:]):
        if f0 - r0 > 0 and f1 - r1 < 0:
            lam = (f0 - r0) / ((f0 - r0) - (f1 - r1))
            return f0 + lam * (f1 - f0), False
    raise AssertionError("no crossing")


def test_bac_published_rows():
    assert f"{balanced_accuracy(with_recalls(1.0, 0.0)):.3f}" == "0.500"
    assert f"{balanced_accuracy(with_recalls(0.851, 0.720)):.3f}" == "0.785"


def test_bac_duplication_invariant():
    rng = np.random.default_rng(0)
    base = trials_from(rng.uniform(size=30), rng.uniform(size=20))
    for k in (2, 5):
        dup = base + [ScoredTrial(t.utterance_id + f"_{j}", t.true_language, t.predicted_language, t.zh_score)
                      for t in base if t.true_language == "zh" for j in range(k - 1)]
        assert balanced_accuracy(dup) == pytest.approx(balanced_accuracy(base), abs=1e-15)


def test_undefined_class():
    only_en = trials_from([0.1, 0.2], [])
    with pytest.raises(UndefinedClassError):
        balanced_accuracy(only_en)
    with pytest.raises(UndefinedClassError):
        equal_error_rate(only_en)


def test_confusion_consistency():
    rng = np.random.default_rng(1)
    trials = trials_from(rng.uniform(size=40), rng.uniform(size=25))
    c = confusion(trials)
    assert c.sum() == len(trials)
    r = recalls(trials)
    assert r["en"] == c[0, 0] / c[0].sum() and r["zh"] == c[1, 1] / c[1].sum()
    perfect = trials_from([0.1, 0.2], [0.8, 0.9])
    assert confusion(perfect)[0, 1] == confusion(perfect)[1, 0] == 0


def test_eer_examples():
    assert equal_error_rate(trials_from([0.1, 0.2, 0.3], [0.7, 0.8]))[0] == 0.0
    same = [0.1, 0.4, 0.4, 0.9]
    assert equal_error_rate(trials_from(same, same))[0] == pytest.approx(0.5)
    eer, thr = equal_error_rate(trials_from([0.6, 0.3, 0.2], [0.9, 0.8, 0.4]))
    oracle, exact = brute_eer([0.6, 0.3, 0.2], [0.9, 0.8, 0.4])
    assert exact and eer == oracle == pytest.approx(1 / 3) and thr == 0.6


def test_eer_matches_sweep_oracle_random():
    rng = np.random.default_rng(7)
    n_exact = 0
    for trial in range(20):
        n_en = 500 if trial % 2 else int(rng.integers(300, 700))
        en = np.round(rng.beta(2, 4, n_en), 12 if trial % 2 else 3)  # equal class sizes without ties always cross exactly
        zh = np.round(rng.beta(4, 2, 1000 - n_en), 12 if trial % 2 else 3)
        eer, _ = equal_error_rate(trials_from(en, zh))
        oracle, exact = brute_eer(en, zh)
        if exact:
            n_exact += 1
            assert eer == oracle
        else:
            assert abs(eer - oracle) <= 1e-9
    assert n_exact >= 1


def test_eer_monotone_and_swap_invariance():
    rng = np.random.default_rng(3)
    en, zh = rng.uniform(0, 0.8, 200), rng.uniform(0.2, 1, 150)
    eer, _ = equal_error_rate(trials_from(en, zh))
    assert equal_error_rate(trials_from(en**3, zh**3))[0] == pytest.approx(eer, abs=1e-12)
    assert equal_error_rate(trials_from(np.sqrt(en), np.sqrt(zh)))[0] == pytest.approx(eer, abs=1e-12)
    # swap the classes and negate the score (1 - s keeps it in [0, 1])
    swapped = trials_from(1 - zh, 1 - en)
    assert equal_error_rate(swapped)[0] == pytest.approx(eer, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_eer_in_range(en, zh):
    eer, _ = equal_error_rate(trials_from(en, zh))
    assert 0.0 <= eer <= 1.0
    if min(zh) > max(en):
        assert eer == 0.0
    if np.mean(zh) > np.mean(en) and min(zh) >= max(en):
        assert eer <= 0.5 + 1e-12


def test_report_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    trials = trials_from(rng.uniform(size=30), rng.uniform(size=20))
    report = evaluate_trials(trials)
    assert report.balanced_accuracy == pytest.approx((report.recall_en + report.recall_zh) / 2)
    assert EvalReport.from_dict(json.loads(report.to_json())) == report
    assert "Balanced" in report.render()
    save_trials(trials, tmp_path / "t.jsonl")
    assert load_trials(tmp_path / "t.jsonl") == trials
    with pytest.raises(ValueError):
        ScoredTrial("x", "en", "en", 1.5)

import warnings

import numpy as np
import pytest

from cslid.corpus import Manifest, Utterance, upsample_class
from cslid.errors import ScheduleError
from cslid.sampler import (
    HOUR,
    TABLE1_MERLION,
    TABLE1_SEAME_POOL,
    CorpusStats,
    SamplingCapWarning,
    balanced_language_batches,
    build_gft_schedule,
    duration_balanced_draws,
    duration_balanced_mix,
    format_schedule,
    realize_stage,
    table1_schedule,
)

# published rows: M zh, M en, M total, S zh, S en, S total, zh, en, total, S/M, zh/en
TABLE1 = [
    (5.4, 21.6, 27.0, 17.9, 8.9, 26.8, 23.2, 30.6, 53.8, 1.0, 0.76),
    (10.7, 21.6, 32.4, 10.7, 5.4, 16.1, 21.4, 27.0, 48.4, 0.5, 0.79),
    (10.7, 21.6, 32.4, 4.5, 2.2, 6.7, 15.2, 23.9, 39.1, 0.2, 0.64),
    (16.1, 21.6, 37.7, 0.0, 0.0, 0.0, 16.1, 21.6, 37.7, 0.0, 0.74),
]
KEYS = ("merlion_zh_h", "merlion_en_h", "merlion_total_h", "seame_zh_h", "seame_en_h", "seame_total_h",
        "total_zh_h", "total_en_h", "total_h")


def manifest(lang_durs, prefix="u"):
    return Manifest(tuple(Utterance(f"{prefix}{i}", "x.wav", 0.0, float(d), lang) for i, (lang, d) in enumerate(lang_durs)))


def uniform(lang, hours, dur_s, prefix):
    n = int(round(hours * HOUR / dur_s))
    return [(lang, dur_s)] * n, prefix


@pytest.mark.parametrize("k", range(4))
def test_table1_rows(k):
    row = table1_schedule()[k].as_row()
    expected = TABLE1[k]
    for key, want in zip(KEYS, expected[:9]):
        assert abs(row[key] - want) <= 0.1, key
    # S/M is published to one decimal, zh/en to two
    assert abs(round(row["s_over_m"], 1) - expected[9]) <= 0.01
    assert abs(row["zh_en"] - expected[10]) <= 0.01
    assert row["upsample_zh"] == (1, 2, 2, 3)[k]


def test_schedule_validation():
    m, s = CorpusStats(5.4, 21.6), CorpusStats(40, 20)
    with pytest.raises(ScheduleError):
        build_gft_schedule(m, s, [1.0, 2.0, 0.0])
    with pytest.raises(ScheduleError):
        build_gft_schedule(m, s, [1.0, 0.5])
    with pytest.raises(ScheduleError):
        build_gft_schedule(m, s, [1.0, 0.0], [1, 2, 3])
    only = build_gft_schedule(m, s, [0], 3)
    assert len(only) == 1 and only[0].seame_total_h == 0 and only[0].merlion_zh_h == pytest.approx(16.2)
    five = build_gft_schedule(m, s, [3, 2, 1, 0.5, 0], [1, 2, 2, 3, 3])
    assert [st.target_ood_id_ratio for st in five] == [3, 2, 1, 0.5, 0]
    for st in five[:-1]:
        assert st.seame_zh_h / st.seame_en_h == pytest.approx(2.0)
        assert st.seame_total_h == pytest.approx(st.target_ood_id_ratio * st.merlion_total_h)
    assert "16.1 (3)" in format_schedule(table1_schedule())


# -- balanced batches ---------------------------------------------------------------


def test_balanced_batches_random_manifests():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n_en, n_zh = rng.integers(1, 40, size=2)
        items = [("en", d) for d in rng.uniform(0.5, 8, n_en)] + [("zh", d) for d in rng.uniform(0.5, 8, n_zh)]
        cap = float(rng.uniform(4, 40))
        stream = balanced_language_batches(manifest(items), cap, np.random.default_rng(trial))
        assert not stream.unbalanced
        for b in stream:
            labels = b.labels
            assert abs(labels.count("en") - labels.count("zh")) <= 1
            assert b.total_duration_s <= cap or len(b) == 1
        assert len({u.id for u in stream.utterances()}) == len(stream.utterances())


def test_balanced_batches_examples():
    m = manifest([("en", 1.0)] * 10 + [("zh", 1.0)] * 10)
    stream = balanced_language_batches(m, 4.0, np.random.default_rng(0))
    assert [sorted(b.labels) for b in stream] == [["en", "en", "zh", "zh"]] * 5
    single = balanced_language_batches(m, 0.5, np.random.default_rng(0))
    assert all(len(b) == 1 for b in single) and len(single) == 20
    again = balanced_language_batches(m, 4.0, np.random.default_rng(0))
    assert [b.utterances for b in stream] == [b.utterances for b in again]


def test_single_language_falls_back_with_flag():
    m = manifest([("en", 1.0)] * 5)
    with pytest.warns(UserWarning):
        stream = balanced_language_batches(m, 2.0, np.random.default_rng(0))
    assert stream.unbalanced and len(stream.utterances()) == 5


# -- duration-balanced mixing ------------------------------------------------------------


def prefix_gap_ok(draws, max_len):
    cum = [0.0, 0.0]
    for src, u in draws:
        cum[src] += u.duration_s
        if abs(cum[0] - cum[1]) > max_len + 1e-9:
            return False
    return True


def test_mix_prefix_gap_and_termination():
    rng = np.random.default_rng(0)
    for trial in range(50):
        a = manifest([("en", d) for d in rng.uniform(0.5, 10, rng.integers(1, 80))], "a")
        b = manifest([("zh", d) for d in rng.uniform(0.5, 10, rng.integers(1, 80))], "b")
        draws = duration_balanced_draws(a, b, np.random.default_rng(trial))
        max_len = max(u.duration_s for u in list(a) + list(b))
        assert prefix_gap_ok(draws, max_len)
        per_src = [[u.id for s, u in draws if s == k] for k in (0, 1)]
        assert all(len(ids) == len(set(ids)) for ids in per_src)
        # stops exactly when one source has nothing left to give
        cum = [sum(u.duration_s for s, u in draws if s == k) for k in (0, 1)]
        starved = 0 if cum[0] <= cum[1] else 1
        assert len(per_src[starved]) == len((a, b)[starved])


def test_mix_ten_hours_against_two():
    a = manifest([("en", 5.0)] * int(10 * HOUR / 5), "a")
    b = manifest([("zh", 5.0)] * int(2 * HOUR / 5), "b")
    draws = duration_balanced_draws(a, b, np.random.default_rng(0))
    got = [sum(u.duration_s for s, u in draws if s == k) / HOUR for k in (0, 1)]
    assert got[1] == pytest.approx(2.0) and abs(got[0] - 2.0) <= 5.0 / HOUR + 1e-9


def test_mix_identical_manifests_use_everything_once():
    a = manifest([("en", d) for d in (1.0, 2.0, 3.0, 4.0)])
    stream = duration_balanced_mix(a, a, np.random.default_rng(0), max_batch_duration_s=5.0)
    ids = [u.id for u in stream.utterances()]
    assert sorted(ids) == sorted([u.id for u in a] * 2)


# -- stage realization --------------------------------------------------------------


@pytest.fixture(scope="module")
def table1_corpora():
    dur = 12.0
    m_items = [("zh", dur)] * int(round(TABLE1_MERLION.zh_hours * HOUR / dur)) + [("en", dur)] * int(
        round(TABLE1_MERLION.en_hours * HOUR / dur))
    rng = np.random.default_rng(0)
    s_items = [("zh", d) for d in rng.uniform(4, 20, 6000)] + [("en", d) for d in rng.uniform(4, 20, 3000)]
    return manifest(m_items, "m"), manifest(s_items, "s")


@pytest.mark.parametrize("k", range(4))
def test_realize_stage_matches_table(table1_corpora, k):
    merlion, seame = table1_corpora
    stage = table1_schedule()[k]
    out = realize_stage(stage, merlion, seame, np.random.default_rng(k))
    zh, en = out.duration_s("zh") / HOUR, out.duration_s("en") / HOUR
    want = TABLE1[k]
    assert abs(zh - want[6]) <= 0.15 and abs(en - want[7]) <= 0.15
    assert abs(zh + en - want[8]) <= 0.2
    assert zh / en == pytest.approx(stage.total_zh_h / stage.total_en_h, rel=0.05)
    if stage.target_ood_id_ratio == 0:
        assert out == Manifest(upsample_class(merlion, "zh", 3).entries, out.provenance)


def test_realize_stage_deterministic_and_capped(table1_corpora):
    merlion, seame = table1_corpora
    stage = table1_schedule()[0]
    a = realize_stage(stage, merlion, seame, np.random.default_rng(3))
    b = realize_stage(stage, merlion, seame, np.random.default_rng(3))
    assert a == b
    tiny = manifest([("zh", 5.0)] * 4 + [("en", 5.0)] * 2, "t")
    with pytest.warns(SamplingCapWarning):
        capped = realize_stage(stage, merlion, tiny, np.random.default_rng(0))
    assert "capped" in capped.provenance
    assert len(capped) == len(merlion) + 6
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        realize_stage(stage, merlion, seame, np.random.default_rng(0))


def test_pool_stats_cover_table1():
    assert TABLE1_SEAME_POOL.total_hours >= max(st.seame_total_h for st in table1_schedule())


def test_realize_stage_with_clashing_ids():
    merlion = manifest([("en", 2.0)] * 6 + [("zh", 2.0)] * 2)
    seame = manifest([("zh", 2.0)] * 20 + [("en", 2.0)] * 10)  # same "u<k>" ids
    stage = build_gft_schedule(CorpusStats.from_manifest(merlion), CorpusStats.from_manifest(seame), [1, 0])[0]
    out = realize_stage(stage, merlion, seame, np.random.default_rng(0))
    assert len({u.id for u in out}) == len(out)
    assert sum(u.id.startswith("ood~") for u in out) > 0

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cslid.corpus import (
    BLANK,
    UNK,
    Manifest,
    Utterance,
    build_vocab,
    load_lexicon,
    load_manifest,
    make_lexicon,
    save_lexicon,
    save_manifest,
    segment_longest_match,
    speed_factor_of,
    speed_perturb_manifest,
    split_holdout,
    strip_special_tags,
    synthesize_codemix,
    tokenize_transcript,
    upsample_class,
)
from cslid.errors import ConfigError, IntegrityError, ManifestError


def utt(i, lang="en", dur=1.0, **kw):
    return Utterance(f"u{i}", f"a{i}.wav", 0.0, dur, lang, **kw)


def mono(lang, durations, prefix=None):
    prefix = prefix or lang
    return Manifest(tuple(Utterance(f"{prefix}{i}", f"{prefix}{i}.wav", 0.0, d, lang) for i, d in enumerate(durations)))


# -- manifests ---------------------------------------------------------------------

text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=8)
utterances = st.builds(
    lambda i, d, lang, words, tag: Utterance(f"id{i}", f"audio/{i}.wav", 0.25, d, lang, tuple(words), tag),
    st.integers(0, 10**6),
    st.floats(0.01, 1e4, allow_nan=False),
    st.sampled_from(["en", "zh"]),
    st.lists(text, max_size=4),
    text,
)


@settings(max_examples=30, deadline=None)
@given(st.lists(utterances, max_size=15, unique_by=lambda u: u.id))
def test_manifest_roundtrip(tmp_path_factory, items):
    path = tmp_path_factory.mktemp("m") / "m.jsonl"
    m = Manifest(tuple(items))
    save_manifest(m, path)
    assert load_manifest(path).entries == m.entries


def test_roundtrip_hundred_and_non_ascii(tmp_path):
    rng = np.random.default_rng(0)
    items = [utt(i, "zh" if i % 3 else "en", float(rng.uniform(0.5, 9)), transcript=("你好", "café"), corpus_tag="x") for i in range(100)]
    m = Manifest(tuple(items))
    save_manifest(m, tmp_path / "m.jsonl")
    back = load_manifest(tmp_path / "m.jsonl")
    assert back.entries == m.entries
    assert back.total_duration_s == pytest.approx(sum(u.duration_s for u in items))
    assert "你好" in (tmp_path / "m.jsonl").read_text(encoding="utf-8")


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    assert len(load_manifest(p)) == 0
    good = utt(1).to_record()
    bad = dict(good, id="u2")
    del bad["language"]
    p.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(ManifestError, match="line 2") as exc:
        load_manifest(p)
    assert exc.value.line == 2
    p.write_text(json.dumps(good) + "\n" + json.dumps(good) + "\n")
    with pytest.raises(IntegrityError):
        load_manifest(p)
    p.write_text(json.dumps(dict(good, language="fr")) + "\n")
    with pytest.raises(ManifestError):
        load_manifest(p)
    with pytest.raises(IntegrityError):
        Manifest((utt(1), utt(1)))


def test_tag_stripping(tmp_path):
    assert strip_special_tags("<mandarin:你好>") == "你好"
    assert strip_special_tags("[laugh]") == "laugh"
    assert strip_special_tags("<cs>word</cs>") == "word"
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(utt(1, transcript=("<mandarin:好>", "ok")).to_record(), ensure_ascii=False) + "\n", encoding="utf-8")
    assert load_manifest(p, strip_tags=True)[0].transcript == ("好", "ok")


# -- silver code-mix ------------------------------------------------------------------


def test_codemix_exact_division():
    out = synthesize_codemix(mono("en", [10.0]), mono("zh", [10.0]), (2.0, 2.0), np.random.default_rng(0))
    for lang in ("en", "zh"):
        segs = [u for u in out if u.language == lang]
        assert len(segs) == 5 and all(u.duration_s == 2.0 for u in segs)
        assert sorted(u.offset_s for u in segs) == [0.0, 2.0, 4.0, 6.0, 8.0]


def test_codemix_balance_ten_hours():
    rng = np.random.default_rng(1)
    en = mono("en", rng.uniform(5, 20, 2400))
    zh = mono("zh", rng.uniform(5, 20, 3000))
    en = mono("en", np.array([u.duration_s for u in en]) * 36000 / en.total_duration_s)
    zh = mono("zh", np.array([u.duration_s for u in zh]) * 36000 / zh.total_duration_s)
    out = synthesize_codemix(en, zh, rng=np.random.default_rng(2))
    assert abs(out.duration_s("en") - out.duration_s("zh")) <= 5.0
    assert all(not u.transcript for u in out)


def test_codemix_determinism_and_errors():
    en, zh = mono("en", [7.3, 4.1]), mono("zh", [6.0, 3.3])
    a = synthesize_codemix(en, zh, rng=np.random.default_rng(5))
    b = synthesize_codemix(en, zh, rng=np.random.default_rng(5))
    assert a == b
    with pytest.raises(ValueError):
        synthesize_codemix(Manifest(), zh)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.5, 12), min_size=1, max_size=6), st.lists(st.floats(0.5, 12), min_size=1, max_size=6), st.integers(0, 1000))
def test_codemix_duration_bounds(en_d, zh_d, seed):
    en, zh = mono("en", en_d), mono("zh", zh_d)
    lo = 1.0
    out = synthesize_codemix(en, zh, (lo, 3.0), np.random.default_rng(seed), balance=False)
    for lang, src in (("en", en), ("zh", zh)):
        got = out.duration_s(lang)
        # each source loses strictly less than one minimum-length remainder
        assert got <= src.total_duration_s + 1e-9
        assert got >= src.total_duration_s - lo * len(src) - 1e-9


# -- up-sampling / perturbation ------------------------------------------------------------


def test_upsample():
    m = Manifest(tuple([utt(i, "zh") for i in range(100)] + [utt(100 + i, "en") for i in range(30)]))
    up = upsample_class(m, "zh", 2)
    assert up.counts() == {"en": 30, "zh": 200}
    assert upsample_class(m, "zh", 1) == m
    for bad in (0, -1, 1.5):
        with pytest.raises(ValueError):
            upsample_class(m, "zh", bad)
    # 5.36 h of zh times three rounds to the published 16.1 h
    zh = mono("zh", [5.36 * 3600 / 100] * 100)
    assert round(upsample_class(zh, "zh", 3).duration_s("zh") / 3600, 1) == 16.1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["en", "zh"]), st.floats(0.1, 10)), max_size=20), st.integers(1, 5))
def test_upsample_duration_property(items, factor):
    m = Manifest(tuple(utt(i, lang, d) for i, (lang, d) in enumerate(items)))
    up = upsample_class(m, "zh", factor)
    assert up.duration_s("zh") == pytest.approx(factor * m.duration_s("zh"))
    assert up.duration_s("en") == m.duration_s("en")
    ids = [u.id for u in up]
    for u in m:
        n = sum(1 for i in ids if i == u.id or i.startswith(u.id + "~up"))
        assert n == (factor if u.language == "zh" else 1)


def test_speed_perturb_manifest():
    m = Manifest((utt(1, dur=2.0),))
    sp = speed_perturb_manifest(m)
    assert len(sp) == 3
    assert [speed_factor_of(u) for u in sp] == [1.0, 0.9, 1.1]
    assert sp[1].duration_s == pytest.approx(2.0 / 0.9)


def test_split_holdout():
    m = Manifest(tuple(utt(i, "en" if i < 40 else "zh") for i in range(60)))
    train, dev = split_holdout(m, 0.05, np.random.default_rng(0))
    assert dev.counts() == {"en": 2, "zh": 1}
    assert len(train) + len(dev) == 60
    assert not {u.id for u in train} & {u.id for u in dev}


# -- lexicon / vocab / tokens ----------------------------------------------------------------


def test_vocab_size_and_determinism(tmp_path):
    lex = make_lexicon("en", {f"W{i}": [f"P{i}"] for i in range(10)})
    vocab = build_vocab([lex])
    assert vocab.size == 12 and vocab.symbols[0] == BLANK and vocab.symbols[1] == UNK
    (tmp_path / "a.txt").write_text("CAT\tK AE T\nDOG\tD AO G\n")
    (tmp_path / "b.txt").write_text("DOG\tD AO G\nCAT\tK AE T\n")
    assert build_vocab([load_lexicon(tmp_path / "a.txt", "en")]) == build_vocab([load_lexicon(tmp_path / "b.txt", "en")])
    with pytest.raises(ConfigError):
        build_vocab([])


def test_zh_suffix_keeps_languages_disjoint(tmp_path):
    en = make_lexicon("en", {"MA": ["ma"]})
    zh = make_lexicon("zh", {"妈": ["ma"]})
    assert zh["妈"].phonemes == ("ma_cn",)
    vocab = build_vocab([en, zh])
    assert "ma" in vocab.symbols and "ma_cn" in vocab.symbols
    save_lexicon(zh, tmp_path / "zh.txt")
    assert load_lexicon(tmp_path / "zh.txt", "zh") == zh


def test_tokenize_examples():
    en = make_lexicon("en", {"CAT": ["K", "AE", "T"]})
    zh = make_lexicon("zh", {"你好": ["ni3", "hao3"], "世界": ["shi4", "jie4"]})
    vocab = build_vocab([en, zh])
    lex = {"en": en, "zh": zh}
    cat = tokenize_transcript(["CAT"], lex, "en", vocab)
    assert cat.tokens == tuple(vocab.index(p) for p in ("K", "AE", "T"))
    hi = tokenize_transcript(["你好"], lex, "zh", vocab)
    assert [vocab.symbols[t] for t in hi.tokens] == ["ni3_cn", "hao3_cn"]
    long = tokenize_transcript(["你好世界"], lex, "zh", vocab)  # four chars: not segmented, so UNK
    assert long.tokens == (vocab.index(UNK),)
    mixed = tokenize_transcript(["你好世界你", "DOG"], lex, "zh", vocab)
    assert [vocab.symbols[t] for t in mixed.tokens] == ["ni3_cn", "hao3_cn", "shi4_cn", "jie4_cn", UNK, UNK]
    assert tokenize_transcript([], lex, "en", vocab).tokens == ()
    assert all(t >= 1 for t in mixed.tokens) and mixed.vocab_size == vocab.size


def all_segmentations(s, words):
    if not s:
        return [[]]
    out = []
    for j in range(1, len(s) + 1):
        if s[:j] in words:
            out += [[s[:j]] + rest for rest in all_segmentations(s[j:], words)]
    return out


def test_longest_match_is_a_valid_segmentation():
    rng = np.random.default_rng(0)
    alphabet = "甲乙丙丁"
    for _ in range(200):
        words = {"".join(rng.choice(list(alphabet), int(rng.integers(1, 4)))) for _ in range(6)} | set(alphabet)
        lex = make_lexicon("zh", {w: ["x"] for w in words})
        s = "".join(rng.choice(list(alphabet), int(rng.integers(5, 8))))
        seg = segment_longest_match(s, lex)
        assert seg in all_segmentations(s, words)
    lex = make_lexicon("zh", {"甲乙": ["a"], "丙丁戊": ["b"]})
    assert segment_longest_match("甲乙丙丁戊", lex) == ["甲乙", "丙丁戊"]

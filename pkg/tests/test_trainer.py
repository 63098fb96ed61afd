import numpy as np
import pytest

from cslid.corpus import Manifest, make_lexicon
from cslid.errors import ConfigError, EmptyInputError
from cslid.models import CRNN, Checkpoint, load_checkpoint
from cslid.synth import make_lexicons
from cslid.tensor import Module, Tensor
from cslid.trainer import (
    FeatureBank,
    TrainConfig,
    _Trainer,
    evaluate,
    finetune,
    plan_finetune,
    pretrain,
    select_best_checkpoint,
    write_evaluation,
)

TINY = dict(channels=(4, 8, 8), hidden=16)


def tiny_config(**kw):
    return TrainConfig(crnn=TINY, pretrain_lr=1e-3, finetune_lr=1e-3, max_batch_duration_s=8, **kw)


class Constant(Module):
    kind = "constant"

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)

    def forward(self, feats):
        return Tensor(np.tile(self.logits, (len(feats), 1)))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(model="svm")
    with pytest.raises(ConfigError):
        TrainConfig(pretrain_lr=0)
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig(ft_method="gradual", schedule=[1, 0])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig().pretrain_lr == 1e-4 and TrainConfig().finetune_lr == 1e-5


def test_pretrain_bookkeeping(small_corpus, tmp_path):
    m, _ = small_corpus
    bank = FeatureBank()
    cfg = tiny_config(pretrain_epochs=2)
    best = pretrain(cfg, m.filter("en"), m.filter("zh"), bank, run_dir=tmp_path / "run")
    files = sorted(p.name for p in (tmp_path / "run").glob("*.ckpt"))
    assert files == ["epoch_001.ckpt", "epoch_002.ckpt"]
    assert (tmp_path / "run" / "config.json").exists() and (tmp_path / "run" / "best.json").exists()
    log = (tmp_path / "run" / "train.log").read_text()
    assert "stage=pretrain" in log and "loss=" in log and "lr=" in log
    assert len(best.extra["history"]) == 2
    assert best.metric == max(best.extra["history"])


def test_pretrain_deterministic(small_corpus, tmp_path):
    m, _ = small_corpus
    cfg = tiny_config(pretrain_epochs=1)
    runs = []
    for name in ("a", "b"):
        pretrain(cfg, m.filter("en"), m.filter("zh"), FeatureBank(), run_dir=tmp_path / name)
        runs.append((tmp_path / name / "epoch_001.ckpt").read_bytes())
    assert runs[0] == runs[1]


def test_loss_falls_on_fixed_batch(small_corpus):
    m, _ = small_corpus
    batch = list(m.filter("en"))[:4] + list(m.filter("zh"))[:4]
    bank = FeatureBank()
    curves = []
    for seed in range(3):
        cfg = tiny_config(seed=seed)
        trainer = _Trainer(cfg.new_model(), cfg, bank, 1e-3, np.random.default_rng(seed))
        curves.append([trainer.step(batch, ("lid",))["loss"] for _ in range(50)])
    median = np.median(np.array(curves), axis=0)
    blocks = median.reshape(5, 10).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)
    assert median[-1] < 0.25 * median[0]


def test_mtl_pretrain_requires_transcripts_and_lexicons(small_corpus):
    m, _ = small_corpus
    cfg = TrainConfig(model="mtl", pretrain_epochs=1)
    bare = Manifest(tuple(u.__class__(**{**u.__dict__, "transcript": ()}) for u in m))
    lex = {"en": make_lexicon("en", {"A": ["a"]}), "zh": make_lexicon("zh", {"甲": ["a"]})}
    with pytest.raises(ConfigError, match="transcripts"):
        pretrain(cfg, bare.filter("en"), bare.filter("zh"), FeatureBank(), lexicons=lex)
    with pytest.raises(ConfigError, match="lexicons"):
        pretrain(cfg, m.filter("en"), m.filter("zh"), FeatureBank())


def test_plans(small_corpus):
    m, _ = small_corpus
    ind, ood = m, Manifest(tuple(u.__class__(**{**u.__dict__, "id": "o" + u.id}) for u in m))
    rng = np.random.default_rng(0)
    one = plan_finetune(TrainConfig(upsample_zh=2), ind, None, rng)
    assert len(one) == 1 and one.stages[0].sources[0].counts()["zh"] == 2 * m.counts()["zh"]
    combined = plan_finetune(TrainConfig(ft_method="combined"), ind, ood, rng)
    assert len(combined) == 1 and len(combined.stages[0].sources) == 2
    two = plan_finetune(TrainConfig(ft_method="two_stage"), ind, ood, rng)
    assert [len(s.sources) for s in two] == [2, 1]
    big_ood = Manifest(tuple(u.__class__(**{**u.__dict__, "id": f"o{k}_{u.id}"}) for k in range(4) for u in m))
    gradual = plan_finetune(TrainConfig(ft_method="gradual", schedule=[3, 2, 1, 0.5, 0]), ind, big_ood, rng)
    assert len(gradual) == 5
    assert gradual.stages[-1].sources[0].entries == ind.entries
    for st, ratio in zip(gradual.stages[:-1], [3, 2, 1, 0.5]):
        got = st.sources[0]
        ood_s = sum(u.duration_s for u in got if u.id.startswith("o"))
        assert ood_s / ind.total_duration_s == pytest.approx(ratio, rel=0.05)
    assert all(s.losses == ("lid",) for p in (one, combined, two, gradual) for s in p)
    with pytest.raises(ConfigError, match="schedule"):
        plan_finetune(TrainConfig(ft_method="gradual"), ind, ood, rng)
    with pytest.raises(ConfigError):
        plan_finetune(TrainConfig(ft_method="combined"), ind, None, rng)


def test_mtl_pretrain_trains_ctc_head(small_corpus):
    m, _ = small_corpus
    cfg = TrainConfig(model="mtl", mtl=dict(blocks=1, d_model=16, heads=2, conv_kernel=3, lid_hidden=8),
                      pretrain_epochs=1, pretrain_lr=1e-3, max_batch_duration_s=8)
    lex = make_lexicons()
    ck = pretrain(cfg, m.filter("en"), m.filter("zh"), FeatureBank(), lexicons=lex)
    fresh = cfg.new_model(ck.model.config.ctc_vocab_size)
    init = dict(fresh.named_parameters())
    moved = [n for n, p in ck.model.named_parameters() if n.startswith("ctc_head") and not np.array_equal(p.data, init[n].data)]
    assert moved


def test_finetune_lid_only_leaves_ctc_head_untouched(small_corpus):
    m, _ = small_corpus
    cfg = TrainConfig(model="mtl", mtl=dict(blocks=1, d_model=16, heads=2, conv_kernel=3, lid_hidden=8, ctc_vocab_size=2),
                      finetune_lr=1e-3, max_batch_duration_s=8)
    model = cfg.new_model()
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    out = finetune(cfg, Checkpoint(model), m, None, FeatureBank())
    after = dict(out.model.named_parameters())
    for name in before:
        if name.startswith("ctc_head"):
            assert after[name].data.tobytes() == before[name].tobytes()
    assert any(not np.array_equal(after[n].data, before[n]) for n in before if n.startswith("encoder"))


def test_finetune_from_scratch_and_run_dir(small_corpus, tmp_path):
    m, _ = small_corpus
    cfg = tiny_config(ft_method="one_stage", finetune_epochs=2)
    ck = finetune(cfg, None, m, None, FeatureBank(), eval_manifest=m, run_dir=tmp_path)
    assert ck.path == tmp_path / "final.ckpt" and ck.epoch == 2 and len(ck.extra["history"]) == 2
    assert isinstance(load_checkpoint(ck.path).model, CRNN)


def test_evaluate_always_en(small_corpus, tmp_path):
    m, _ = small_corpus
    report, trials = evaluate(Constant([2.0, -2.0]), m, FeatureBank())
    assert (report.recall_en, report.recall_zh, report.balanced_accuracy) == (1.0, 0.0, 0.5)
    assert len(trials) == len(m)
    again, _ = evaluate(Constant([2.0, -2.0]), m, FeatureBank())
    assert again == report
    write_evaluation(report, trials, tmp_path)
    assert (tmp_path / "report.json").exists() and (tmp_path / "trials.jsonl").exists()
    with pytest.raises(EmptyInputError):
        evaluate(Constant([0.0, 0.0]), Manifest(), FeatureBank())


def test_select_best_checkpoint(monkeypatch, small_corpus):
    from cslid import trainer as tr

    m, _ = small_corpus
    def run(bacs):
        cks = [Checkpoint(Constant([0.0, 0.0]), epoch=i + 1) for i in range(len(bacs))]
        lookup = {id(c.model): b for c, b in zip(cks, bacs)}

        class R:
            def __init__(self, b):
                self.balanced_accuracy = b

        monkeypatch.setattr(tr, "evaluate", lambda model, manifest, bank: (R(lookup[id(model)]), []))
        return select_best_checkpoint(cks, m, FeatureBank())

    assert run([0.6]).epoch == 1
    assert run([0.6, 0.8, 0.7]).epoch == 2
    assert run([0.7, 0.7]).epoch == 1
    with pytest.raises(ValueError):
        select_best_checkpoint([], m, FeatureBank())


def test_feature_bank_cache(small_corpus, tmp_path):
    m, _ = small_corpus
    u = m[0]
    a = FeatureBank(cache_dir=tmp_path).get(u)
    assert len(list(tmp_path.glob("*.fbnk"))) == 1
    b = FeatureBank(cache_dir=tmp_path).get(u)
    np.testing.assert_array_equal(a, b)
    sp = u.__class__(**{**u.__dict__, "id": "sp0.9_" + u.id, "duration_s": u.duration_s / 0.9})
    assert FeatureBank().get(sp).shape[0] > a.shape[0]

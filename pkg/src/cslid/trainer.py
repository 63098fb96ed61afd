"""Pre-training, the four fine-tuning regimes, evaluation and checkpoint selection."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import LANGUAGES
from .corpus import (
    Lexicon,
    Manifest,
    Utterance,
    build_vocab,
    speed_factor_of,
    speed_perturb_manifest,
    split_holdout,
    tokenize_transcript,
    upsample_class,
)
from .dsp import (
    AudioBuffer,
    SpecAugmentConfig,
    extract_fbank,
    load_features,
    read_wav,
    resample,
    save_features,
    spec_augment,
    speed_perturb,
)
from .errors import ConfigError, EmptyInputError
from .metrics import EvalReport, ScoredTrial, evaluate_trials, save_trials
from .models import (
    CRNN,
    Checkpoint,
    CrnnConfig,
    MTLModel,
    MtlConfig,
    build_model,
    joint_loss,
    lid_logits,
    load_checkpoint,
    model_config_dict,
    save_checkpoint,
)
from .sampler import (
    DEFAULT_MAX_BATCH_DURATION_S,
    CorpusStats,
    balanced_language_batches,
    build_gft_schedule,
    duration_balanced_mix,
    duration_batches,
    realize_stage,
)
from .tensor import Adam, clip_grad_norm, ctc_loss_batch, no_grad, softmax_cross_entropy
from .tensor.core import _softmax

log = logging.getLogger(__name__)

FT_METHODS = ("one_stage", "combined", "gradual", "two_stage")
TARGET_SAMPLE_RATE = 16000


@dataclass
class TrainConfig:
    """Everything a training run depends on besides the data.

    ``crnn`` / ``mtl`` hold keyword overrides for the model configs.  Learning
    rates default to the published values; desk-scale runs usually raise them.
    """

    model: str = "crnn"
    crnn: dict = field(default_factory=dict)
    mtl: dict = field(default_factory=dict)
    pretrain_epochs: int = 5
    pretrain_lr: float = 1e-4
    finetune_lr: float = 1e-5
    finetune_epochs: int = 1
    dropout: float = 0.1
    max_batch_duration_s: float = DEFAULT_MAX_BATCH_DURATION_S
    seed: int = 0
    ctc_lambda: float = 0.2
    lid_alpha: float = 100.0
    ft_method: str = "one_stage"
    schedule: list | None = None
    schedule_upsample: list | int = 1
    upsample_zh: int = 1
    balanced_pretrain: bool = True
    holdout_fraction: float = 0.05
    grad_clip: float = 5.0
    spec_augment: bool = False
    speed_perturb: list = field(default_factory=list)

    def __post_init__(self):
        if self.model not in ("crnn", "mtl"):
            raise ConfigError(f"model must be 'crnn' or 'mtl', got {self.model!r}")
        if self.ft_method not in FT_METHODS:
            raise ConfigError(f"ft_method must be one of {FT_METHODS}, got {self.ft_method!r}")
        for name in ("pretrain_lr", "finetune_lr", "max_batch_duration_s"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("pretrain_epochs", "finetune_epochs", "upsample_zh"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.ctc_lambda <= 1.0 or not self.lid_alpha > 0:
            raise ConfigError("ctc_lambda must be in [0, 1] and lid_alpha positive")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config key(s): {', '.join(unknown)}")
        return cls(**d)

    def model_config(self, vocab_size: int | None = None):
        if self.model == "crnn":
            return CrnnConfig(**{"dropout": self.dropout, **self.crnn})
        kw = {"dropout": self.dropout, "ctc_lambda": self.ctc_lambda, "lid_alpha": self.lid_alpha, **self.mtl}
        if vocab_size is not None:
            kw.setdefault("ctc_vocab_size", vocab_size)
        kw.setdefault("ctc_vocab_size", 2)
        return MtlConfig(**kw)

    def new_model(self, vocab_size: int | None = None):
        cfg = self.model_config(vocab_size)
        return CRNN(cfg, seed=self.seed) if self.model == "crnn" else MTLModel(cfg, seed=self.seed)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


class FeatureBank:
    """Utterance -> fbank matrix, with decoding, resampling and speed perturbation.

    Relative audio paths resolve against ``root``.  Features are memoized in
    memory and, when ``cache_dir`` is set, on disk.
    """

    def __init__(self, root=".", cache_dir=None, n_mels: int = 80):
        self.root = Path(root)
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.n_mels = n_mels
        self._audio: dict[str, AudioBuffer] = {}
        self._feats: dict[tuple, np.ndarray] = {}

    def audio(self, path: str) -> AudioBuffer:
        if path not in self._audio:
            p = Path(path)
            buf = read_wav(p if p.is_absolute() else self.root / p)
            self._audio[path] = resample(buf, TARGET_SAMPLE_RATE)
        return self._audio[path]

    def _key(self, u: Utterance):
        return (u.audio_path, round(u.offset_s, 6), round(u.duration_s, 6), speed_factor_of(u))

    def get(self, u: Utterance) -> np.ndarray:
        key = self._key(u)
        if key in self._feats:
            return self._feats[key]
        cache_file = None
        if self.cache_dir is not None:
            import hashlib

            digest = hashlib.sha1(repr(key).encode("utf-8")).hexdigest()[:16]
            cache_file = self.cache_dir / f"{digest}.fbnk"
            if cache_file.exists():
                feat = np.asarray(load_features(cache_file))
                self._feats[key] = feat
                return feat
        factor = speed_factor_of(u)
        audio = self.audio(u.audio_path).slice_seconds(u.offset_s, u.duration_s * factor)
        if factor != 1.0:
            audio = speed_perturb(audio, factor)
        feat = np.asarray(extract_fbank(audio, n_mels=self.n_mels))
        if cache_file is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            save_features(cache_file, feat)
        self._feats[key] = feat
        return feat


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------


@dataclass
class Stage:
    """One fine-tuning stage.

    ``sources`` holds one manifest (plain duration batches) or two manifests
    (re-mixed 1:1 by duration every epoch).
    """

    name: str
    sources: tuple[Manifest, ...]
    epochs: int
    losses: tuple[str, ...] = ("lid",)

    def __post_init__(self):
        if not set(self.losses) <= {"ctc", "lid"} or not self.losses:
            raise ConfigError(f"loss set must be a non-empty subset of {{ctc, lid}}, got {self.losses}")
        if len(self.sources) not in (1, 2):
            raise ConfigError("a stage has one manifest or a pair to mix")


@dataclass
class StagePlan:
    stages: list[Stage]

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a stage plan needs at least one stage")

    def __len__(self):
        return len(self.stages)

    def __iter__(self):
        return iter(self.stages)


def plan_finetune(
    config: TrainConfig, in_domain: Manifest, out_domain: Manifest | None, rng: np.random.Generator
) -> StagePlan:
    method, ep = config.ft_method, int(config.finetune_epochs)
    if method != "one_stage" and (out_domain is None or not len(out_domain)):
        raise ConfigError(f"ft_method {method!r} needs an out-of-domain manifest")
    if method == "gradual":
        if not config.schedule:
            raise ConfigError("gradual fine-tuning needs a schedule (list of out-of-domain ratios)")
        stages = build_gft_schedule(
            CorpusStats.from_manifest(in_domain),
            CorpusStats.from_manifest(out_domain),
            config.schedule,
            config.schedule_upsample,
            ep,
        )
        base = upsample_class(in_domain, "zh", config.upsample_zh) if config.upsample_zh > 1 else in_domain
        out = []
        for st in stages:
            m = realize_stage(st, base, out_domain, rng)
            out.append(Stage(f"gradual{st.stage_index}", (m,), st.epochs))
        return StagePlan(out)
    ind = upsample_class(in_domain, "zh", config.upsample_zh)
    if method == "one_stage":
        return StagePlan([Stage("in_domain", (ind,), ep)])
    mixed = Stage("combined", (ind, out_domain), ep)
    if method == "combined":
        return StagePlan([mixed])
    return StagePlan([mixed, Stage("in_domain", (ind,), ep)])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class RunLog:
    """Plain-text training log; mirrors lines to the module logger."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.lines: list[str] = []

    def write(self, **fields):
        line = " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())
        self.lines.append(line)
        log.info(line)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


class _Trainer:
    def __init__(
        self, model, config: TrainConfig, bank: FeatureBank, lr: float, rng, lexicons=None, vocab=None, train_ctc=False
    ):
        self.model = model
        self.config = config
        self.bank = bank
        self.rng = rng
        self.lexicons = lexicons
        self.vocab = vocab
        # LID-only phases leave the CTC head out of the optimizer entirely
        frozen_ctc = isinstance(model, MTLModel) and not train_ctc
        params = model.non_ctc_parameters() if frozen_ctc else model.parameters()
        self.params = params
        self.opt = Adam(params, lr=lr)
        self.lr = lr
        self.step_count = 0

    def features(self, utts):
        feats = [self.bank.get(u) for u in utts]
        if self.config.spec_augment:
            feats = [spec_augment(f, self.rng, SpecAugmentConfig()) for f in feats]
        return feats

    def step(self, utts: Sequence[Utterance], losses: Sequence[str]) -> dict:
        model = self.model
        model.train()
        feats = self.features(utts)
        labels = np.array([LANGUAGES.index(u.language) for u in utts])
        model.zero_grad()
        terms = {}
        if isinstance(model, MTLModel):
            heads = ("ctc", "lid") if "ctc" in losses else ("lid",)
            out = model(feats, heads=heads)
            l_lid = softmax_cross_entropy(out.lid_logits, labels)
            if "ctc" in losses:
                targets = [
                    tokenize_transcript(u.transcript, self.lexicons, u.language, self.vocab).tokens for u in utts
                ]
                l_ctc = ctc_loss_batch(out.ctc_log_probs, targets, out.lengths)
                if "lid" in losses:
                    cfg = model.config
                    loss = joint_loss(l_ctc, l_lid, cfg.ctc_lambda, cfg.lid_alpha)
                else:
                    loss = l_ctc
                terms["ctc"] = l_ctc.item()
            else:
                loss = l_lid
            terms["lid"] = l_lid.item()
        else:
            loss = softmax_cross_entropy(model(feats), labels)
            terms["lid"] = loss.item()
        loss.backward()
        terms["grad_norm"] = clip_grad_norm(self.params, self.config.grad_clip)
        self.opt.step()
        self.step_count += 1
        terms["loss"] = loss.item()
        return terms


def _copy_model(model):
    info = model_config_dict(model)
    clone = build_model(info["kind"], info["config"])
    clone.load_state_dict(model.state_dict())
    clone.eval()
    return clone


def _check_transcripts(manifest: Manifest):
    missing = [u.id for u in manifest if not u.transcript]
    if missing:
        raise ConfigError(f"mtl pre-training needs transcripts; {len(missing)} utterance(s) have none (e.g. {missing[0]})")


def _epoch_checkpoint(model, run_dir, tag, epoch, metric, extra):
    if run_dir is None:
        return Checkpoint(_copy_model(model), epoch, metric, extra)
    path = Path(run_dir) / f"{tag}_{epoch:03d}.ckpt"
    return save_checkpoint(model, path, epoch=epoch, metric=metric, extra=extra)


def pretrain(
    config: TrainConfig,
    en_manifest: Manifest,
    zh_manifest: Manifest,
    bank: FeatureBank,
    *,
    eval_manifest: Manifest | None = None,
    lexicons: dict[str, Lexicon] | None = None,
    run_dir=None,
    on_epoch: Callable[[int, EvalReport], None] | None = None,
) -> Checkpoint:
    """Train on monolingual data and return the checkpoint with the best held-out BAC.

    Without ``eval_manifest`` a seeded ``holdout_fraction`` of each language is
    held out.  With ``balanced_pretrain`` each epoch is one pass over the
    language-balanced batch stream (bounded by the smaller language); otherwise
    plain shuffled duration batches over everything.  The returned checkpoint
    carries the per-epoch history in ``extra["history"]``.
    """
    rng = np.random.default_rng(config.seed)
    data = Manifest(tuple(en_manifest.entries) + tuple(zh_manifest.entries), provenance="pretrain")
    if not len(data):
        raise EmptyInputError("no pre-training data")
    if eval_manifest is None:
        data, eval_manifest = split_holdout(data, config.holdout_fraction, rng)
    if config.speed_perturb:
        data = speed_perturb_manifest(data, config.speed_perturb)
    vocab = None
    if config.model == "mtl":
        _check_transcripts(data)
        if not lexicons:
            raise ConfigError("mtl pre-training needs lexicons")
        vocab = build_vocab(lexicons.values())
    model = config.new_model(vocab.size if vocab else None)
    trainer = _Trainer(model, config, bank, config.pretrain_lr, rng, lexicons, vocab, train_ctc=config.model == "mtl")
    losses = ("ctc", "lid") if config.model == "mtl" else ("lid",)
    runlog = RunLog(Path(run_dir) / "train.log" if run_dir is not None else None)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        _write_json(Path(run_dir) / "config.json", config.to_dict())
    checkpoints, history = [], []
    for epoch in range(1, config.pretrain_epochs + 1):
        if config.balanced_pretrain:
            stream = balanced_language_batches(data, config.max_batch_duration_s, rng)
        else:
            stream = duration_batches(data, config.max_batch_duration_s, rng)
        for batch in stream:
            terms = trainer.step(batch.utterances, losses)
            runlog.write(stage="pretrain", epoch=epoch, step=trainer.step_count, lr=trainer.lr, **terms)
        report, _ = evaluate(model, eval_manifest, bank)
        history.append(report.balanced_accuracy)
        runlog.write(stage="pretrain", epoch=epoch, eval_bac=report.balanced_accuracy, eval_eer=report.eer)
        if on_epoch is not None:
            on_epoch(epoch, report)
        checkpoints.append(
            _epoch_checkpoint(model, run_dir, "epoch", epoch, report.balanced_accuracy, {"stage": "pretrain"})
        )
    best = _best_by_metric(checkpoints)
    best.extra = {**best.extra, "history": history}
    if run_dir is not None:
        _write_json(Path(run_dir) / "best.json", {"path": str(best.path.name), "epoch": best.epoch, "bac": best.metric})
    return best


def finetune(
    config: TrainConfig,
    checkpoint: Checkpoint | None,
    in_domain: Manifest,
    out_domain: Manifest | None,
    bank: FeatureBank,
    *,
    eval_manifest: Manifest | None = None,
    run_dir=None,
) -> Checkpoint:
    """Run the configured fine-tuning plan with the LID loss only.

    ``checkpoint=None`` starts from random initialization.  Returns the model
    after the final epoch of the final stage.
    """
    rng = np.random.default_rng(config.seed)
    model = _copy_model(checkpoint.model) if checkpoint is not None else config.new_model()
    if config.speed_perturb:
        in_domain = speed_perturb_manifest(in_domain, config.speed_perturb)
    plan = plan_finetune(config, in_domain, out_domain, rng)
    trainer = _Trainer(model, config, bank, config.finetune_lr, rng)
    runlog = RunLog(Path(run_dir) / "train.log" if run_dir is not None else None)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        _write_json(Path(run_dir) / "config.json", config.to_dict())
    history, epoch = [], 0
    for stage in plan:
        for _ in range(stage.epochs):
            epoch += 1
            if len(stage.sources) == 2:
                stream = duration_balanced_mix(*stage.sources, rng, config.max_batch_duration_s)
            else:
                stream = duration_batches(stage.sources[0], config.max_batch_duration_s, rng)
            for batch in stream:
                terms = trainer.step(batch.utterances, stage.losses)
                runlog.write(stage=stage.name, epoch=epoch, step=trainer.step_count, lr=trainer.lr, **terms)
            if eval_manifest is not None:
                report, _ = evaluate(model, eval_manifest, bank)
                history.append(report.balanced_accuracy)
                runlog.write(stage=stage.name, epoch=epoch, eval_bac=report.balanced_accuracy, eval_eer=report.eer)
    metric = history[-1] if history else None
    extra = {"stage": "finetune", "method": config.ft_method, "history": history}
    if run_dir is None:
        return Checkpoint(_copy_model(model), epoch, metric, extra)
    return save_checkpoint(model, Path(run_dir) / "final.ckpt", epoch=epoch, metric=metric, extra=extra)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def score_utterances(model, utts: Sequence[Utterance], bank: FeatureBank, batch_size: int = 32) -> np.ndarray:
    """Softmax probabilities (N, 2) in eval mode, in manifest order."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(utts), batch_size):
            feats = [bank.get(u) for u in utts[i : i + batch_size]]
            logits = lid_logits(model, feats).data.astype(np.float64)
            out.append(_softmax(logits, axis=-1))
    return np.concatenate(out, axis=0)


def evaluate(model, manifest: Manifest, bank: FeatureBank, batch_size: int = 32) -> tuple[EvalReport, list[ScoredTrial]]:
    if not len(manifest):
        raise EmptyInputError("cannot evaluate on an empty manifest")
    utts = list(manifest.entries)
    probs = score_utterances(model, utts, bank, batch_size)
    trials = [
        ScoredTrial(u.id, u.language, LANGUAGES[int(np.argmax(p))], float(p[1])) for u, p in zip(utts, probs)
    ]
    return evaluate_trials(trials), trials


def _best_by_metric(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    best = None
    for c in checkpoints:
        m = -math.inf if c.metric is None else c.metric
        if best is None or m > best[0]:
            best = (m, c)
    return best[1]


def select_best_checkpoint(
    checkpoints: Sequence[Checkpoint | str | Path], eval_manifest: Manifest, bank: FeatureBank
) -> Checkpoint:
    """Highest balanced accuracy on ``eval_manifest``; ties keep the earlier entry."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    scored = []
    for c in checkpoints:
        ck = c if isinstance(c, Checkpoint) else load_checkpoint(c)
        report, _ = evaluate(ck.model, eval_manifest, bank)
        scored.append(replace(ck, metric=report.balanced_accuracy))
    return _best_by_metric(scored)


def write_evaluation(report: EvalReport, trials: Sequence[ScoredTrial], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path, trials_path = out_dir / "report.json", out_dir / "trials.jsonl"
    report_path.write_text(report.to_json(), encoding="utf-8")
    save_trials(trials, trials_path)
    return report_path, trials_path


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")

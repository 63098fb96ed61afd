"""``cslid`` command line: synth, features, pretrain, finetune, evaluate, schedule-preview.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps runs bitwise reproducible; must precede numpy import
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import shutil  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, dataclass, fields, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .corpus import Manifest, load_lexicon, load_manifest, save_manifest, synthesize_codemix  # noqa: E402
from .dsp import save_features  # noqa: E402
from .errors import ConfigError, CslidError  # noqa: E402
from .models import load_checkpoint  # noqa: E402
from .sampler import (  # noqa: E402
    FIVE_STAGE_RATIOS,
    CorpusStats,
    build_gft_schedule,
    format_schedule,
    table1_schedule,
)
from .synth import SynthConfig, synthesize_corpus  # noqa: E402
from .trainer import FeatureBank, TrainConfig, evaluate, finetune, pretrain, write_evaluation  # noqa: E402
from .validation import check_existing_file, check_output_dir  # noqa: E402

log = logging.getLogger("cslid")

PATH_KEYS = (
    "en_manifest",
    "zh_manifest",
    "eval_manifest",
    "in_domain",
    "out_domain",
    "checkpoint",
    "lexicon_en",
    "lexicon_zh",
    "feature_cache",
)


@dataclass
class RunConfig:
    """A training config plus the files it reads, as one JSON document."""

    train: TrainConfig
    paths: dict

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        train_keys = {f.name for f in fields(TrainConfig)}
        unknown = sorted(k for k in d if k not in train_keys and k not in PATH_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        train = TrainConfig(**{k: v for k, v in d.items() if k in train_keys})
        try:
            train.model_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {train.model} settings: {exc}") from None
        paths = {k: d.get(k) for k in PATH_KEYS}
        return cls(train, paths)

    def to_dict(self) -> dict:
        return {**asdict(self.train), **{k: v for k, v in self.paths.items() if v is not None}}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(args) -> RunConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        path = check_existing_file(args.config, "config file")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    if "seed" not in raw and os.environ.get("CSLID_SEED"):
        try:
            raw["seed"] = int(os.environ["CSLID_SEED"])
        except ValueError:
            raise ConfigError(f"CSLID_SEED must be an integer, got {os.environ['CSLID_SEED']!r}") from None
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = _parse_value(value)
    for key in PATH_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def read_manifest(path) -> Manifest:
    """Load a manifest and make relative audio paths absolute against its directory."""
    path = check_existing_file(path, "manifest")
    m = load_manifest(path)
    base = path.resolve().parent
    entries = tuple(
        u if Path(u.audio_path).is_absolute() else replace(u, audio_path=str(base / u.audio_path)) for u in m.entries
    )
    return Manifest(entries, provenance=m.provenance)


def _relative_to(manifest: Manifest, root: Path) -> Manifest:
    entries = tuple(replace(u, audio_path=os.path.relpath(u.audio_path, root)) for u in manifest.entries)
    return Manifest(entries, provenance=manifest.provenance)


def _require(cfg: RunConfig, *keys):
    for key in keys:
        if not cfg.paths.get(key):
            raise ConfigError(f"missing required path {key!r} (flag --{key.replace('_', '-')} or config key)")


def _write_snapshot(out: Path, cfg: RunConfig):
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _bank(cfg: RunConfig) -> FeatureBank:
    return FeatureBank(cache_dir=cfg.paths.get("feature_cache"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = check_output_dir(args.out, args.force)
    if args.force:
        for child in out.iterdir():
            shutil.rmtree(child) if child.is_dir() else child.unlink()
    seed = _seed(args)
    if args.codemix:
        en = read_manifest(args.codemix[0]).filter("en")
        zh = read_manifest(args.codemix[1]).filter("zh")
        m = synthesize_codemix(en, zh, (args.seg_min, args.seg_max), np.random.default_rng(seed), balance=args.balance)
        save_manifest(_relative_to(m, out.resolve()), out / "manifest.jsonl")
    else:
        cfg = SynthConfig(
            n_utterances=args.n,
            duration_s=args.duration,
            en_fraction=args.en_fraction,
            sample_rate_hz=args.sample_rate,
            overlap=args.overlap,
        )
        m = synthesize_corpus(out, cfg, seed=seed)
    counts = m.counts()
    print(f"wrote {len(m)} utterances to {out / 'manifest.jsonl'} (en={counts.get('en', 0)}, zh={counts.get('zh', 0)}, "
          f"en {m.duration_s('en'):.1f} s, zh {m.duration_s('zh'):.1f} s)")
    return 0


def cmd_features(args) -> int:
    m = read_manifest(args.manifest)
    out = check_output_dir(args.out, args.force)
    bank = FeatureBank()
    index = []
    for u in m:
        feat = bank.get(u)
        name = u.id.replace("/", "_") + ".fbnk"
        save_features(out / name, feat)
        index.append({"id": u.id, "path": name, "frames": int(feat.shape[0]), "bins": int(feat.shape[1])})
    with open(out / "features.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in index:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(f"wrote {len(index)} feature files to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args)
    _require(cfg, "en_manifest", "zh_manifest")
    en = read_manifest(cfg.paths["en_manifest"]).filter("en")
    zh = read_manifest(cfg.paths["zh_manifest"]).filter("zh")
    ev = read_manifest(cfg.paths["eval_manifest"]) if cfg.paths.get("eval_manifest") else None
    lexicons = None
    if cfg.train.model == "mtl":
        _require(cfg, "lexicon_en", "lexicon_zh")
        lexicons = {
            "en": load_lexicon(check_existing_file(cfg.paths["lexicon_en"], "lexicon"), "en"),
            "zh": load_lexicon(check_existing_file(cfg.paths["lexicon_zh"], "lexicon"), "zh"),
        }
    out = check_output_dir(args.out, args.force)
    _write_snapshot(out, cfg)
    best = pretrain(cfg.train, en, zh, _bank(cfg), eval_manifest=ev, lexicons=lexicons, run_dir=out)
    print(f"best checkpoint: {best.path} (epoch {best.epoch}, held-out BAC {best.metric:.3f})")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_run_config(args)
    _require(cfg, "in_domain")
    ind = read_manifest(cfg.paths["in_domain"])
    ood = read_manifest(cfg.paths["out_domain"]) if cfg.paths.get("out_domain") else None
    ev = read_manifest(cfg.paths["eval_manifest"]) if cfg.paths.get("eval_manifest") else None
    ckpt = None
    if cfg.paths.get("checkpoint"):
        ckpt = load_checkpoint(check_existing_file(cfg.paths["checkpoint"], "checkpoint"), expect_kind=cfg.train.model)
    out = check_output_dir(args.out, args.force)
    _write_snapshot(out, cfg)
    result = finetune(cfg.train, ckpt, ind, ood, _bank(cfg), eval_manifest=ev, run_dir=out)
    tail = f", eval BAC {result.metric:.3f}" if result.metric is not None else ""
    print(f"fine-tuned checkpoint: {result.path} ({result.extra['method']}, {result.epoch} epochs{tail})")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(check_existing_file(args.checkpoint, "checkpoint"))
    m = read_manifest(args.manifest)
    report, trials = evaluate(ckpt.model, m, FeatureBank(cache_dir=args.feature_cache))
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path exists and is not a directory: {out}")
    report_path, trials_path = write_evaluation(report, trials, out)
    print(report.render())
    print(f"wrote {report_path} and {trials_path}")
    return 0


def cmd_schedule_preview(args) -> int:
    if args.in_domain or args.out_domain:
        if not (args.in_domain and args.out_domain):
            raise ConfigError("--in-domain and --out-domain must be given together")
        m_stats = CorpusStats.from_manifest(read_manifest(args.in_domain))
        s_stats = CorpusStats.from_manifest(read_manifest(args.out_domain))
        ratios = args.ratios or FIVE_STAGE_RATIOS
        stages = build_gft_schedule(m_stats, s_stats, ratios, args.upsample or 1, args.epochs)
    elif args.ratios:
        raise ConfigError("--ratios needs --in-domain/--out-domain manifests; the table1 preset has fixed ratios")
    else:
        stages = table1_schedule(args.epochs)
    if args.json:
        print(json.dumps([s.as_row() for s in stages], indent=2))
    else:
        print(format_schedule(stages))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CSLID_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"CSLID_SEED must be an integer, got {env!r}") from None
    return 0


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_run_flags(p: argparse.ArgumentParser, path_flags):
    p.add_argument("--config", help="JSON run config (training settings plus paths)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; VALUE is parsed as JSON when possible")
    p.add_argument("--seed", type=int, help="random seed (default: config, then $CSLID_SEED, then 0)")
    for key, text in path_flags:
        p.add_argument("--" + key.replace("_", "-"), dest=key, help=text)
    p.add_argument("--feature-cache", dest="feature_cache", help="directory for cached .fbnk features")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cslid", description="Code-switching English/Mandarin language identification.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus or silver code-mix data")
    p.add_argument("out", help="output directory")
    p.add_argument("--n", type=int, default=200, help="number of utterances (synthetic mode)")
    p.add_argument("--duration", type=float, default=2.0, help="utterance length in seconds")
    p.add_argument("--en-fraction", type=float, default=0.5, help="share of English utterances")
    p.add_argument("--overlap", type=float, default=0.0, help="spectral overlap of the two languages, 0 (easy) to 1 (hard)")
    p.add_argument("--sample-rate", type=int, default=16000, help="sample rate of the written audio")
    p.add_argument("--codemix", nargs=2, metavar=("EN_MANIFEST", "ZH_MANIFEST"), help="build silver code-mix segments from two monolingual manifests")
    p.add_argument("--seg-min", type=float, default=1.0, help="minimum segment length (code-mix mode)")
    p.add_argument("--seg-max", type=float, default=5.0, help="maximum segment length (code-mix mode)")
    p.add_argument("--balance", action="store_true", help="balance en/zh duration to within one segment (code-mix mode)")
    p.add_argument("--seed", type=int, help="random seed (default: $CSLID_SEED, then 0)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract log-mel filterbank features for a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("pretrain", help="pre-train on monolingual data with language-balanced batches")
    _add_run_flags(
        p,
        [
            ("en_manifest", "English manifest"),
            ("zh_manifest", "Mandarin manifest (may be the same file as --en-manifest)"),
            ("eval_manifest", "held-out manifest for checkpoint selection (default: 5%% split)"),
            ("lexicon_en", "English lexicon (mtl)"),
            ("lexicon_zh", "Mandarin lexicon (mtl)"),
        ],
    )
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune with one_stage, combined, gradual or two_stage")
    _add_run_flags(
        p,
        [
            ("checkpoint", "starting checkpoint (omit for random initialization)"),
            ("in_domain", "in-domain manifest"),
            ("out_domain", "out-of-domain manifest"),
            ("eval_manifest", "manifest evaluated after every epoch"),
        ],
    )
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a manifest; writes report.json and trials.jsonl")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--feature-cache", dest="feature_cache", help="directory for cached .fbnk features")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("schedule-preview", help="print the gradual fine-tuning stage table")
    p.add_argument("--in-domain", help="in-domain manifest (default: the table1 preset)")
    p.add_argument("--out-domain", help="out-of-domain manifest")
    p.add_argument("--ratios", type=_float_list, help="out-of-domain:in-domain ratio per stage, e.g. 3,2,1,0.5,0")
    p.add_argument("--upsample", type=_int_list, help="in-domain zh up-sampling per stage, e.g. 1,2,2,3")
    p.add_argument("--epochs", type=int, default=1, help="epochs per stage")
    p.add_argument("--json", action="store_true", help="print rows as JSON")
    p.set_defaults(func=cmd_schedule_preview)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"cslid: error [{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except CslidError as exc:
        print(f"cslid: error [{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"cslid: error [runtime]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

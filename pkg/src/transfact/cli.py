"""Command-line entry point.

Subcommands cover the whole pipeline: gen-data, compute-mhi,
extract-features, train, eval, truncate-sweep, stats-compare, plot.
Option precedence is flags > config file (JSON) > built-in defaults.

Exit codes: 0 ok, 2 usage/config error, 3 refused overwrite, 4 data
error, 5 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .errors import (
    ConfigError,
    NumericError,
    OverwriteRefusedError,
    TransfactError,
)
from .losses import LossWeights
from .model import ModelConfig
from .rng import derive_seed
from .trainer import TrainConfig
from .videodata import GenConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_REFUSED = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transfact",
        description="Developmental-stage segmentation and transferability prediction on time-lapse embryo videos.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=True):
        p.add_argument("--config", help="JSON config file; flags override its values")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--force", action="store_true", help="overwrite a stamped output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--count", type=int, help="number of videos (default 290)")
    p.add_argument("--frames", type=int, help="frames per video")
    p.add_argument("--size", type=int, help="square frame size in pixels")
    p.add_argument("--p-anomaly", type=float, dest="p_anomaly")
    p.add_argument("--late-anomaly", action="store_true", help="force anomalies into the last third")
    p.add_argument("--seed", type=int)
    p.add_argument("--ratios", type=_float_list, help="train,val,test ratios (default 20/29,3/29,6/29)")

    p = sub.add_parser("compute-mhi", help="persist raw motion-history maps")
    add_common(p)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--tau", type=int)
    p.add_argument("--theta", type=int)
    p.add_argument("--pgm", action="store_true", help="also export a PGM snapshot per video")

    p = sub.add_parser("extract-features", help="encode per-frame features")
    add_common(p)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--modality", choices=("frame", "mhi"))
    p.add_argument("--dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=int)
    p.add_argument("--theta", type=int)

    def add_run_data(p):
        p.add_argument("--data", required=True, help="manifest path")
        p.add_argument("--features", help="frame-feature directory")
        p.add_argument("--mhi-features", dest="mhi_features", help="MHI-feature directory")
        p.add_argument("--modality", choices=pipeline.MODALITY_CHOICES)

    p = sub.add_parser("train", help="train the model")
    add_common(p)
    add_run_data(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--seed", type=int)
    p.add_argument("--w-trans", type=float, dest="w_trans", help="transferability loss weight")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p)
    add_run_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"))

    p = sub.add_parser("truncate-sweep", help="retrain/evaluate on video prefixes")
    add_common(p)
    add_run_data(p)
    p.add_argument("--lengths", type=_int_list, required=True, help="comma-separated prefix lengths")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default 0..4)")
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.add_argument("--reuse-model", action="store_true", dest="reuse_model",
                   help="fast mode: train once at full length (NOT the faithful protocol)")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("stats-compare", help="exact Wilcoxon + Cohen's d on paired runs")
    add_common(p)
    p.add_argument("--runs-a", required=True, dest="runs_a")
    p.add_argument("--runs-b", required=True, dest="runs_b")

    p = sub.add_parser("plot", help="render a sweep curve as SVG")
    add_common(p)
    p.add_argument("--sweep", required=True, help="sweep.csv from truncate-sweep")
    return parser


# ---------------------------------------------------------------------------
# config resolution per command


def _train_section(file_cfg: dict, args, master_seed: int) -> dict:
    defaults = TrainConfig().to_dict()
    defaults["seed"] = derive_seed(master_seed, "train")
    section = _merge(defaults, file_cfg.get("train", {}))
    overrides = {
        "learning_rate": getattr(args, "lr", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "warmup_steps": getattr(args, "warmup_steps", None),
        "weight_decay": getattr(args, "weight_decay", None),
    }
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = derive_seed(args.seed, "train")
    if getattr(args, "w_trans", None) is not None:
        overrides["loss_weights"] = _merge(section.get("loss_weights", {}), {"trans": args.w_trans})
    return _merge(section, overrides)


def _run_sections(file_cfg: dict, args) -> dict:
    cfg = {
        "data": args.data,
        "features": getattr(args, "features", None) or file_cfg.get("features"),
        "mhi_features": getattr(args, "mhi_features", None) or file_cfg.get("mhi_features"),
        "modality": getattr(args, "modality", None) or file_cfg.get("modality", "frames"),
        "model": _merge(ModelConfig().to_dict(), file_cfg.get("model", {})),
    }
    if cfg["modality"] in ("frames", "frames+mhi") and not cfg["features"]:
        raise ConfigError("--features is required for the frames modalities")
    if cfg["modality"] in ("mhi", "frames+mhi") and not cfg["mhi_features"]:
        raise ConfigError("--mhi-features is required for the MHI modalities")
    return cfg


def resolve_and_run(args) -> int:
    file_cfg = _load_config_file(getattr(args, "config", None))
    master_seed = getattr(args, "seed", None)
    if master_seed is None:
        master_seed = int(file_cfg.get("seed", 0))

    if args.command == "gen-data":
        gen_defaults = GenConfig().__dict__ | {}
        gen = _merge(dict(gen_defaults), file_cfg.get("gen", {}))
        gen = _merge(
            gen,
            {
                "num_frames": args.frames,
                "frame_size": args.size,
                "p_anomaly": args.p_anomaly,
            },
        )
        if args.late_anomaly:
            gen["anomaly_onset_frac"] = 2.0 / 3.0
        for key in ("stable_frames", "cleavage_frames", "slow_factor"):
            gen[key] = tuple(gen[key])
        config = {
            "gen": {k: (list(v) if isinstance(v, tuple) else v) for k, v in gen.items()},
            "count": args.count or file_cfg.get("count", 290),
            "ratios": args.ratios or file_cfg.get("ratios", [20 / 29, 3 / 29, 6 / 29]),
            "seed": derive_seed(master_seed, "data"),
        }
        manifest = pipeline.gen_data(config, args.out, args.force)
        counts = {s: len(manifest.subset(s)) for s in ("train", "val", "test")}
        print(f"wrote {len(manifest.entries)} videos to {args.out} (splits {counts})")
        return EXIT_OK

    if args.command == "compute-mhi":
        config = {
            "tau": args.tau or file_cfg.get("tau", 15),
            "theta": args.theta or file_cfg.get("theta", 20),
            "pgm": bool(args.pgm),
        }
        pipeline.compute_mhi(config, args.data, args.out, args.force)
        print(f"wrote MHI maps to {args.out}")
        return EXIT_OK

    if args.command == "extract-features":
        config = {
            "modality": args.modality or file_cfg.get("modality", "frame"),
            "dim": args.dim or file_cfg.get("dim", 32),
            "seed": derive_seed(master_seed, "encoder") if args.seed is None and "encoder_seed" not in file_cfg
            else (args.seed if args.seed is not None else file_cfg["encoder_seed"]),
            "tau": args.tau or file_cfg.get("tau", 15),
            "theta": args.theta or file_cfg.get("theta", 20),
        }
        pipeline.extract_features(config, args.data, args.out, args.force)
        print(f"wrote {config['modality']} features to {args.out}")
        return EXIT_OK

    if args.command == "train":
        config = _run_sections(file_cfg, args)
        config["train"] = _train_section(file_cfg, args, master_seed)
        summary = pipeline.run_train(config, args.out, args.force)
        print(f"trained {summary['epochs']} epochs; best epoch {summary['best_epoch']} "
              f"(val loss {summary['best_val_loss']:.4f}) -> {args.out}")
        return EXIT_OK

    if args.command == "eval":
        config = _run_sections(file_cfg, args)
        config["split"] = args.split or file_cfg.get("split", "test")
        metrics = pipeline.run_eval(config, args.checkpoint, args.out, args.force)
        print(json.dumps({"accuracy": metrics["accuracy"], "stage_accuracy": metrics["stage_accuracy"]}, indent=2))
        return EXIT_OK

    if args.command == "truncate-sweep":
        config = _run_sections(file_cfg, args)
        config["train"] = _train_section(file_cfg, args, master_seed)
        config["lengths"] = args.lengths
        config["seeds"] = args.seeds or file_cfg.get("seeds", [0, 1, 2, 3, 4])
        config["jobs"] = args.jobs or file_cfg.get("jobs", 1)
        config["reuse_model"] = bool(args.reuse_model)
        points = pipeline.run_sweep(config, args.out, args.force)
        for pt in points:
            print(f"length {pt.length:4d}: accuracy {100*pt.mean_accuracy:.1f} +- {100*pt.std_accuracy:.1f}")
        return EXIT_OK

    if args.command == "stats-compare":
        report = pipeline.stats_compare({}, args.runs_a, args.runs_b, args.out, args.force)
        print(json.dumps(report, indent=2))
        return EXIT_OK

    if args.command == "plot":
        path = pipeline.plot_sweep(args.sweep, args.out, force=args.force)
        print(f"wrote {path}")
        return EXIT_OK

    raise ConfigError(f"unknown command {args.command!r}")  # pragma: no cover


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return resolve_and_run(args)
    except OverwriteRefusedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TransfactError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end pipeline stages behind the command-line tool.

Every stage resolves its configuration fully before touching disk,
stamps the output directory with the resolved config and its
fingerprint, and refuses to overwrite a stamped directory unless forced.
All artifacts live strictly under the stage's output directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import features as feat
from . import mhi as mhi_mod
from . import videodata as vd
from .errors import ConfigError, InputError, OverwriteRefusedError
from .evaluation import SweepPoint, cohens_d, evaluate_model, truncation_sweep, wilcoxon_signed_rank_exact
from .model import ModelConfig
from .rng import derive_seed
from .trainer import ArrayDataset, TrainConfig, evaluate_losses, load_checkpoint, save_checkpoint, train

__all__ = [
    "fingerprint_of",
    "prepare_out_dir",
    "gen_data",
    "compute_mhi",
    "extract_features",
    "assemble_split",
    "run_train",
    "run_eval",
    "run_sweep",
    "stats_compare",
    "plot_sweep",
    "MODALITY_CHOICES",
]

MODALITY_CHOICES = ("frames", "mhi", "frames+mhi")
SPLITS = ("train", "val", "test")


def fingerprint_of(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def prepare_out_dir(out_dir, config: dict, force: bool = False) -> Path:
    """Create/claim an output directory, stamping config + fingerprint."""
    out = Path(out_dir)
    stamp = out / "fingerprint.txt"
    if stamp.exists() and not force:
        raise OverwriteRefusedError(
            f"{out} already holds results (fingerprint {stamp.read_text().strip()[:12]}...); pass --force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(canonical_json(config))
    stamp.write_text(fingerprint_of(config) + "\n")
    return out


# ---------------------------------------------------------------------------
# data generation


def gen_data(config: dict, out_dir, force: bool = False) -> vd.DatasetManifest:
    """Generate a synthetic dataset: TFV1 videos + split-tagged manifest."""
    gen_fields = {
        k: tuple(v) if isinstance(v, list) else v for k, v in config["gen"].items()
    }
    gen_cfg = vd.GenConfig(**gen_fields)
    gen_cfg.validate()
    count = int(config["count"])
    ratios = tuple(config["ratios"])
    seed = int(config["seed"])
    if count < 3:
        raise ConfigError(f"need at least 3 videos to split, got {count}")
    out = prepare_out_dir(out_dir, config, force)
    video_dir = out / "videos"
    video_dir.mkdir(exist_ok=True)
    entries = []
    for i in range(count):
        vid = f"v{i:05d}"
        record = vd.generate_synthetic_video(derive_seed(seed, f"video:{i}"), gen_cfg, vid)
        vd.save_video(video_dir / f"{vid}.tfv", record)
        entries.append(
            vd.ManifestEntry(
                id=vid,
                path=f"videos/{vid}.tfv",
                transfer=record.transfer,
                num_frames=record.frames.shape[0],
            )
        )
    manifest = vd.split_dataset(vd.DatasetManifest(entries), ratios, derive_seed(seed, "split"))
    vd.save_manifest(out / "manifest.jsonl", manifest)
    return manifest


def _load_videos(manifest_path) -> tuple[vd.DatasetManifest, dict[str, vd.VideoRecord]]:
    manifest_path = Path(manifest_path)
    manifest = vd.load_manifest(manifest_path)
    records = {}
    for entry in manifest.entries:
        records[entry.id] = vd.load_video(manifest_path.parent / entry.path)
    return manifest, records


# ---------------------------------------------------------------------------
# MHI + features


def compute_mhi(config: dict, manifest_path, out_dir, force: bool = False) -> None:
    """Persist raw MHI maps (flattened, TFF1 with modality=mhi) per video."""
    tau, theta = int(config["tau"]), int(config["theta"])
    out = prepare_out_dir(out_dir, config, force)
    map_dir = out / "mhi"
    map_dir.mkdir(exist_ok=True)
    manifest, records = _load_videos(manifest_path)
    export_pgm = bool(config.get("pgm", False))
    for entry in manifest.entries:
        maps = mhi_mod.compute_mhi_sequence(records[entry.id].frames, tau, theta)
        flat = maps.reshape(maps.shape[0], -1).astype(np.float32)
        feat.save_features(map_dir / f"{entry.id}.tff", feat.FeatureSequence("mhi", flat))
        if export_pgm:
            pgm_dir = out / "pgm"
            pgm_dir.mkdir(exist_ok=True)
            mhi_mod.write_pgm(pgm_dir / f"{entry.id}_last.pgm", maps[-1], tau)


def extract_features(config: dict, manifest_path, out_dir, force: bool = False) -> None:
    """Encode every video for one modality; stats are fitted on train only."""
    modality = config["modality"]
    if modality not in ("frame", "mhi"):
        raise ConfigError(f"modality must be frame or mhi, got {modality!r}")
    dim = int(config["dim"])
    seed = int(config["seed"])
    out = prepare_out_dir(out_dir, config, force)
    manifest, records = _load_videos(manifest_path)
    encoder = feat.FrozenEncoder(seed, dim, modality)

    def source(entry: vd.ManifestEntry) -> np.ndarray:
        frames = records[entry.id].frames
        if modality == "frame":
            return frames
        return mhi_mod.compute_mhi_sequence(frames, int(config["tau"]), int(config["theta"]))

    raw = {e.id: encoder.encode(source(e)) for e in manifest.entries}
    train_ids = [e.id for e in manifest.subset("train")]
    if not train_ids:
        raise InputError("manifest has no train split; cannot fit feature statistics")
    stats = feat.FeatureStats.fit([raw[i] for i in train_ids])
    stats.save(out / "stats.json")
    for entry in manifest.entries:
        feat.save_features(out / f"{entry.id}.tff", stats.apply(raw[entry.id]))


# ---------------------------------------------------------------------------
# dataset assembly


def assemble_split(
    manifest_path,
    split: str,
    frame_feature_dir,
    mhi_feature_dir=None,
    expect_dim: int | None = None,
) -> ArrayDataset:
    """Build in-memory arrays for one split from persisted artifacts."""
    manifest_path = Path(manifest_path)
    manifest = vd.load_manifest(manifest_path)
    entries = manifest.subset(split)
    if not entries:
        raise InputError(f"manifest has no entries tagged {split!r}")
    frame_dir = Path(frame_feature_dir)
    feats, labels, transfer, mhis = [], [], [], []
    for entry in entries:
        seq = feat.load_features(frame_dir / f"{entry.id}.tff", expect_dim=expect_dim)
        feats.append(seq.values.astype(np.float64))
        record = vd.load_video(manifest_path.parent / entry.path)
        labels.append(record.stage_labels.astype(np.int64))
        transfer.append(record.transfer)
        if mhi_feature_dir is not None:
            mseq = feat.load_features(Path(mhi_feature_dir) / f"{entry.id}.tff", expect_dim=expect_dim)
            mhis.append(mseq.values.astype(np.float64))
    return ArrayDataset(
        ids=[e.id for e in entries],
        frame_feats=np.stack(feats),
        stage_labels=np.stack(labels),
        transfer=np.asarray(transfer, dtype=np.int64),
        mhi_feats=np.stack(mhis) if mhis else None,
    )


def _splits_for_run(config: dict):
    """(train, val, test) ArrayDatasets for the configured modality."""
    modality = config.get("modality", "frames")
    if modality not in MODALITY_CHOICES:
        raise ConfigError(f"modality must be one of {MODALITY_CHOICES}, got {modality!r}")
    manifest = config["data"]
    if modality == "frames":
        dirs = dict(frame_feature_dir=config["features"], mhi_feature_dir=None)
    elif modality == "mhi":
        dirs = dict(frame_feature_dir=config["mhi_features"], mhi_feature_dir=None)
    else:
        dirs = dict(frame_feature_dir=config["features"], mhi_feature_dir=config["mhi_features"])
    return tuple(assemble_split(manifest, split, **dirs) for split in SPLITS)


def _model_config_from(config: dict, sample: ArrayDataset) -> ModelConfig:
    model_cfg = ModelConfig.from_dict(config["model"])
    dim = sample.frame_feats.shape[2]
    use_mhi = config.get("modality", "frames") == "frames+mhi"
    mhi_dim = sample.mhi_feats.shape[2] if sample.mhi_feats is not None else model_cfg.mhi_feature_dim
    model_cfg = replace(model_cfg, frame_feature_dim=dim, mhi_feature_dim=mhi_dim, use_mhi=use_mhi)
    model_cfg.validate()
    return model_cfg


STEP_COLUMNS = ("step", "trans", "frame", "stage", "cross", "smooth", "total")


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])


def run_train(config: dict, out_dir, force: bool = False) -> dict:
    """Train from persisted artifacts; emits best.ckpt, last.ckpt, CSV logs."""
    train_set, val_set, _ = _splits_for_run(config)
    model_cfg = _model_config_from(config, train_set)
    train_cfg = TrainConfig.from_dict(config["train"])
    out = prepare_out_dir(out_dir, config, force)
    result = train(model_cfg, train_cfg, train_set, val_set)
    save_checkpoint(out / "best.ckpt", result.best)
    save_checkpoint(out / "last.ckpt", result.last)
    history_columns = list(result.history[0].keys())
    _write_csv(out / "history.csv", history_columns, result.history)
    _write_csv(out / "steps.csv", STEP_COLUMNS, result.steps)
    return {
        "best_epoch": result.best.epoch,
        "best_val_loss": result.best.val_loss,
        "epochs": len(result.history),
    }


def run_eval(config: dict, checkpoint_path, out_dir, force: bool = False) -> dict:
    """Evaluate a checkpoint on one split; writes metrics.json."""
    ckpt = load_checkpoint(checkpoint_path)
    split = config.get("split", "test")
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    datasets = dict(zip(SPLITS, _splits_for_run(config)))
    data = datasets[split]
    metrics = evaluate_model(ckpt, data)
    metrics["split"] = split
    metrics["checkpoint_epoch"] = ckpt.epoch
    out = prepare_out_dir(out_dir, config, force)
    (out / "metrics.json").write_text(canonical_json(metrics))
    return metrics


def run_sweep(config: dict, out_dir, force: bool = False) -> list[SweepPoint]:
    """Truncation sweep over video lengths; writes sweep.csv."""
    train_set, val_set, test_set = _splits_for_run(config)
    model_cfg = _model_config_from(config, train_set)
    train_cfg = TrainConfig.from_dict(config["train"])
    lengths = [int(x) for x in config["lengths"]]
    seeds = [int(s) for s in config["seeds"]]
    out = prepare_out_dir(out_dir, config, force)
    points = truncation_sweep(
        model_cfg,
        train_cfg,
        train_set,
        val_set,
        test_set,
        lengths,
        seeds,
        jobs=int(config.get("jobs", 1)),
        reuse_model=bool(config.get("reuse_model", False)),
    )
    rows = [
        {
            "length": p.length,
            "mean_acc": p.mean_accuracy,
            "std_acc": p.std_accuracy,
            **{f"seed{s}": v for s, v in zip(seeds, p.per_seed)},
        }
        for p in points
    ]
    _write_csv(out / "sweep.csv", list(rows[0].keys()), rows)
    return points


# ---------------------------------------------------------------------------
# statistics + plotting


def _read_runs_csv(path) -> list[float]:
    """One metric value per line; a 'value' column is honored if present."""
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and row[0].strip()]
    if not rows:
        raise InputError(f"{path}: no metric values found")
    header = [c.strip().lower() for c in rows[0]]
    if "value" in header:
        col = header.index("value")
        body = rows[1:]
    else:
        col = 0
        body = rows
    values = []
    for row in body:
        try:
            values.append(float(row[col]))
        except ValueError:
            if values or row is not body[0]:
                raise InputError(f"{path}: non-numeric value {row[col]!r}") from None
            # a plain header line on a single-column file is tolerated
    if not values:
        raise InputError(f"{path}: no metric values found")
    return values


def stats_compare(config: dict, runs_a_path, runs_b_path, out_dir, force: bool = False) -> dict:
    """Paired comparison of two per-seed metric files."""
    a = _read_runs_csv(runs_a_path)
    b = _read_runs_csv(runs_b_path)
    if len(a) != len(b):
        raise InputError(f"paired runs differ in length: {len(a)} vs {len(b)}")
    diffs = np.asarray(a) - np.asarray(b)
    report = {
        "n": len(a),
        "mean_a": float(np.mean(a)),
        "mean_b": float(np.mean(b)),
        "wilcoxon_p_two_sided": wilcoxon_signed_rank_exact(diffs, two_sided=True),
        "cohens_d": cohens_d(a, b),
    }
    out = prepare_out_dir(out_dir, config, force)
    (out / "stats.json").write_text(canonical_json(report))
    return report


def plot_sweep(sweep_csv, out_dir, config: dict | None = None, force: bool = False) -> Path:
    """Mean accuracy vs video length with a std band, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lengths, means, stds = [], [], []
    with open(sweep_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            lengths.append(int(row["length"]))
            means.append(float(row["mean_acc"]))
            stds.append(float(row["std_acc"]))
    if not lengths:
        raise InputError(f"{sweep_csv}: empty sweep file")
    out = prepare_out_dir(out_dir, config or {"sweep": str(sweep_csv)}, force)
    means_arr, stds_arr = np.asarray(means), np.asarray(stds)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(lengths, 100 * means_arr, marker="o", color="#1f6fb2")
    ax.fill_between(lengths, 100 * (means_arr - stds_arr), 100 * (means_arr + stds_arr), alpha=0.25, color="#1f6fb2")
    ax.set_xlabel("input video length (frames)")
    ax.set_ylabel("transferability accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out / "sweep.svg"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path

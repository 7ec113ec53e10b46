"""Annotated embryo-video data model and a synthetic desk-scale generator.

Stage labels (11 classes):
    0..8   stable stages, visible cell count 1..9+ (label = count - 1, capped)
    9      cleavage event (a cell is dividing)
    10     developmental arrest

A video is transferable (label 1) unless its stage sequence shows an
anomaly or under-development; see ``transfer_label_from_stages``.

Videos persist in the TFV1 binary format: a 16-byte header (magic
``TFV1``, u32 little-endian width, height, frame count) followed by the
raw 8-bit frames, the per-frame stage labels (one byte each) and a
single transfer byte. Manifests are JSON lines, one entry per line.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    ConfigError,
    InsufficientInputError,
    ParseError,
    StratificationError,
    ValidationError,
)
from .rng import generator

__all__ = [
    "NUM_STAGES",
    "CLEAVAGE_STAGE",
    "ARREST_STAGE",
    "MAX_COUNT_STAGE",
    "TRANSFERABLE_MIN_STAGE",
    "Segment",
    "VideoRecord",
    "GenConfig",
    "ManifestEntry",
    "DatasetManifest",
    "segments_from_framewise",
    "expand_segments",
    "transfer_label_from_stages",
    "generate_synthetic_video",
    "split_dataset",
    "save_video",
    "load_video",
    "save_manifest",
    "load_manifest",
]

NUM_STAGES = 11
CLEAVAGE_STAGE = 9
ARREST_STAGE = 10
MAX_COUNT_STAGE = 8  # "9+ cells"
TRANSFERABLE_MIN_STAGE = 7  # 8 cells must be reached for a normal video

VIDEO_MAGIC = b"TFV1"


class Segment(NamedTuple):
    """Maximal run of identically labeled frames, end exclusive."""

    start: int
    end: int
    label: int


@dataclass
class VideoRecord:
    id: str
    frames: np.ndarray  # (T, H, W) uint8
    stage_labels: np.ndarray  # (T,) uint8
    transfer: int  # 1 = transferable, 0 = not

    def validate(self) -> None:
        if self.frames.ndim != 3 or self.frames.dtype != np.uint8:
            raise ValidationError(f"frames must be (T,H,W) uint8, got {self.frames.shape} {self.frames.dtype}")
        if self.stage_labels.shape != (self.frames.shape[0],):
            raise ValidationError("stage_labels length must equal frame count")
        if self.stage_labels.min(initial=0) < 0 or self.stage_labels.max(initial=0) >= NUM_STAGES:
            raise ValidationError("stage labels out of [0, 10]")
        if self.transfer not in (0, 1):
            raise ValidationError(f"transfer label must be 0 or 1, got {self.transfer}")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, VideoRecord)
            and self.id == other.id
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.stage_labels, other.stage_labels)
            and self.transfer == other.transfer
        )


def segments_from_framewise(stage_labels) -> list[Segment]:
    """Decompose a label sequence into maximal constant runs."""
    labels = np.asarray(stage_labels)
    if labels.size == 0:
        raise InsufficientInputError("cannot segment an empty label sequence")
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [labels.size]))
    return [Segment(int(s), int(e), int(labels[s])) for s, e in zip(starts, ends)]


def expand_segments(segments: list[Segment]) -> np.ndarray:
    """Inverse of ``segments_from_framewise``."""
    if not segments:
        raise InsufficientInputError("cannot expand an empty segment list")
    total = segments[-1].end
    out = np.empty(total, dtype=np.int64)
    for seg in segments:
        out[seg.start : seg.end] = seg.label
    return out


def transfer_label_from_stages(stage_labels) -> int:
    """Recompute the transferability label from a stage sequence.

    A video is not transferable (0) iff any of:
      * an arrest frame occurs;
      * consecutive stable stages jump by >= 2 cells (direct cleavage);
      * the highest stable stage stays below 8 cells (under-development).
    """
    labels = np.asarray(stage_labels)
    if labels.size == 0:
        raise InsufficientInputError("empty stage sequence")
    if np.any(labels == ARREST_STAGE):
        return 0
    stable = [seg.label for seg in segments_from_framewise(labels) if seg.label <= MAX_COUNT_STAGE]
    if not stable:
        return 0
    if any(b - a >= 2 for a, b in zip(stable, stable[1:])):
        return 0
    if max(stable) < TRANSFERABLE_MIN_STAGE:
        return 0
    return 1


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the synthetic embryo-video generator.

    ``anomaly_onset_frac`` forces injected anomalies (arrest / direct
    cleavage) to start at or after that fraction of the video; 0 allows
    them anywhere. ``speed_jitter`` is the half-width of the per-video
    log-uniform duration multiplier, which is what produces naturally
    under-developed (slow) videos.
    """

    num_frames: int = 60
    frame_size: int = 64
    p_anomaly: float = 0.5
    anomaly_onset_frac: float = 0.0
    p_slow: float = 0.06
    slow_factor: tuple[float, float] = (1.8, 1.8)
    stable_frames: tuple[int, int] = (3, 5)
    cleavage_frames: tuple[int, int] = (1, 3)
    speed_jitter: float = 0.15
    noise_sigma: float = 5.0

    def validate(self) -> None:
        if self.num_frames < 15:
            raise ConfigError(f"num_frames must be >= 15, got {self.num_frames}")
        if self.frame_size < 32 or self.frame_size % 16 != 0:
            raise ConfigError(f"frame_size must be >= 32 and a multiple of 16, got {self.frame_size}")
        if not 0.0 <= self.p_anomaly <= 1.0:
            raise ConfigError(f"p_anomaly must be in [0, 1], got {self.p_anomaly}")
        if not 0.0 <= self.anomaly_onset_frac < 1.0:
            raise ConfigError(f"anomaly_onset_frac must be in [0, 1), got {self.anomaly_onset_frac}")
        if not 0.0 <= self.p_slow <= 1.0:
            raise ConfigError(f"p_slow must be in [0, 1], got {self.p_slow}")
        if self.slow_factor[0] < 1.0 or self.slow_factor[0] > self.slow_factor[1]:
            raise ConfigError(f"bad slow_factor range {self.slow_factor}")
        if self.stable_frames[0] < 1 or self.stable_frames[0] > self.stable_frames[1]:
            raise ConfigError(f"bad stable_frames range {self.stable_frames}")
        if self.cleavage_frames[0] < 1 or self.cleavage_frames[0] > self.cleavage_frames[1]:
            raise ConfigError(f"bad cleavage_frames range {self.cleavage_frames}")
        if self.speed_jitter < 0 or self.noise_sigma < 0:
            raise ConfigError("speed_jitter and noise_sigma must be >= 0")


class _Seg(NamedTuple):
    stage: int
    dur: int
    count: int  # visible cell count while this segment plays
    children: int  # for cleavage segments: how many daughters appear
    irregular: bool  # abnormal morphology persists after a direct cleavage


def _build_stage_plan(rng: np.random.Generator, cfg: GenConfig, speed: float) -> list[_Seg]:
    """Sample the symbolic segment sequence (stage, duration, cell count)."""
    T = cfg.num_frames
    anomaly = None
    onset = T
    if rng.random() < cfg.p_anomaly:
        anomaly = "arrest" if rng.random() < 0.5 else "direct"
        lo = max(1, int(math.ceil(cfg.anomaly_onset_frac * T)))
        onset = int(rng.integers(lo, max(lo + 1, T - 2)))

    def stable_dur() -> int:
        lo, hi = cfg.stable_frames
        return max(1, int(round(rng.uniform(lo, hi) * speed)))

    def cleave_dur() -> int:
        lo, hi = cfg.cleavage_frames
        return max(1, int(round(rng.uniform(lo, hi) * speed)))

    plan: list[_Seg] = []
    t = 0
    count = 1
    direct_pending = anomaly == "direct"
    irregular = False
    while t < T:
        if anomaly == "arrest" and t >= onset:
            plan.append(_Seg(ARREST_STAGE, T - t, count, 0, irregular))
            t = T
            break
        d = stable_dur()
        if count >= 9:
            d = T - t  # development complete, hold 9+ until the end
        if direct_pending and count >= 7:
            d = max(d, onset - t)  # hold so the jump stays below the 9+ cap
        if anomaly == "arrest":
            d = min(d, max(1, onset - t))
        d = min(d, T - t)
        plan.append(_Seg(min(count, 9) - 1, d, count, 0, irregular))
        t += d
        if t >= T:
            break
        if anomaly == "arrest" and t >= onset:
            continue
        jump = 1
        if direct_pending and t >= onset and count <= 7:
            jump = int(rng.integers(2, 4))
            direct_pending = False
            irregular = True  # direct cleavage leaves abnormal blastomeres
        d = min(cleave_dur(), T - t)
        plan.append(_Seg(CLEAVAGE_STAGE, d, count, 1 + jump, irregular))
        t += d
        count += jump
    return plan


def _cell_layout(size: int, count: int, base_angle: float) -> tuple[np.ndarray, float]:
    """Disk centers and radius for ``count`` visible cells."""
    disp = min(count, 9)
    embryo_r = 0.38 * size
    cell_r = 0.90 * embryo_r / math.sqrt(disp)
    centers = []
    cx = cy = size / 2.0
    ring = disp
    if disp == 1:
        centers.append((cx, cy))
        ring = 0
    elif disp > 6:
        centers.append((cx, cy))
        ring = disp - 1
    rho = max(0.0, embryo_r - 1.05 * cell_r)
    for j in range(ring):
        a = base_angle + 2.0 * math.pi * j / ring
        centers.append((cx + rho * math.cos(a), cy + rho * math.sin(a)))
    return np.array(centers, dtype=np.float64), cell_r


def _paint_disks(canvas: np.ndarray, grid, centers: np.ndarray, radius, value: float) -> None:
    yy, xx = grid
    radii = np.broadcast_to(np.asarray(radius, dtype=np.float64), (len(centers),))
    for (cx, cy), r in zip(centers, radii):
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
        np.maximum(canvas, value, out=canvas, where=inside)


def _cell_radii(cell_r: float, count: int, irregular: bool) -> np.ndarray:
    """Uniform radii normally; alternating over/under-sized blastomeres
    after a direct cleavage."""
    if not irregular:
        return np.full(count, cell_r)
    scale = np.where(np.arange(count) % 2 == 0, 1.3, 0.6)
    return cell_r * scale


def _render_video(rng: np.random.Generator, cfg: GenConfig, plan: list[_Seg]) -> np.ndarray:
    size = cfg.num_frames, cfg.frame_size, cfg.frame_size
    T, H, W = size
    frames = np.empty(size, dtype=np.uint8)
    grid = np.ogrid[0:H, 0:W]
    yy, xx = grid
    base_angle = rng.uniform(0.0, 2.0 * math.pi)
    embryo_r = 0.38 * W
    halo = ((xx - W / 2.0) ** 2 + (yy - H / 2.0) ** 2) <= embryo_r**2

    t = 0
    arrest_elapsed = 0
    for seg in plan:
        centers, cell_r = _cell_layout(W, seg.count, base_angle)
        radii = _cell_radii(cell_r, len(centers), seg.irregular)
        split_idx = int(rng.integers(0, len(centers))) if seg.stage == CLEAVAGE_STAGE else 0
        split_angle = rng.uniform(0.0, 2.0 * math.pi)
        for j in range(seg.dur):
            canvas = np.full((H, W), 30.0)
            canvas[halo] = 50.0
            if seg.stage == ARREST_STAGE:
                # arrested embryos dim away instead of dividing
                fade = max(0.35, 0.95 ** (arrest_elapsed + j))
                _paint_disks(canvas, grid, centers, radii, 50.0 + 90.0 * fade)
            elif seg.stage == CLEAVAGE_STAGE:
                keep = np.delete(centers, split_idx, axis=0)
                keep_r = np.delete(radii, split_idx)
                _paint_disks(canvas, grid, keep, keep_r, 140.0)
                # the dividing cell splits into separating daughters;
                # direct cleavages split three ways and shine brighter
                mx, my = centers[split_idx]
                prog = j / max(1, seg.dur - 1) if seg.dur > 1 else 1.0
                off = cell_r * (0.25 + 0.85 * prog)
                kid_r = cell_r / math.sqrt(seg.children)
                kids = []
                for c in range(seg.children):
                    a = split_angle + 2.0 * math.pi * c / seg.children
                    kids.append((mx + off * math.cos(a), my + off * math.sin(a)))
                value = 185.0 if seg.children == 2 else 215.0
                _paint_disks(canvas, grid, np.array(kids), kid_r, value)
            else:
                _paint_disks(canvas, grid, centers, radii, 140.0)
            noisy = canvas + rng.normal(0.0, cfg.noise_sigma, (H, W))
            frames[t] = np.clip(noisy, 0.0, 255.0).astype(np.uint8)
            t += 1
        if seg.stage == ARREST_STAGE:
            arrest_elapsed += seg.dur
    assert t == T
    return frames


def generate_synthetic_video(seed: int, cfg: GenConfig, video_id: str | None = None) -> VideoRecord:
    """Deterministically synthesize one annotated embryo video."""
    cfg.validate()
    rng = generator(seed)
    speed = math.exp(rng.uniform(-cfg.speed_jitter, cfg.speed_jitter))
    if rng.random() < cfg.p_slow:
        speed *= rng.uniform(*cfg.slow_factor)  # stalls short of the 8-cell stage
    plan = _build_stage_plan(rng, cfg, speed)
    labels = np.concatenate([np.full(seg.dur, seg.stage, dtype=np.uint8) for seg in plan])
    frames = _render_video(rng, cfg, plan)
    record = VideoRecord(
        id=video_id if video_id is not None else f"synth{seed:08d}",
        frames=frames,
        stage_labels=labels,
        transfer=transfer_label_from_stages(labels),
    )
    record.validate()
    return record


# ---------------------------------------------------------------------------
# manifests and splits


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    transfer: int
    num_frames: int
    split: str = ""


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def validate(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate video ids in manifest: {dupes}")
        for e in self.entries:
            if e.transfer not in (0, 1):
                raise ValidationError(f"entry {e.id}: bad transfer label {e.transfer}")
            if e.split not in ("", "train", "val", "test"):
                raise ValidationError(f"entry {e.id}: unknown split tag {e.split!r}")

    def subset(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def _largest_remainder(total: int, ratios: tuple[float, ...]) -> list[int]:
    raw = [r * total for r in ratios]
    sizes = [int(math.floor(x)) for x in raw]
    remainders = [x - s for x, s in zip(raw, sizes)]
    leftover = total - sum(sizes)
    # ties go to the earlier split (train before val before test)
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split_dataset(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float],
    seed: int,
) -> DatasetManifest:
    """Assign train/val/test tags, stratified by the transfer label.

    Split sizes follow largest-remainder rounding of the ratios over the
    whole manifest; within that, each class is apportioned by largest
    remainder too, so per-split class fractions track the global one as
    closely as integer counts allow. Deterministic given (manifest,
    ratios, seed).
    """
    manifest.validate()
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if min(ratios) < 0:
        raise ConfigError(f"split ratios must be >= 0, got {ratios}")
    names = ("train", "val", "test")
    total = len(manifest.entries)
    sizes = _largest_remainder(total, ratios)
    for name, ratio, size in zip(names, ratios, sizes):
        if ratio > 0 and size == 0:
            raise StratificationError(
                f"{total} entries are too few to give the {name} split (ratio {ratio}) any videos"
            )

    by_class: dict[int, list[ManifestEntry]] = {0: [], 1: []}
    for entry in sorted(manifest.entries, key=lambda e: e.id):
        by_class[entry.transfer].append(entry)
    # class 0 by largest remainder, class 1 forced by the split-size totals
    alloc0 = _largest_remainder(len(by_class[0]), ratios)
    if sum(alloc0) != len(by_class[0]):  # pragma: no cover - arithmetic guard
        raise StratificationError("class allocation does not cover all entries")
    alloc1 = [s - a for s, a in zip(sizes, alloc0)]
    if min(alloc1) < 0:
        raise StratificationError("class balance too skewed for the requested ratios")

    rng = generator(seed, "split")
    tagged: list[ManifestEntry] = []
    for cls, alloc in ((0, alloc0), (1, alloc1)):
        entries = by_class[cls]
        order = rng.permutation(len(entries))
        cursor = 0
        for name, take in zip(names, alloc):
            for k in range(take):
                tagged.append(replace(entries[order[cursor + k]], split=name))
            cursor += take
    by_id = {e.id: e for e in tagged}
    out = DatasetManifest([by_id[e.id] for e in manifest.entries])
    out.validate()
    return out


def save_manifest(path, manifest: DatasetManifest) -> None:
    manifest.validate()
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            row = {
                "id": e.id,
                "path": e.path,
                "transfer": "T" if e.transfer else "NT",
                "num_frames": e.num_frames,
                "split": e.split,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno} is not valid JSON: {exc}") from exc
            try:
                entries.append(
                    ManifestEntry(
                        id=str(row["id"]),
                        path=str(row["path"]),
                        transfer=1 if row["transfer"] == "T" else 0,
                        num_frames=int(row["num_frames"]),
                        split=str(row.get("split", "")),
                    )
                )
            except KeyError as exc:
                raise ParseError(f"{path}: line {lineno} misses field {exc}") from exc
    manifest = DatasetManifest(entries)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# TFV1 container


def save_video(path, record: VideoRecord) -> None:
    record.validate()
    T, H, W = record.frames.shape
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<III", W, H, T))
        fh.write(record.frames.tobytes())
        fh.write(record.stage_labels.astype(np.uint8).tobytes())
        fh.write(struct.pack("B", record.transfer))


def load_video(path) -> VideoRecord:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise ParseError(f"{path}: truncated header", offset=len(blob))
    if blob[:4] != VIDEO_MAGIC:
        raise ParseError(f"{path}: bad magic {blob[:4]!r}", offset=0)
    W, H, T = struct.unpack("<III", blob[4:16])
    expected = 16 + T * H * W + T + 1
    if len(blob) != expected:
        raise ParseError(
            f"{path}: expected {expected} bytes for {T} frames of {H}x{W}, found {len(blob)}",
            offset=min(len(blob), expected),
        )
    frames = np.frombuffer(blob, dtype=np.uint8, count=T * H * W, offset=16).reshape(T, H, W)
    labels = np.frombuffer(blob, dtype=np.uint8, count=T, offset=16 + T * H * W)
    transfer = blob[-1]
    if transfer not in (0, 1):
        raise ParseError(f"{path}: transfer byte must be 0/1, got {transfer}", offset=len(blob) - 1)
    record = VideoRecord(
        id=Path(path).stem,
        frames=frames.copy(),
        stage_labels=labels.copy(),
        transfer=int(transfer),
    )
    try:
        record.validate()
    except ValidationError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return record

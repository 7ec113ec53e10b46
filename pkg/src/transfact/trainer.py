"""Training loop: AdamW with decoupled weight decay, linear learning-rate
warm-up, per-epoch validation, best-checkpoint selection.

Everything is deterministic given the seed: shuffling is a pure function
of (seed, epoch), batches reduce in a fixed order, and the optimizer
walks parameters in sorted-name order. Resuming from a checkpoint
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .errors import ConfigError, FormatVersionError, NumericError, ParseError
from .losses import (
    LossWeights,
    cross_att_nll,
    frame_nll,
    match_batch,
    smooth_penalty,
    stage_nll,
    trans_nll,
)
from .model import ModelConfig, Parameters, backward, forward_batch, init_model
from .rng import generator

__all__ = [
    "TrainConfig",
    "ArrayDataset",
    "Checkpoint",
    "TrainResult",
    "AdamW",
    "warmup_lr",
    "train",
    "evaluate_losses",
    "save_checkpoint",
    "load_checkpoint",
    "config_fingerprint",
]

CHECKPOINT_MAGIC = b"TFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    warmup_steps: int = 200
    epochs: int = 50
    batch_size: int = 32
    weight_decay: float = 1e-4
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ConfigError("warmup_steps and weight_decay must be >= 0")
        self.loss_weights.validate()

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["loss_weights"] = dict(self.loss_weights.__dict__)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss_weights"] = LossWeights.from_dict(d.get("loss_weights", {}))
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class ArrayDataset:
    """In-memory dataset: aligned per-video arrays for one split."""

    ids: list[str]
    frame_feats: np.ndarray  # (V, T, D)
    stage_labels: np.ndarray  # (V, T) int
    transfer: np.ndarray  # (V,) int
    mhi_feats: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def truncated(self, length: int) -> "ArrayDataset":
        """Prefix of every video (labels and features truncated together)."""
        if not 1 <= length <= self.frame_feats.shape[1]:
            raise ConfigError(f"truncation length {length} outside [1, {self.frame_feats.shape[1]}]")
        return ArrayDataset(
            ids=self.ids,
            frame_feats=self.frame_feats[:, :length],
            stage_labels=self.stage_labels[:, :length],
            transfer=self.transfer,
            mhi_feats=None if self.mhi_feats is None else self.mhi_feats[:, :length],
        )


def warmup_lr(step: int, config: TrainConfig) -> float:
    """Linear warm-up to the base rate, then constant."""
    if config.warmup_steps <= 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, step / config.warmup_steps)


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Update (t starting at 1):
        m = b1 m + (1-b1) g          v = b2 v + (1-b2) g^2
        p = p - lr (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps) - lr wd p
    """

    def __init__(self, params: Parameters, config: TrainConfig):
        self.params = params
        self.weight_decay = config.weight_decay
        self.beta1, self.beta2, self.eps = config.beta1, config.beta2, config.eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in sorted(self.params):
            p = self.params[k]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps)) - lr * self.weight_decay * p.data


# ---------------------------------------------------------------------------
# loss evaluation shared by train and validation


def _batch_losses(params: Parameters, model_cfg: ModelConfig, batch: ArrayDataset):
    """Forward a batch and return per-video loss tensors plus predictions."""
    out = forward_batch(
        params,
        model_cfg,
        batch.frame_feats,
        batch.mhi_feats if model_cfg.use_mhi else None,
    )
    token_targets, frame_idx, _ = match_batch(
        out.token_logp[-1].data, out.attn_s2f[-1].data, batch.stage_labels, model_cfg.num_stages
    )
    terms = {
        "trans": trans_nll(out.trans_logp, batch.transfer),
        "frame": frame_nll(out.frame_logp, batch.stage_labels),
        "stage": stage_nll(out.token_logp, token_targets),
        "cross": cross_att_nll(out.attn_s2f, out.attn_f2s, frame_idx),
        "smooth": smooth_penalty(out.frame_logp),
    }
    trans_pred = np.argmax(out.trans_logp[-1].data, axis=1)
    stage_pred = np.argmax(out.frame_logp[-1].data, axis=2)
    return out, terms, trans_pred, stage_pred


def _weighted(terms: dict, weights: LossWeights):
    return (
        terms["trans"] * weights.trans
        + terms["frame"] * weights.frame
        + terms["stage"] * weights.stage
        + terms["cross"] * weights.cross
        + terms["smooth"] * weights.smooth
    )


def _slice(ds: ArrayDataset, idx: np.ndarray) -> ArrayDataset:
    return ArrayDataset(
        ids=[ds.ids[i] for i in idx],
        frame_feats=ds.frame_feats[idx],
        stage_labels=ds.stage_labels[idx],
        transfer=ds.transfer[idx],
        mhi_feats=None if ds.mhi_feats is None else ds.mhi_feats[idx],
    )


def evaluate_losses(params: Parameters, model_cfg: ModelConfig, data: ArrayDataset, weights: LossWeights, batch_size: int = 32) -> dict:
    """Mean per-video loss terms plus accuracies over a whole split."""
    sums = {k: 0.0 for k in ("trans", "frame", "stage", "cross", "smooth", "total")}
    correct = 0
    stage_correct = 0
    stage_total = 0
    with no_grad():
        for start in range(0, len(data), batch_size):
            batch = _slice(data, np.arange(start, min(start + batch_size, len(data))))
            _, terms, trans_pred, stage_pred = _batch_losses(params, model_cfg, batch)
            for k in ("trans", "frame", "stage", "cross", "smooth"):
                sums[k] += float(terms[k].data.sum())
            sums["total"] += float(_weighted(terms, weights).data.sum())
            correct += int((trans_pred == batch.transfer).sum())
            stage_correct += int((stage_pred == batch.stage_labels).sum())
            stage_total += batch.stage_labels.size
    n = len(data)
    report = {k: v / n for k, v in sums.items()}
    report["transfer_accuracy"] = correct / n
    report["stage_accuracy"] = stage_correct / stage_total
    return report


# ---------------------------------------------------------------------------
# checkpoints


def config_fingerprint(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    payload = json.dumps(
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_step: int
    epoch: int
    val_loss: float
    fingerprint: str

    def to_parameters(self) -> Parameters:
        from .autodiff import Tensor

        return {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.params)
    header = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": ckpt.fingerprint,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "opt_step": ckpt.opt_step,
        "params": [[n, list(ckpt.params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for group in (ckpt.params, ckpt.opt_m, ckpt.opt_v):
            for n in names:
                fh.write(np.ascontiguousarray(group[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ParseError(f"{path}: truncated checkpoint", offset=len(raw))
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}", offset=0)
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise FormatVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < 16 + header_len:
        raise ParseError(f"{path}: truncated header", offset=len(raw))
    try:
        header = json.loads(raw[16 : 16 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt header: {exc}", offset=16) from exc
    names = [n for n, _ in header["params"]]
    shapes = {n: tuple(s) for n, s in header["params"]}
    total = sum(int(np.prod(shapes[n])) for n in names)
    expected = 16 + header_len + 3 * 8 * total
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(raw)}", offset=min(len(raw), expected))
    offset = 16 + header_len
    groups = []
    for _ in range(3):
        group = {}
        for n in names:
            size = int(np.prod(shapes[n]))
            data = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shapes[n])
            group[n] = data.copy()
            offset += 8 * size
        groups.append(group)
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        params=groups[0],
        opt_m=groups[1],
        opt_v=groups[2],
        opt_step=int(header["opt_step"]),
        epoch=int(header["epoch"]),
        val_loss=float(header["val_loss"]),
        fingerprint=header["fingerprint"],
    )


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]
    steps: list[dict]


def _make_checkpoint(model_cfg, train_cfg, params, opt: AdamW, epoch: int, val_loss: float) -> Checkpoint:
    return Checkpoint(
        model_config=model_cfg,
        train_config=train_cfg,
        params={k: p.data.copy() for k, p in params.items()},
        opt_m={k: v.copy() for k, v in opt.m.items()},
        opt_v={k: v.copy() for k, v in opt.v.items()},
        opt_step=opt.t,
        epoch=epoch,
        val_loss=val_loss,
        fingerprint=config_fingerprint(model_cfg, train_cfg),
    )


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: ArrayDataset,
    val_set: ArrayDataset,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Full training run; returns the lowest-validation-loss checkpoint.

    With ``resume``, continues after the checkpoint's epoch and reproduces
    the uninterrupted run exactly (shuffling depends only on seed and
    epoch, and the optimizer state rides along in the checkpoint).
    """
    model_cfg.validate()
    train_cfg.validate()
    fingerprint = config_fingerprint(model_cfg, train_cfg)
    if resume is not None:
        if resume.fingerprint != fingerprint:
            raise FormatVersionError(
                f"checkpoint fingerprint {resume.fingerprint[:12]} does not match configured {fingerprint[:12]}"
            )
        params = resume.to_parameters()
        opt = AdamW(params, train_cfg)
        opt.t = resume.opt_step
        opt.m = {k: v.copy() for k, v in resume.opt_m.items()}
        opt.v = {k: v.copy() for k, v in resume.opt_v.items()}
        start_epoch = resume.epoch + 1
        best: Checkpoint | None = resume if math.isfinite(resume.val_loss) else None
    else:
        params = init_model(model_cfg, train_cfg.seed)
        opt = AdamW(params, train_cfg)
        start_epoch = 1
        best = None

    weights = train_cfg.loss_weights
    history: list[dict] = []
    steps: list[dict] = []
    last: Checkpoint | None = None
    for epoch in range(start_epoch, train_cfg.epochs + 1):
        order = generator(train_cfg.seed, f"shuffle:{epoch}").permutation(len(train_set))
        train_sums = {k: 0.0 for k in ("trans", "frame", "stage", "cross", "smooth", "total")}
        for batch_no, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            batch = _slice(train_set, order[start : start + train_cfg.batch_size])
            _, terms, _, _ = _batch_losses(params, model_cfg, batch)
            per_video_total = _weighted(terms, weights)
            loss = per_video_total.mean()
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {batch_no} (videos {batch.ids[:4]}...)"
                )
            backward(params, loss)
            lr = warmup_lr(opt.t, train_cfg)
            opt.step(lr)
            row = {"step": opt.t, "epoch": epoch, "lr": lr}
            for k in ("trans", "frame", "stage", "cross", "smooth"):
                row[k] = float(terms[k].data.mean())
                train_sums[k] += float(terms[k].data.sum())
            row["total"] = float(loss.data)
            train_sums["total"] += float(per_video_total.data.sum())
            steps.append(row)
        val_report = evaluate_losses(params, model_cfg, val_set, weights, train_cfg.batch_size)
        record = {"epoch": epoch}
        for k, v in train_sums.items():
            record[f"train_{k}"] = v / len(train_set)
        for k, v in val_report.items():
            record[f"val_{k}"] = v
        history.append(record)
        last = _make_checkpoint(model_cfg, train_cfg, params, opt, epoch, val_report["total"])
        if best is None or val_report["total"] < best.val_loss:
            best = last
    assert last is not None and best is not None
    return TrainResult(best=best, last=last, history=history, steps=steps)

"""Classification metrics, multi-seed aggregation, exact nonparametric
comparison statistics, and the video-length truncation sweep.

The Wilcoxon signed-rank test is exact: the null distribution of the
positive rank sum is enumerated over all 2^n sign patterns (as a subset-
sum count, so ties in |difference| with average ranks are handled), and
p-values are exact dyadic rationals -- no normal approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, InputError
from .model import ModelConfig
from .trainer import ArrayDataset, Checkpoint, TrainConfig, evaluate_losses, train

__all__ = [
    "ConfusionCounts",
    "PRF1",
    "RunAggregate",
    "confusion_counts",
    "prf1",
    "accuracy",
    "aggregate_runs",
    "wilcoxon_signed_rank_exact",
    "cohens_d",
    "evaluate_model",
    "truncation_sweep",
    "SweepPoint",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total


@dataclass(frozen=True)
class PRF1:
    precision: float
    recall: float
    f1: float
    degenerate: bool  # a zero denominator was coerced to 0


def confusion_counts(preds, labels, positive_class) -> ConfusionCounts:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise InputError(f"predictions {preds.shape} and labels {labels.shape} must be equal-length and non-empty")
    pp = preds == positive_class
    lp = labels == positive_class
    return ConfusionCounts(
        tp=int(np.sum(pp & lp)),
        fp=int(np.sum(pp & ~lp)),
        tn=int(np.sum(~pp & ~lp)),
        fn=int(np.sum(~pp & lp)),
    )


def prf1(preds, labels, positive_class) -> PRF1:
    """Precision, recall and F1 for one class; zero denominators yield 0
    with the degenerate flag set."""
    c = confusion_counts(preds, labels, positive_class)
    degenerate = False
    if c.tp + c.fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = c.tp / (c.tp + c.fp)
    if c.tp + c.fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = c.tp / (c.tp + c.fn)
    if precision + recall == 0.0:
        f1, degenerate = 0.0, True
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return PRF1(precision=precision, recall=recall, f1=f1, degenerate=degenerate)


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise InputError("predictions and labels must be equal-length and non-empty")
    return float(np.mean(preds == labels))


@dataclass(frozen=True)
class RunAggregate:
    metric: str
    values: tuple[float, ...]
    mean: float
    std: float  # sample standard deviation (n-1)


def aggregate_runs(values, metric: str = "") -> RunAggregate:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InputError("cannot aggregate zero runs")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return RunAggregate(metric=metric, values=tuple(float(v) for v in arr), mean=float(arr.mean()), std=std)


# ---------------------------------------------------------------------------
# comparison statistics


def wilcoxon_signed_rank_exact(differences, two_sided: bool = True) -> float:
    """Exact signed-rank p-value by full enumeration of sign patterns.

    Zero differences are dropped (the test's original convention); ties in
    |difference| receive average ranks. The two-sided p doubles the smaller
    tail of the exact null distribution of the positive rank sum; the
    one-sided variant tests for a positive shift.
    """
    d = np.asarray(differences, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise InputError("differences must be finite")
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise InputError("all differences are zero; the signed-rank test is undefined")
    if n > 20:
        raise InputError(f"exact enumeration supports n <= 20, got {n}")
    ranks = rankdata(np.abs(d))
    doubled = np.rint(2.0 * ranks).astype(np.int64)  # average ranks are half-integers
    observed = int(np.rint(2.0 * ranks[d > 0.0].sum()))
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:  # subset-sum distribution over all 2^n sign patterns
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    denom = float(2**n)
    upper = float(counts[observed:].sum()) / denom
    lower = float(counts[: observed + 1].sum()) / denom
    if two_sided:
        return min(1.0, 2.0 * min(upper, lower))
    return upper


def cohens_d(sample_a, sample_b) -> float:
    """Pooled-standard-deviation effect size (mean_a - mean_b) / s_pooled,
    with s_pooled = sqrt((s_a^2 + s_b^2) / 2) on sample variances."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InputError("both samples need at least two values")
    diff = float(a.mean() - b.mean())
    pooled = math.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2.0)
    if pooled == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / pooled


# ---------------------------------------------------------------------------
# model evaluation and truncation sweep


def evaluate_model(ckpt: Checkpoint, data: ArrayDataset) -> dict:
    """Test-split metrics report for a trained checkpoint."""
    params = ckpt.to_parameters()
    report = evaluate_losses(params, ckpt.model_config, data, ckpt.train_config.loss_weights)
    from .autodiff import no_grad
    from .model import forward_batch

    preds = np.empty(len(data), dtype=np.int64)
    with no_grad():
        for start in range(0, len(data), 32):
            idx = np.arange(start, min(start + 32, len(data)))
            out = forward_batch(
                params,
                ckpt.model_config,
                data.frame_feats[idx],
                data.mhi_feats[idx] if ckpt.model_config.use_mhi and data.mhi_feats is not None else None,
            )
            preds[idx] = np.argmax(out.trans_logp[-1].data, axis=1)
    metrics: dict = {
        "num_videos": len(data),
        "accuracy": accuracy(preds, data.transfer),
        "stage_accuracy": report["stage_accuracy"],
        "losses": {k: report[k] for k in ("trans", "frame", "stage", "cross", "smooth", "total")},
        "per_class": {},
    }
    for name, positive in (("T", 1), ("NT", 0)):
        stats = prf1(preds, data.transfer, positive)
        metrics["per_class"][name] = {
            "precision": stats.precision,
            "recall": stats.recall,
            "f1": stats.f1,
            "degenerate": stats.degenerate,
        }
    return metrics


@dataclass(frozen=True)
class SweepPoint:
    length: int
    mean_accuracy: float
    std_accuracy: float
    per_seed: tuple[float, ...]


def _sweep_task(args):
    model_cfg_d, train_cfg_d, train_set, val_set, test_set, length, seed, reuse = args
    model_cfg = ModelConfig.from_dict(model_cfg_d)
    train_cfg = replace(TrainConfig.from_dict(train_cfg_d), seed=seed)
    if reuse:
        result = train(model_cfg, train_cfg, train_set, val_set)
    else:
        result = train(model_cfg, train_cfg, train_set.truncated(length), val_set.truncated(length))
    metrics = evaluate_model(result.best, test_set.truncated(length))
    return length, seed, metrics["accuracy"]


def truncation_sweep(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: ArrayDataset,
    val_set: ArrayDataset,
    test_set: ArrayDataset,
    lengths: list[int],
    seeds: list[int],
    jobs: int = 1,
    reuse_model: bool = False,
) -> list[SweepPoint]:
    """Accuracy as a function of observed video length.

    For each length the model is retrained from scratch on the truncated
    training split and evaluated on the equally truncated test split, per
    seed. ``reuse_model`` instead trains once per seed on full-length
    videos and only truncates at evaluation time; it is a fast mode that
    does NOT reproduce the retraining protocol.
    """
    full = train_set.frame_feats.shape[1]
    if sorted(lengths) != list(lengths):
        raise ConfigError(f"lengths must be sorted ascending, got {lengths}")
    if any(ln < 2 or ln > full for ln in lengths):
        raise ConfigError(f"lengths must lie in [2, {full}], got {lengths}")
    tasks = [
        (
            model_cfg.to_dict(),
            train_cfg.to_dict(),
            train_set,
            val_set,
            test_set,
            length,
            seed,
            reuse_model,
        )
        for length in lengths
        for seed in seeds
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_task, tasks))
    else:
        outcomes = [_sweep_task(t) for t in tasks]
    by_length: dict[int, dict[int, float]] = {length: {} for length in lengths}
    for length, seed, acc in outcomes:
        by_length[length][seed] = acc
    points = []
    for length in lengths:
        agg = aggregate_runs([by_length[length][s] for s in seeds], metric=f"accuracy@{length}")
        points.append(
            SweepPoint(length=length, mean_accuracy=agg.mean, std_accuracy=agg.std, per_seed=agg.values)
        )
    return points

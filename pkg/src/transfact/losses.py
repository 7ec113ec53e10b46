"""The five training loss terms and their weighted total.

All terms are negative log-likelihoods or squared penalties, so each is
nonnegative. Probabilities are floored at 1e-12 before any logarithm.
Per-block supervision: the transferability, frame and stage terms sum
over every block; the cross-attention alignment term sums over blocks
after the first; the smoothing term averages over blocks.

Two layers are provided: batched tensor functions used by the trainer
(and the gradient checker), and scalar convenience wrappers matching the
per-video contracts, which feed the same tensor code with a batch of one.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, InputError, LabelError
from .matching import PROB_FLOOR, Assignment, build_cost_matrix, match_segments
from .videodata import Segment, segments_from_framewise

__all__ = [
    "LOG_FLOOR",
    "SMOOTH_CLAMP",
    "LossWeights",
    "LossBreakdown",
    "trans_nll",
    "frame_nll",
    "stage_nll",
    "cross_att_nll",
    "smooth_penalty",
    "loss_trans",
    "loss_frame",
    "loss_stage",
    "loss_cross_att",
    "loss_smooth",
    "total_loss",
    "token_targets_from_assignment",
    "frame_token_index",
    "match_batch",
]

LOG_FLOOR = math.log(PROB_FLOOR)
SMOOTH_CLAMP = 4.0


@dataclass(frozen=True)
class LossWeights:
    trans: float = 1.0
    frame: float = 1.0
    stage: float = 1.0
    cross: float = 1.0
    smooth: float = 5.0

    def validate(self) -> None:
        for name, value in self.__dict__.items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {value}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        w = cls(**d)
        w.validate()
        return w


@dataclass
class LossBreakdown:
    trans: float
    frame: float
    stage: float
    cross_att: float
    smooth: float
    total: float


# ---------------------------------------------------------------------------
# batched tensor terms (each returns a per-video (N,) tensor)


def trans_nll(trans_logp: list[Tensor], labels: np.ndarray) -> Tensor:
    """-sum over blocks of the log-probability of the true video label."""
    idx = np.asarray(labels, dtype=np.int64)[:, None]
    total = None
    for t in trans_logp:
        picked = t.clip_min(LOG_FLOOR).take_along_axis(idx, axis=1)[:, 0]
        total = -picked if total is None else total - picked
    return total


def frame_nll(frame_logp: list[Tensor], frame_targets: np.ndarray) -> Tensor:
    """-(1/T) sum over blocks and frames of the true-class log-probability."""
    idx = np.asarray(frame_targets, dtype=np.int64)[:, :, None]
    length = idx.shape[1]
    total = None
    for t in frame_logp:
        picked = t.clip_min(LOG_FLOOR).take_along_axis(idx, axis=2)[:, :, 0].sum(axis=1)
        total = -picked if total is None else total - picked
    return total * (1.0 / length)


def stage_nll(token_logp: list[Tensor], token_targets: np.ndarray) -> Tensor:
    """-(1/M) sum over blocks and tokens of the target-class log-probability.

    Matched tokens target their segment's stage; unmatched tokens target
    the null class (index S).
    """
    idx = np.asarray(token_targets, dtype=np.int64)[:, :, None]
    num_tokens = idx.shape[1]
    total = None
    for t in token_logp:
        picked = t.clip_min(LOG_FLOOR).take_along_axis(idx, axis=2)[:, :, 0].sum(axis=1)
        total = -picked if total is None else total - picked
    return total * (1.0 / num_tokens)


def cross_att_nll(attn_s2f: list[Tensor], attn_f2s: list[Tensor], frame_token_idx: np.ndarray) -> Tensor:
    """-(1/T) sum over blocks after the first of both attention log-weights
    between each frame and its segment's matched token."""
    idx = np.asarray(frame_token_idx, dtype=np.int64)[:, :, None]
    n, length = idx.shape[0], idx.shape[1]
    if len(attn_s2f) < 2:
        warnings.warn("cross-attention loss is an empty sum with a single block", stacklevel=2)
        return Tensor(np.zeros(n))
    total = None
    for maps in (attn_s2f[1:], attn_f2s[1:]):
        for t in maps:
            logw = t.clip_min(PROB_FLOOR).log()
            picked = logw.take_along_axis(idx, axis=2)[:, :, 0].sum(axis=1)
            total = -picked if total is None else total - picked
    return total * (1.0 / length)


def smooth_penalty(frame_logp: list[Tensor]) -> Tensor:
    """Truncated MSE of temporal log-probability differences.

    (1 / (B (T-1) S)) sum of min(|logp_t - logp_{t-1}|, 4)^2, with the
    previous frame detached (standard truncated-MSE smoothing).
    """
    first = frame_logp[0]
    n, length, num_classes = first.shape
    if length < 2:
        return Tensor(np.zeros(n))
    total = None
    for t in frame_logp:
        prev = Tensor(t.data[:, :-1, :])  # detached reference
        diff = t[:, 1:, :] - prev
        clipped = diff.clip_min(-SMOOTH_CLAMP).clip_max(SMOOTH_CLAMP)
        term = (clipped * clipped).sum(axis=(1, 2))
        total = term if total is None else total + term
    scale = 1.0 / (len(frame_logp) * (length - 1) * num_classes)
    return total * scale


# ---------------------------------------------------------------------------
# matching plumbing shared by trainer and wrappers


def token_targets_from_assignment(assignment: Assignment, segment_labels: list[int], num_tokens: int, num_stages: int) -> np.ndarray:
    """Per-token class targets: the matched segment's stage, or the null class."""
    targets = np.full(num_tokens, num_stages, dtype=np.int64)
    for n, m in assignment.pairs:
        if not 0 <= m < num_tokens:
            raise InputError(f"assignment references token {m} outside [0, {num_tokens})")
        if not 0 <= n < len(segment_labels):
            raise InputError(f"assignment references segment {n} outside [0, {len(segment_labels)})")
        targets[m] = segment_labels[n]
    return targets


def frame_token_index(assignment: Assignment, segments: list[Segment]) -> np.ndarray:
    """For every frame, the token matched to its segment."""
    if not segments:
        raise InputError("no segments")
    length = segments[-1].end
    token_of = assignment.token_for_segment
    idx = np.empty(length, dtype=np.int64)
    for n, seg in enumerate(segments):
        idx[seg.start : seg.end] = token_of[n]
    return idx


def match_batch(
    token_logp_final: np.ndarray,
    attn_s2f_final: np.ndarray,
    stage_labels: np.ndarray,
    num_stages: int,
) -> tuple[np.ndarray, np.ndarray, list[Assignment]]:
    """Match every video in a batch from detached final-block outputs.

    Returns (token_targets (N, M), frame_token_idx (N, T), assignments).
    """
    n, num_tokens, _ = token_logp_final.shape
    token_targets = np.empty((n, num_tokens), dtype=np.int64)
    frame_idx = np.empty((n, stage_labels.shape[1]), dtype=np.int64)
    assignments = []
    for i in range(n):
        segments = segments_from_framewise(stage_labels[i])
        cost = build_cost_matrix(np.exp(token_logp_final[i]), np.asarray(attn_s2f_final[i]), segments)
        assignment = match_segments(cost)
        assignments.append(assignment)
        token_targets[i] = token_targets_from_assignment(
            assignment, [s.label for s in segments], num_tokens, num_stages
        )
        frame_idx[i] = frame_token_index(assignment, segments)
    return token_targets, frame_idx, assignments


# ---------------------------------------------------------------------------
# per-video scalar wrappers


def _log_tensor(probs: np.ndarray) -> Tensor:
    return Tensor(np.log(np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR)))


def loss_trans(trans_probs, label: int) -> float:
    """Transferability NLL from per-block probabilities of the true label
    (scalars) or per-block 2-vectors."""
    arr = np.asarray(trans_probs, dtype=np.float64)
    if arr.ndim == 1:  # probabilities of the ground-truth label directly
        blocks = [_log_tensor(np.array([[p, 1.0 - p]])) for p in arr]
        labels = np.zeros(1, dtype=np.int64)
    else:
        blocks = [_log_tensor(row[None, :]) for row in arr]
        labels = np.array([label], dtype=np.int64)
    return float(trans_nll(blocks, labels).data[0])


def loss_frame(frame_probs, stage_labels) -> float:
    """Frame-wise stage NLL; ``frame_probs`` is (B, T, S)."""
    arr = np.asarray(frame_probs, dtype=np.float64)
    labels = np.asarray(stage_labels, dtype=np.int64)
    num_classes = arr.shape[-1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LabelError(f"stage labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    blocks = [_log_tensor(b[None]) for b in arr]
    return float(frame_nll(blocks, labels[None]).data[0])


def loss_stage(token_probs, assignment: Assignment, segment_labels: list[int]) -> float:
    """Token classification NLL; ``token_probs`` is (B, M, S+1)."""
    arr = np.asarray(token_probs, dtype=np.float64)
    num_tokens, num_classes = arr.shape[-2], arr.shape[-1]
    targets = token_targets_from_assignment(assignment, segment_labels, num_tokens, num_classes - 1)
    blocks = [_log_tensor(b[None]) for b in arr]
    return float(stage_nll(blocks, targets[None]).data[0])


def loss_cross_att(attn_s2f, attn_f2s, assignment: Assignment, segments: list[Segment]) -> float:
    """Alignment NLL between frames and matched tokens; maps are (B, T, M)."""
    s2f = np.asarray(attn_s2f, dtype=np.float64)
    f2s = np.asarray(attn_f2s, dtype=np.float64)
    idx = frame_token_index(assignment, segments)
    s2f_blocks = [Tensor(b[None]) for b in s2f]
    f2s_blocks = [Tensor(b[None]) for b in f2s]
    return float(cross_att_nll(s2f_blocks, f2s_blocks, idx[None]).data[0])


def loss_smooth(frame_logprobs) -> float:
    """Smoothing penalty; input is per-block frame LOG-probabilities (B, T, S)."""
    arr = np.asarray(frame_logprobs, dtype=np.float64)
    blocks = [Tensor(b[None]) for b in arr]
    return float(smooth_penalty(blocks).data[0])


def total_loss(
    trans: float,
    frame: float,
    stage: float,
    cross_att: float,
    smooth: float,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Weighted sum of the five precomputed terms."""
    weights.validate()
    total = (
        weights.trans * trans
        + weights.frame * frame
        + weights.stage * stage
        + weights.cross * cross_att
        + weights.smooth * smooth
    )
    return LossBreakdown(trans=trans, frame=frame, stage=stage, cross_att=cross_att, smooth=smooth, total=total)

"""Dual-branch temporal transformer for stage segmentation + transferability.

One input block projects per-frame features to the hidden width and adds
sinusoidal positions; learnable stage tokens seed the stage branch. Each
update block then runs, in order:

  1. a residual stack of dilated temporal convolutions on the frame branch;
  2. optional fusion of MHI features into frame tokens via cross-attention;
  3. stage-token self-attention, then cross-attention from stage tokens to
     frame tokens (whose weights give the stage-to-frame map);
  4. cross-attention from frame tokens back to stage tokens (frame-to-stage
     map);
  5. three heads: frame-wise stage classification, token classification
     (stages + a null class), and a video-level transferability head fed by
     mean-pooled frame and stage tokens.

Both attention maps are reported as (T, num_tokens) matrices whose rows sum
to one: the frame-to-stage map directly, the stage-to-frame map after
transposition and per-frame renormalization over tokens.

All math runs on the package's float64 autodiff tensors, so training and
gradient verification share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, no_grad
from .errors import ConfigError, InputError
from .features import FeatureSequence
from .rng import generator

__all__ = [
    "ModelConfig",
    "ForwardOutput",
    "BlockOutputs",
    "init_model",
    "parameter_shapes",
    "parameter_count",
    "forward",
    "forward_batch",
    "cross_attention",
    "transferability_head",
    "backward",
    "sinusoidal_positions",
    "flatten_params",
    "set_flat_params",
    "grad_vector",
]

Parameters = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 3
    num_tokens: int = 60
    num_stages: int = 11
    hidden_dim: int = 64
    num_heads: int = 4
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    frame_feature_dim: int = 32
    mhi_feature_dim: int = 32
    use_mhi: bool = False
    mhi_fusion: str = "all"  # where MHI cross-attention applies: input|update|all

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.num_tokens < 1:
            raise ConfigError(f"num_tokens must be >= 1, got {self.num_tokens}")
        if self.num_stages < 2:
            raise ConfigError(f"num_stages must be >= 2, got {self.num_stages}")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} must be divisible by num_heads {self.num_heads}"
            )
        if any(d < 1 for d in self.dilations) or not self.dilations:
            raise ConfigError(f"dilations must be positive, got {self.dilations}")
        if self.frame_feature_dim < 1 or self.mhi_feature_dim < 1:
            raise ConfigError("feature dims must be positive")
        if self.mhi_fusion not in ("input", "update", "all"):
            raise ConfigError(f"mhi_fusion must be input|update|all, got {self.mhi_fusion!r}")

    @property
    def mhi_in_input(self) -> bool:
        return self.use_mhi and self.mhi_fusion in ("input", "all")

    @property
    def mhi_in_update(self) -> bool:
        return self.use_mhi and self.mhi_fusion in ("update", "all")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["dilations"] = tuple(d["dilations"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class ForwardOutput:
    """Per-block predictions for a single video, as plain arrays."""

    frame_probs: list[np.ndarray]  # each (T, S), rows sum to 1
    token_probs: list[np.ndarray]  # each (M, S+1), rows sum to 1
    attn_f2s: list[np.ndarray]  # each (T, M), rows sum to 1
    attn_s2f: list[np.ndarray]  # each (T, M), rows sum to 1
    trans_probs: list[np.ndarray]  # each (2,), sums to 1


@dataclass
class BlockOutputs:
    """Per-block predictions for a batch, kept on the autodiff tape."""

    frame_logp: list[Tensor] = field(default_factory=list)  # (N, T, S)
    token_logp: list[Tensor] = field(default_factory=list)  # (N, M, S+1)
    attn_f2s: list[Tensor] = field(default_factory=list)  # (N, T, M)
    attn_s2f: list[Tensor] = field(default_factory=list)  # (N, T, M)
    trans_logp: list[Tensor] = field(default_factory=list)  # (N, 2)


# ---------------------------------------------------------------------------
# parameters


def _attention_shapes(prefix: str, dim: int, with_kv_norm: bool) -> list[tuple[str, tuple[int, ...]]]:
    shapes = [(f"{prefix}.ln_q.g", (dim,)), (f"{prefix}.ln_q.b", (dim,))]
    if with_kv_norm:
        shapes += [(f"{prefix}.ln_kv.g", (dim,)), (f"{prefix}.ln_kv.b", (dim,))]
    for mat in ("wq", "wk", "wv", "wo"):
        shapes.append((f"{prefix}.{mat}", (dim, dim)))
    for vec in ("bq", "bk", "bv", "bo"):
        shapes.append((f"{prefix}.{vec}", (dim,)))
    return shapes


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every learnable parameter, in a fixed order."""
    config.validate()
    d = config.hidden_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("input.proj.w", (config.frame_feature_dim, d)),
        ("input.proj.b", (d,)),
        ("tokens", (config.num_tokens, d)),
    ]
    if config.use_mhi:
        shapes += [("input.mhi_proj.w", (config.mhi_feature_dim, d)), ("input.mhi_proj.b", (d,))]
    if config.mhi_in_input:
        shapes += _attention_shapes("input.mhi_attn", d, with_kv_norm=True)
    for i in range(config.num_blocks):
        p = f"block{i}"
        for j in range(len(config.dilations)):
            for tap in ("w0", "w1", "w2"):
                shapes.append((f"{p}.conv{j}.{tap}", (d, d)))
            shapes.append((f"{p}.conv{j}.b", (d,)))
            shapes.append((f"{p}.conv{j}.pw.w", (d, d)))
            shapes.append((f"{p}.conv{j}.pw.b", (d,)))
        if config.mhi_in_update:
            shapes += _attention_shapes(f"{p}.mhi_attn", d, with_kv_norm=True)
        shapes += _attention_shapes(f"{p}.self_attn", d, with_kv_norm=False)
        shapes += _attention_shapes(f"{p}.s2f_attn", d, with_kv_norm=True)
        shapes += [
            (f"{p}.ffn.ln.g", (d,)),
            (f"{p}.ffn.ln.b", (d,)),
            (f"{p}.ffn.w1", (d, 2 * d)),
            (f"{p}.ffn.b1", (2 * d,)),
            (f"{p}.ffn.w2", (2 * d, d)),
            (f"{p}.ffn.b2", (d,)),
        ]
        shapes += _attention_shapes(f"{p}.f2s_attn", d, with_kv_norm=True)
        shapes += [
            (f"{p}.frame_head.w", (d, config.num_stages)),
            (f"{p}.frame_head.b", (config.num_stages,)),
            (f"{p}.token_head.w", (d, config.num_stages + 1)),
            (f"{p}.token_head.b", (config.num_stages + 1,)),
            (f"{p}.trans_head.w", (2 * d, 2)),
            (f"{p}.trans_head.b", (2,)),
        ]
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_shapes(config))


def init_model(config: ModelConfig, seed: int) -> Parameters:
    """Seeded init: fan-in scaled-uniform weights, zero biases, unit layer
    norms, unit-normal token embeddings (they feed a pre-norm stack, so
    near-zero embeddings would make the first normalization ill-conditioned).

    Each parameter draws from its own stream derived from (seed, name), so
    adding or removing optional parameters (e.g. the MHI path) never shifts
    the values of the others.
    """
    params: Parameters = {}
    for name, shape in parameter_shapes(config):
        rng = generator(seed, f"init:{name}")
        leaf = name.rsplit(".", 1)[-1]
        if name == "tokens":
            data = rng.normal(0.0, 1.0, size=shape)
        elif leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        elif leaf in ("w0", "w1", "w2"):
            bound = 1.0 / np.sqrt(3.0 * shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def flatten_params(params: Parameters) -> np.ndarray:
    return np.concatenate([params[k].data.reshape(-1) for k in sorted(params)])


def set_flat_params(params: Parameters, flat: np.ndarray) -> None:
    offset = 0
    for k in sorted(params):
        size = params[k].data.size
        params[k].data = flat[offset : offset + size].reshape(params[k].data.shape).copy()
        offset += size
    if offset != flat.size:
        raise InputError(f"flat vector has {flat.size} entries, parameters need {offset}")


def grad_vector(params: Parameters) -> np.ndarray:
    chunks = []
    for k in sorted(params):
        g = params[k].grad
        chunks.append((np.zeros_like(params[k].data) if g is None else g).reshape(-1))
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# building blocks


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position table, (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    return np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))


def _layer_norm(params: Parameters, prefix: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps).power(-0.5)
    return centered * inv * params[f"{prefix}.g"] + params[f"{prefix}.b"]


def cross_attention(
    params: Parameters,
    prefix: str,
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    num_heads: int,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product multi-head attention.

    Returns the attended outputs and the head-averaged attention weights,
    shape (..., num_queries, num_keys), each query row summing to one.
    """
    if keys.shape[-2] != values.shape[-2]:
        raise InputError(f"keys and values disagree in length: {keys.shape} vs {values.shape}")
    dim = queries.shape[-1]
    if dim % num_heads != 0:
        raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
    head_dim = dim // num_heads

    def split_heads(t: Tensor) -> Tensor:
        n, length, _ = t.shape
        return t.reshape(n, length, num_heads, head_dim).transpose((0, 2, 1, 3))

    q = split_heads(queries @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"])
    k = split_heads(keys @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"])
    v = split_heads(values @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"])
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(head_dim))
    attn = scores.softmax(axis=-1)  # (N, H, Tq, Tk)
    mixed = attn @ v
    n, _, tq, _ = mixed.shape
    out = mixed.transpose((0, 2, 1, 3)).reshape(n, tq, dim)
    out = out @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]
    return out, attn.mean(axis=1)


def _attend(params: Parameters, prefix: str, q: Tensor, kv: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Pre-norm residual attention as used inside blocks."""
    qn = _layer_norm(params, f"{prefix}.ln_q", q)
    kvn = _layer_norm(params, f"{prefix}.ln_kv", kv)
    out, weights = cross_attention(params, prefix, qn, kvn, kvn, heads)
    return q + out, weights


def _self_attend(params: Parameters, prefix: str, x: Tensor, heads: int) -> Tensor:
    xn = _layer_norm(params, f"{prefix}.ln_q", x)
    out, _ = cross_attention(params, prefix, xn, xn, xn, heads)
    return x + out


def _ffn(params: Parameters, prefix: str, x: Tensor) -> Tensor:
    h = _layer_norm(params, f"{prefix}.ln", x)
    h = (h @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]).relu()
    return x + (h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"])


def _conv_layer(params: Parameters, prefix: str, x: Tensor, dilation: int) -> Tensor:
    """Residual dilated temporal convolution, kernel 3, zero padding."""
    length = x.shape[1]
    padded = x.pad_axis(1, dilation, dilation)
    left = padded[:, 0:length, :]
    mid = padded[:, dilation : dilation + length, :]
    right = padded[:, 2 * dilation : 2 * dilation + length, :]
    h = (
        left @ params[f"{prefix}.w0"]
        + mid @ params[f"{prefix}.w1"]
        + right @ params[f"{prefix}.w2"]
        + params[f"{prefix}.b"]
    )
    return x + (h.relu() @ params[f"{prefix}.pw.w"] + params[f"{prefix}.pw.b"])


def frame_conv_stack(params: Parameters, block: str, x: Tensor, dilations: tuple[int, ...]) -> Tensor:
    for j, d in enumerate(dilations):
        x = _conv_layer(params, f"{block}.conv{j}", x, d)
    return x


def transferability_head(params: Parameters, prefix: str, frame_tokens: Tensor, stage_tokens: Tensor) -> Tensor:
    """Video-level head: mean-pool both branches, concatenate, classify."""
    pooled_f = frame_tokens.mean(axis=1)
    pooled_s = stage_tokens.mean(axis=1)
    if pooled_s.shape[0] == 1 and pooled_f.shape[0] != 1:
        ones = Tensor(np.ones((pooled_f.shape[0], 1)))
        pooled_s = ones @ pooled_s
    joint = concat([pooled_f, pooled_s], axis=-1)
    logits = joint @ params[f"{prefix}.w"] + params[f"{prefix}.b"]
    return logits.log_softmax(axis=-1)


# ---------------------------------------------------------------------------
# forward


def forward_batch(
    params: Parameters,
    config: ModelConfig,
    frame_feats: np.ndarray,
    mhi_feats: np.ndarray | None = None,
) -> BlockOutputs:
    """Run the network on a (N, T, D) feature batch, recording the tape."""
    config.validate()
    frame_feats = np.asarray(frame_feats, dtype=np.float64)
    if frame_feats.ndim != 3:
        raise InputError(f"expected (N, T, D) features, got shape {frame_feats.shape}")
    n, length, dim = frame_feats.shape
    if length < 1:
        raise InputError("need at least one frame")
    if dim != config.frame_feature_dim:
        raise InputError(f"frame feature dim {dim} != configured {config.frame_feature_dim}")
    if config.use_mhi:
        if mhi_feats is None:
            raise InputError("config.use_mhi is set but no MHI features were given")
        mhi_feats = np.asarray(mhi_feats, dtype=np.float64)
        if mhi_feats.shape[:2] != (n, length):
            raise InputError(f"MHI features {mhi_feats.shape} do not align with frames {(n, length)}")
        if mhi_feats.shape[2] != config.mhi_feature_dim:
            raise InputError(f"MHI feature dim {mhi_feats.shape[2]} != configured {config.mhi_feature_dim}")
    elif mhi_feats is not None:
        mhi_feats = None  # ignored when fusion is disabled

    pe = Tensor(sinusoidal_positions(length, config.hidden_dim)[None, :, :])
    x = Tensor(frame_feats) @ params["input.proj.w"] + params["input.proj.b"] + pe
    mhi_kv = None
    if config.use_mhi:
        mhi_kv = Tensor(mhi_feats) @ params["input.mhi_proj.w"] + params["input.mhi_proj.b"] + pe
    if config.mhi_in_input:
        x, _ = _attend(params, "input.mhi_attn", x, mhi_kv, config.num_heads)
    s = params["tokens"].reshape(1, config.num_tokens, config.hidden_dim)

    out = BlockOutputs()
    for i in range(config.num_blocks):
        p = f"block{i}"
        x = frame_conv_stack(params, p, x, config.dilations)
        if config.mhi_in_update:
            x, _ = _attend(params, f"{p}.mhi_attn", x, mhi_kv, config.num_heads)
        s = _self_attend(params, f"{p}.self_attn", s, config.num_heads)
        s, stage_to_frame = _attend(params, f"{p}.s2f_attn", s, x, config.num_heads)
        s = _ffn(params, f"{p}.ffn", s)
        x, frame_to_stage = _attend(params, f"{p}.f2s_attn", x, s, config.num_heads)

        # both maps reported as (T, M) with rows summing to one; the
        # stage-to-frame map is transposed and renormalized over tokens
        s2f_t = stage_to_frame.swapaxes(-1, -2)
        s2f = s2f_t / s2f_t.sum(axis=-1, keepdims=True)

        out.frame_logp.append((x @ params[f"{p}.frame_head.w"] + params[f"{p}.frame_head.b"]).log_softmax(-1))
        out.token_logp.append((s @ params[f"{p}.token_head.w"] + params[f"{p}.token_head.b"]).log_softmax(-1))
        out.attn_f2s.append(frame_to_stage)
        out.attn_s2f.append(s2f)
        out.trans_logp.append(transferability_head(params, f"{p}.trans_head", x, s))
    return out


def forward(
    params: Parameters,
    config: ModelConfig,
    frame_feats: FeatureSequence | np.ndarray,
    mhi_feats: FeatureSequence | np.ndarray | None = None,
) -> ForwardOutput:
    """Single-video forward pass returning probabilities as plain arrays."""

    def as_array(seq) -> np.ndarray:
        values = seq.values if isinstance(seq, FeatureSequence) else np.asarray(seq)
        return values.astype(np.float64)[None, :, :]

    with no_grad():
        outs = forward_batch(
            params,
            config,
            as_array(frame_feats),
            as_array(mhi_feats) if mhi_feats is not None else None,
        )
    return ForwardOutput(
        frame_probs=[np.exp(t.data[0]) for t in outs.frame_logp],
        token_probs=[np.exp(t.data[0]) for t in outs.token_logp],
        attn_f2s=[t.data[0].copy() for t in outs.attn_f2s],
        attn_s2f=[t.data[0].copy() for t in outs.attn_s2f],
        trans_probs=[np.exp(t.data[0]) for t in outs.trans_logp],
    )


def backward(params: Parameters, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for every parameter."""
    if not np.isfinite(loss.data):
        from .errors import NumericError

        raise NumericError(f"loss is not finite: {loss.data}")
    for p in params.values():
        p.grad = None
    loss.backward()
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}

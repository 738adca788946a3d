"""LLaMA-style decoder building blocks.

One layer block = pre-norm causal multi-head attention plus a pre-norm
SwiGLU feed-forward, each wrapped in a residual connection. Rotary
positional embeddings are applied to queries and keys inside attention.
All functions operate on [B, T, d] activations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from papaformer.tensor import RngState, Tensor, concat

RMSNORM_EPS = 1e-5
ROPE_BASE = 10000.0
INIT_STD = 0.02
ATTN_MASK_VALUE = -1e9


class ConfigError(ValueError):
    """A block or model hyperparameter violates its constraints."""


@dataclass
class LayerBlockParams:
    """Weights of one decoder layer at width d with ff hidden size."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    norm1_scale: Tensor
    norm2_scale: Tensor
    heads: int

    @classmethod
    def init(cls, d: int, heads: int, ff: int, rng: RngState) -> "LayerBlockParams":
        if d % heads != 0:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        if (d // heads) % 2 != 0:
            raise ConfigError(f"head_dim {d // heads} must be even for rotary embeddings")

        def proj(n_in, n_out):
            return Tensor(rng.normal((n_in, n_out), std=INIT_STD), requires_grad=True)

        return cls(
            wq=proj(d, d),
            wk=proj(d, d),
            wv=proj(d, d),
            wo=proj(d, d),
            w_gate=proj(d, ff),
            w_up=proj(d, ff),
            w_down=proj(ff, d),
            norm1_scale=Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
            norm2_scale=Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
            heads=heads,
        )

    def named_params(self, prefix: str = "") -> dict:
        names = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "norm1_scale", "norm2_scale"]
        return {f"{prefix}{n}": getattr(self, n) for n in names}


def rmsnorm(x: Tensor, scale: Tensor, eps: float = RMSNORM_EPS) -> Tensor:
    """scale * x / sqrt(mean(x^2) + eps) over the last axis."""
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / (ms + eps).sqrt() * scale


def rope_tables(positions: np.ndarray, head_dim: int, base: float = ROPE_BASE):
    """cos/sin rotation tables for the given positions, shaped [T, 1, hd/2, 1]."""
    if head_dim % 2 != 0:
        raise ConfigError(f"head_dim {head_dim} must be even for rotary embeddings")
    j = np.arange(head_dim // 2, dtype=np.float64)
    theta = base ** (-2.0 * j / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * theta[None, :]
    cos = np.cos(angles).astype(np.float32)[:, None, :, None]
    sin = np.sin(angles).astype(np.float32)[:, None, :, None]
    return cos, sin


def rope(x: Tensor, positions: np.ndarray) -> Tensor:
    """Rotate consecutive feature pairs of [.., T, heads, head_dim] by pos * theta_j."""
    *_, heads, head_dim = x.shape
    cos, sin = rope_tables(positions, head_dim)
    pairs = x.reshape(*x.shape[:-1], head_dim // 2, 2)
    even = pairs[..., 0:1]
    odd = pairs[..., 1:2]
    rot_even = even * cos - odd * sin
    rot_odd = even * sin + odd * cos
    out = concat([rot_even, rot_odd], axis=-1)
    return out.reshape(*x.shape)


def causal_mask(t: int) -> np.ndarray:
    """[T, T] additive mask: 0 on/below the diagonal, large negative above."""
    return np.triu(np.full((t, t), ATTN_MASK_VALUE, dtype=np.float32), k=1)


def causal_mha(x: Tensor, params: LayerBlockParams, max_seq_len: int | None = None) -> Tensor:
    """Scaled dot-product attention with a strict causal mask and RoPE on q, k."""
    b, t, d = x.shape
    if max_seq_len is not None and t > max_seq_len:
        raise ConfigError(f"sequence length {t} exceeds max_seq_len {max_seq_len}")
    heads = params.heads
    head_dim = d // heads
    positions = np.arange(t)

    q = rope((x @ params.wq).reshape(b, t, heads, head_dim), positions).transpose(0, 2, 1, 3)
    k = rope((x @ params.wk).reshape(b, t, heads, head_dim), positions).transpose(0, 2, 1, 3)
    v = (x @ params.wv).reshape(b, t, heads, head_dim).transpose(0, 2, 1, 3)

    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(head_dim))
    att = (scores + causal_mask(t)).softmax(axis=-1)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return ctx @ params.wo


def attention_weights(x: Tensor, params: LayerBlockParams) -> np.ndarray:
    """The post-softmax attention matrix [B, heads, T, T], for inspection only."""
    b, t, d = x.shape
    heads = params.heads
    head_dim = d // heads
    positions = np.arange(t)
    q = rope((x @ params.wq).reshape(b, t, heads, head_dim), positions).transpose(0, 2, 1, 3)
    k = rope((x @ params.wk).reshape(b, t, heads, head_dim), positions).transpose(0, 2, 1, 3)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(head_dim))
    return (scores + causal_mask(t)).softmax(axis=-1).data


def swiglu_ffn(x: Tensor, params: LayerBlockParams) -> Tensor:
    """w_down @ (silu(w_gate x) * (w_up x))."""
    return ((x @ params.w_gate).silu() * (x @ params.w_up)) @ params.w_down


def layer_block(
    x: Tensor,
    params: LayerBlockParams,
    max_seq_len: int | None = None,
    dropout: float = 0.0,
    rng: RngState | None = None,
) -> Tensor:
    """Pre-norm residual layer: x + mha(norm(x)), then h + ffn(norm(h)).

    ``dropout`` masks the FFN output (inverted dropout); it is only used for
    parallel-path blocks and requires an rng when nonzero.
    """
    h = x + causal_mha(rmsnorm(x, params.norm1_scale), params, max_seq_len)
    f = swiglu_ffn(rmsnorm(h, params.norm2_scale), params)
    if dropout > 0.0:
        if rng is None:
            raise ConfigError("dropout requires an rng stream")
        keep = (rng.uniform(f.shape) >= dropout).astype(f.data.dtype)
        f = f * Tensor(keep / (1.0 - dropout))
    return h + f

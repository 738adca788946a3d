"""Parallel layers and the Connection Block strategies that fuse them.

A parallel layer runs k independent width-d' layer blocks on the same input
and combines their outputs with one of three strategies:

* share_linear - a fixed linear map over the concatenated path outputs,
* gumbel_v1    - router logits computed from the combined representation,
* gumbel_v2    - router logits computed directly from the concatenation.

Both Gumbel strategies emit per-token routing weights over k paths plus one
"combined" slot, produced by a Gumbel-Softmax so path selection stays
differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from papaformer.blocks import INIT_STD, ConfigError, layer_block
from papaformer.tensor import RngState, Tensor, concat, gumbel_noise


@dataclass
class GumbelConfig:
    """Temperature / sampling behavior of the routing gate."""

    temperature: float = 1.0
    hard: bool = False
    eval_deterministic: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"gumbel temperature must be positive, got {self.temperature}")


@dataclass
class RoutingWeights:
    """Per-token routing simplex over k paths + 1 combined slot."""

    pi: Tensor  # [B, T, k+1], rows on the simplex
    layer_index: int = 0

    @property
    def k_slots(self) -> int:
        return self.pi.shape[-1]

    def selected(self) -> np.ndarray:
        """Argmax slot per token, 0..k-1 = path, k = combined. Ties: lowest index."""
        return np.argmax(self.pi.data, axis=-1)


@dataclass
class ShareLinearParams:
    """Connection weight W: (k*d') x d_out."""

    w: Tensor

    @classmethod
    def init(cls, k: int, d_path: int, d_out: int, rng: RngState) -> "ShareLinearParams":
        return cls(w=Tensor(rng.normal((k * d_path, d_out), std=INIT_STD), requires_grad=True))

    def named_params(self, prefix: str = "") -> dict:
        return {f"{prefix}w": self.w}


@dataclass
class GumbelParams:
    """Combine/router weights for either Gumbel variant.

    v1: w_combine (k*d') x d', w_router d' x (k+1)
    v2: w_router (k*d') x (k+1), w_combine (k*d') x d'
    """

    variant: int
    w_combine: Tensor
    w_router: Tensor

    @classmethod
    def init(cls, variant: int, k: int, d_path: int, rng: RngState) -> "GumbelParams":
        if variant not in (1, 2):
            raise ConfigError(f"unknown gumbel variant {variant}")
        w_combine = Tensor(rng.normal((k * d_path, d_path), std=INIT_STD), requires_grad=True)
        router_in = d_path if variant == 1 else k * d_path
        w_router = Tensor(rng.normal((router_in, k + 1), std=INIT_STD), requires_grad=True)
        return cls(variant=variant, w_combine=w_combine, w_router=w_router)

    def named_params(self, prefix: str = "") -> dict:
        return {f"{prefix}w_combine": self.w_combine, f"{prefix}w_router": self.w_router}


@dataclass
class ParallelLayerParams:
    """k path blocks at width d' plus one connection strategy."""

    paths: list  # k LayerBlockParams at width d'
    connection: object  # ShareLinearParams | GumbelParams
    final_share: object = None  # expanding ShareLinearParams on the last share_linear layer

    def named_params(self, prefix: str = "") -> dict:
        out = {}
        for i, p in enumerate(self.paths):
            out.update(p.named_params(f"{prefix}path{i}."))
        if self.connection is not None:
            out.update(self.connection.named_params(f"{prefix}conn."))
        if self.final_share is not None:
            out.update(self.final_share.named_params(f"{prefix}final."))
        return out


def down_projection(x: Tensor, w: Tensor) -> Tensor:
    """Linear width reduction d -> d' between layer blocks and parallel layers."""
    return x @ w


def run_paths(
    x: Tensor,
    paths: list,
    max_seq_len: int | None = None,
    dropout: float = 0.0,
    rng: RngState | None = None,
) -> list:
    """Run each path block independently on the same input."""
    return [layer_block(x, p, max_seq_len, dropout=dropout, rng=rng) for p in paths]


def concat_paths(outputs: list) -> Tensor:
    """Feature-axis concatenation in path order: [f_1 ; ... ; f_k]."""
    return concat(outputs, axis=-1)


def share_linear_combine(outputs: list, w: Tensor) -> Tensor:
    """y = W [f_1 ; ... ; f_k]."""
    return concat_paths(outputs) @ w


def gumbel_softmax(
    logits: Tensor,
    cfg: GumbelConfig,
    rng: RngState | None = None,
    training: bool = True,
) -> Tensor:
    """Gumbel-Softmax over the last axis.

    Training mode adds fresh Gumbel noise to the logits before the tempered
    softmax; deterministic evaluation skips the noise so routing traces are
    reproducible. Hard mode forwards the one-hot argmax while gradients flow
    through the soft weights (straight-through).
    """
    use_noise = training or not cfg.eval_deterministic
    if use_noise:
        if rng is None:
            raise ConfigError("sampling-mode gumbel_softmax requires an rng stream")
        logits = logits + gumbel_noise(logits.shape, rng)
    soft = (logits * (1.0 / cfg.temperature)).softmax(axis=-1)
    if not cfg.hard:
        return soft
    idx = np.argmax(soft.data, axis=-1)
    one_hot = np.zeros_like(soft.data)
    np.put_along_axis(one_hot, idx[..., None], 1.0, axis=-1)
    # straight-through: forward the one-hot, backprop through the soft weights
    return soft + Tensor(one_hot - soft.data)


def _mixture(outputs: list, x_comb: Tensor, pi: Tensor) -> Tensor:
    """y = sum_i pi_i f_i(x) + pi_comb x_comb."""
    k = len(outputs)
    y = outputs[0] * pi[..., 0:1]
    for i in range(1, k):
        y = y + outputs[i] * pi[..., i : i + 1]
    return y + x_comb * pi[..., k : k + 1]


def gumbel_v1_forward(
    outputs: list,
    params: GumbelParams,
    cfg: GumbelConfig,
    rng: RngState | None = None,
    training: bool = True,
    forced_pi: Tensor | None = None,
) -> tuple:
    """Routing from the combined representation.

    x_comb = W_combine [f_1;...;f_k]; router logits come from x_comb.
    ``forced_pi`` bypasses the gate entirely (testing/analysis hook).
    """
    if params.variant != 1:
        raise ConfigError("gumbel_v1_forward called with non-v1 params")
    x_comb = concat_paths(outputs) @ params.w_combine
    if forced_pi is None:
        logits = x_comb @ params.w_router
        pi = gumbel_softmax(logits, cfg, rng, training)
    else:
        pi = forced_pi
    return _mixture(outputs, x_comb, pi), RoutingWeights(pi=pi)


def gumbel_v2_forward(
    outputs: list,
    params: GumbelParams,
    cfg: GumbelConfig,
    rng: RngState | None = None,
    training: bool = True,
    forced_pi: Tensor | None = None,
) -> tuple:
    """Routing scored directly from the concatenated path outputs."""
    if params.variant != 2:
        raise ConfigError("gumbel_v2_forward called with non-v2 params")
    cat = concat_paths(outputs)
    x_comb = cat @ params.w_combine
    if forced_pi is None:
        logits = cat @ params.w_router
        pi = gumbel_softmax(logits, cfg, rng, training)
    else:
        pi = forced_pi
    return _mixture(outputs, x_comb, pi), RoutingWeights(pi=pi)


@dataclass
class DominanceRecord:
    """Per-layer share_linear record: path outputs and the combined output."""

    path_outputs: list
    combined: Tensor
    layer_index: int = 0


def parallel_layer_forward(
    x: Tensor,
    params: ParallelLayerParams,
    kind: str,
    cfg: GumbelConfig,
    rng: RngState | None = None,
    training: bool = True,
    final: bool = False,
    max_seq_len: int | None = None,
    dropout: float = 0.0,
    layer_index: int = 0,
) -> tuple:
    """One parallel layer: run paths, then fuse.

    Inter-layer output stays at width d'. With ``final=True`` the fusion
    restores the full width d: share_linear applies its expanding map, the
    Gumbel variants concatenate the k path outputs (k*d' = d). Gumbel routing
    weights are computed and recorded at every layer either way.
    """
    outputs = run_paths(x, params.paths, max_seq_len, dropout=dropout, rng=rng if dropout > 0 else None)
    if kind == "share_linear":
        w = params.final_share.w if final else params.connection.w
        y = share_linear_combine(outputs, w)
        record = DominanceRecord(path_outputs=outputs, combined=y, layer_index=layer_index)
        return y, record
    if kind == "gumbel_v1":
        y, record = gumbel_v1_forward(outputs, params.connection, cfg, rng, training)
    elif kind == "gumbel_v2":
        y, record = gumbel_v2_forward(outputs, params.connection, cfg, rng, training)
    else:
        raise ConfigError(f"unknown connection kind {kind!r}")
    record.layer_index = layer_index
    if final:
        y = concat_paths(outputs)
    return y, record

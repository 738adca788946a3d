"""Whole-model assembly: baseline stacks and parallel-path models.

Topology for parallel models: embedding -> n_before layer blocks at d_model
-> down-projection to d_path -> n_parallel_layers parallel layers -> width
restored to d_model -> n_after layer blocks -> final norm -> lm head.
Baselines are the same without the parallel core.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from papaformer.blocks import ConfigError, INIT_STD, LayerBlockParams, layer_block, rmsnorm
from papaformer.parallel import (
    GumbelConfig,
    GumbelParams,
    ParallelLayerParams,
    ShareLinearParams,
    down_projection,
    parallel_layer_forward,
)
from papaformer.tensor import RngState, Tensor, embedding

CONNECTION_KINDS = ("none", "share_linear", "gumbel_v1", "gumbel_v2")


@dataclass
class ModelConfig:
    """Declarative description of a baseline or parallel model."""

    vocab_size: int
    d_model: int = 256
    d_path: int = 128
    n_layer_blocks: int = 8
    n_parallel_layers: int = 0
    k_paths: int = 2
    heads_layer: int = 8
    heads_path: int = 4
    ff_layer: int = 1024
    ff_path: int = 512
    max_seq_len: int = 256
    connection_kind: str = "none"
    n_before: int | None = None  # layer blocks ahead of the parallel core
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    dropout_path: float = 0.0

    def __post_init__(self):
        if self.connection_kind not in CONNECTION_KINDS:
            raise ConfigError(f"connection_kind: unknown value {self.connection_kind!r}")
        if self.connection_kind == "none" and self.n_parallel_layers != 0:
            raise ConfigError("n_parallel_layers: must be 0 when connection_kind is 'none'")
        if self.connection_kind != "none":
            if self.n_parallel_layers < 1:
                raise ConfigError("n_parallel_layers: parallel models need at least one parallel layer")
            if self.k_paths < 2:
                raise ConfigError("k_paths: need at least 2 paths")
            if self.d_path * self.k_paths != self.d_model:
                raise ConfigError(
                    f"d_path: d_path*k_paths must equal d_model "
                    f"({self.d_path}*{self.k_paths} != {self.d_model})"
                )
            if self.d_path % self.heads_path != 0:
                raise ConfigError("heads_path: must divide d_path")
        if self.d_model % self.heads_layer != 0:
            raise ConfigError("heads_layer: must divide d_model")
        if not (0.0 <= self.dropout_path < 1.0):
            raise ConfigError("dropout_path: must lie in [0, 1)")
        if isinstance(self.gumbel, dict):
            self.gumbel = GumbelConfig(**self.gumbel)

    @property
    def head_dim_layer(self) -> int:
        return self.d_model // self.heads_layer

    def split_blocks(self) -> tuple:
        """(n_before, n_after) placement of layer blocks around the parallel core."""
        if self.connection_kind == "none":
            return self.n_layer_blocks, 0
        if self.n_before is not None:
            if not (0 <= self.n_before <= self.n_layer_blocks):
                raise ConfigError("n_before: out of range")
            return self.n_before, self.n_layer_blocks - self.n_before
        n_after = 1 if self.n_layer_blocks > 1 else 0
        return self.n_layer_blocks - n_after, n_after

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PaPaformerModel:
    """A built model: parameters plus the config that shaped them."""

    config: ModelConfig
    embed: Tensor
    blocks_before: list
    down_proj: Tensor | None
    parallel_layers: list
    blocks_after: list
    final_norm_scale: Tensor
    lm_head: Tensor

    def named_params(self) -> dict:
        out = {"embed": self.embed}
        for i, b in enumerate(self.blocks_before):
            out.update(b.named_params(f"block_before{i}."))
        if self.down_proj is not None:
            out["down_proj"] = self.down_proj
        for i, layer in enumerate(self.parallel_layers):
            out.update(layer.named_params(f"parallel{i}."))
        for i, b in enumerate(self.blocks_after):
            out.update(b.named_params(f"block_after{i}."))
        out["final_norm_scale"] = self.final_norm_scale
        out["lm_head"] = self.lm_head
        return out

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.zero_grad()


def build(config: ModelConfig, rng: RngState) -> PaPaformerModel:
    """Initialize all parameters; deterministic under the rng's (seed, position)."""
    c = config
    n_before, n_after = c.split_blocks()
    embed = Tensor(rng.normal((c.vocab_size, c.d_model), std=INIT_STD), requires_grad=True)
    blocks_before = [
        LayerBlockParams.init(c.d_model, c.heads_layer, c.ff_layer, rng) for _ in range(n_before)
    ]
    down_proj = None
    parallel_layers = []
    if c.connection_kind != "none":
        down_proj = Tensor(rng.normal((c.d_model, c.d_path), std=INIT_STD), requires_grad=True)
        for i in range(c.n_parallel_layers):
            paths = [
                LayerBlockParams.init(c.d_path, c.heads_path, c.ff_path, rng)
                for _ in range(c.k_paths)
            ]
            final = i == c.n_parallel_layers - 1
            if c.connection_kind == "share_linear":
                conn = ShareLinearParams.init(c.k_paths, c.d_path, c.d_path, rng) if not final else None
                final_share = (
                    ShareLinearParams.init(c.k_paths, c.d_path, c.d_model, rng) if final else None
                )
                parallel_layers.append(
                    ParallelLayerParams(paths=paths, connection=conn, final_share=final_share)
                )
            else:
                variant = 1 if c.connection_kind == "gumbel_v1" else 2
                conn = GumbelParams.init(variant, c.k_paths, c.d_path, rng)
                parallel_layers.append(ParallelLayerParams(paths=paths, connection=conn))
    blocks_after = [
        LayerBlockParams.init(c.d_model, c.heads_layer, c.ff_layer, rng) for _ in range(n_after)
    ]
    final_norm_scale = Tensor(np.ones(c.d_model, dtype=np.float32), requires_grad=True)
    lm_head = Tensor(rng.normal((c.d_model, c.vocab_size), std=INIT_STD), requires_grad=True)
    return PaPaformerModel(
        config=c,
        embed=embed,
        blocks_before=blocks_before,
        down_proj=down_proj,
        parallel_layers=parallel_layers,
        blocks_after=blocks_after,
        final_norm_scale=final_norm_scale,
        lm_head=lm_head,
    )


def forward(
    model: PaPaformerModel,
    tokens: np.ndarray,
    rng: RngState | None = None,
    training: bool = False,
) -> tuple:
    """Next-token logits for a [T] or [B, T] id array, plus routing records.

    Training mode draws Gumbel noise (and dropout masks, when configured)
    from ``rng``; evaluation without an rng uses deterministic routing.
    """
    c = model.config
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    if tokens.shape[1] > c.max_seq_len:
        raise ConfigError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {c.max_seq_len}")
    x = embedding(model.embed, tokens)
    for b in model.blocks_before:
        x = layer_block(x, b, c.max_seq_len)
    records = []
    if c.connection_kind != "none":
        x = down_projection(x, model.down_proj)
        dropout = c.dropout_path if training else 0.0
        for i, layer in enumerate(model.parallel_layers):
            x, rec = parallel_layer_forward(
                x,
                layer,
                c.connection_kind,
                c.gumbel,
                rng=rng,
                training=training,
                final=(i == c.n_parallel_layers - 1),
                max_seq_len=c.max_seq_len,
                dropout=dropout,
                layer_index=i,
            )
            records.append(rec)
    for b in model.blocks_after:
        x = layer_block(x, b, c.max_seq_len)
    x = rmsnorm(x, model.final_norm_scale)
    logits = x @ model.lm_head
    if squeeze:
        logits = logits.reshape(logits.shape[1], logits.shape[2])
    return logits, records


def count_params(model: PaPaformerModel) -> tuple:
    """(total, per-name breakdown) of scalar parameters."""
    breakdown = {name: p.size for name, p in model.named_params().items()}
    return sum(breakdown.values()), breakdown

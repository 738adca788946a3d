"""Merge independently pretrained path models into one parallel model.

Each path checkpoint contributes its layer-block weights verbatim to the
matching path slot of the target's parallel layers. Embeddings are
concatenated per token along the feature axis (path 1 occupies dims
[0, d_path)), and the output projections are concatenated along their input
axis, so the composite's logits start as the sum of the paths' logits.
Everything else — down-projection, connection/router weights, outer layer
blocks, final norm — is freshly initialized with the standard build policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from papaformer.checkpoint import load_checkpoint, read_manifest
from papaformer.model import ModelConfig, PaPaformerModel, build
from papaformer.tensor import RngState

_PATH_BLOCK_NAMES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "norm1_scale", "norm2_scale")


class CompositionError(ValueError):
    """The plan or its source checkpoints cannot produce a valid composite."""


@dataclass
class CompositionPlan:
    path_checkpoints: list  # checkpoint file paths, in path-slot order
    target_config: ModelConfig


@dataclass
class ValidationReport:
    entries: list = field(default_factory=list)  # (target name, provenance tag, source)
    conflicts: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.conflicts


def composition_provenance(config: ModelConfig) -> dict:
    """Provenance tag per target parameter name for a freshly composed model."""
    tags = {}
    for name in build(config, RngState(0)).named_params():
        if name in ("embed", "lm_head"):
            tags[name] = "concatenated"
        elif name.startswith("parallel") and ".path" in name and ".conn." not in name and ".final." not in name:
            tags[name] = "reused"
        else:
            tags[name] = "fresh"
    return tags


def validate_plan(plan: CompositionPlan) -> ValidationReport:
    """Check dimensions and vocabularies against manifests, touching no weights."""
    report = ValidationReport()
    target = plan.target_config
    if target.connection_kind == "none":
        report.conflicts.append("target_config: connection_kind 'none' has no path slots")
        return report
    if len(plan.path_checkpoints) != target.k_paths:
        report.conflicts.append(
            f"path_checkpoints: got {len(plan.path_checkpoints)} checkpoints for k_paths={target.k_paths}"
        )
    configs = []
    for i, path in enumerate(plan.path_checkpoints):
        try:
            configs.append(ModelConfig.from_dict(read_manifest(path)["model_config"]))
        except (OSError, KeyError, ValueError) as e:
            report.conflicts.append(f"path {i + 1}: unreadable checkpoint ({e})")
            configs.append(None)
    vocabs = {c.vocab_size for c in configs if c is not None}
    if len(vocabs) > 1 or (vocabs and vocabs != {target.vocab_size}):
        report.conflicts.append(
            f"vocab_size: paths {sorted(vocabs)} vs target {target.vocab_size} must all match"
        )
    for i, c in enumerate(configs):
        if c is None:
            continue
        if c.d_model != target.d_path:
            report.conflicts.append(
                f"path {i + 1}: width d_model={c.d_model} != target d_path={target.d_path}"
            )
        if c.n_layer_blocks != target.n_parallel_layers:
            report.conflicts.append(
                f"path {i + 1}: {c.n_layer_blocks} layer blocks != target "
                f"n_parallel_layers={target.n_parallel_layers}"
            )
        if c.connection_kind != "none":
            report.conflicts.append(f"path {i + 1}: source must be a plain stack, not parallel")
    widths = [c.d_model for c in configs if c is not None]
    if len(widths) == target.k_paths and sum(widths) != target.d_model:
        report.conflicts.append(
            f"widths: sum of path widths {sum(widths)} != target d_model={target.d_model}"
        )
    for name, tag in composition_provenance(target).items() if report.ok else ():
        if tag == "reused":
            layer = int(name.split(".")[0].removeprefix("parallel"))
            slot = int(name.split(".")[1].removeprefix("path"))
            src = f"path {slot + 1} block_before{layer}.{name.split('.', 2)[2]}"
        elif tag == "concatenated":
            src = f"all paths {name}"
        else:
            src = "init policy"
        report.entries.append((name, tag, src))
    return report


def compose(plan: CompositionPlan, rng: RngState) -> PaPaformerModel:
    """Build the composite model; deterministic given (plan, rng seed)."""
    report = validate_plan(plan)
    if not report.ok:
        raise CompositionError("; ".join(report.conflicts))
    target = plan.target_config
    paths = [load_checkpoint(p).model for p in plan.path_checkpoints]
    model = build(target, rng)

    model.embed.data = np.concatenate([p.embed.data for p in paths], axis=1)
    model.lm_head.data = np.concatenate([p.lm_head.data for p in paths], axis=0)
    for j, layer in enumerate(model.parallel_layers):
        for i, src in enumerate(paths):
            src_block = src.blocks_before[j]
            dst_block = layer.paths[i]
            for attr in _PATH_BLOCK_NAMES:
                src_t = getattr(src_block, attr)
                getattr(dst_block, attr).data = src_t.data.copy()
    return model

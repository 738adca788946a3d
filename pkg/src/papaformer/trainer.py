"""Deterministic training loop and the two-phase path/composite regimen.

One logical optimizer step accumulates gradients over ``grad_accum_steps``
micro-batches (each micro loss scaled by 1/accum so accumulation equals one
big batch), then applies a decoupled-weight-decay Adam update at the cosine
annealed learning rate. All randomness flows through two serializable
RngState streams (data order, model noise), so identical seeds reproduce
loss trajectories bit-exactly and epoch-boundary checkpoints resume without
divergence.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from papaformer.blocks import ConfigError
from papaformer.checkpoint import save_checkpoint
from papaformer.data import ChunkStore, make_batches
from papaformer.losses import cross_entropy, total_loss
from papaformer.model import ModelConfig, PaPaformerModel, build, forward
from papaformer.tensor import NonFiniteError, RngState


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 2
    grad_accum_steps: int = 8
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-5
    seed: int = 42
    lambda_entropy: float = 0.01
    lambda_load: float = 0.01
    sign_entropy: int = 1
    sign_load: int = 1
    warmup_steps: int = 0
    grad_clip: float = 0.0  # 0 disables clipping
    max_steps: int | None = None  # cap on logical steps, for smoke runs

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.grad_accum_steps < 1:
            raise ConfigError("lr/batch_size/epochs/grad_accum_steps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        if self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and adam_eps > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)  # name -> first moment
    v: dict = field(default_factory=dict)  # name -> second moment
    step: int = 0

    @classmethod
    def init(cls, params: dict) -> "OptimizerState":
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
            step=0,
        )

    def tensors(self) -> dict:
        out = {f"m.{n}": a for n, a in self.m.items()}
        out.update({f"v.{n}": a for n, a in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, step: int) -> "OptimizerState":
        m = {n[2:]: a.copy() for n, a in tensors.items() if n.startswith("m.")}
        v = {n[2:]: a.copy() for n, a in tensors.items() if n.startswith("v.")}
        return cls(m=m, v=v, step=step)


def adamw_step(params: dict, state: OptimizerState, lr_t: float, cfg: TrainConfig) -> None:
    """In-place decoupled AdamW update; raises on non-finite gradients."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            state.step -= 1
            raise NonFiniteError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= np.asarray(lr_t * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), dtype=p.data.dtype)
        if cfg.weight_decay > 0:
            p.data -= np.asarray(lr_t * cfg.weight_decay * p.data, dtype=p.data.dtype)


def cosine_lr(step: int, total_steps: int, lr_max: float, warmup_steps: int = 0, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at total_steps."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps and step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


def clip_gradients(params: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total


@dataclass
class TrainState:
    opt: OptimizerState
    data_rng: RngState
    model_rng: RngState
    global_step: int = 0
    epochs_done: int = 0


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)  # per-step scalar dicts
    consumed: list = field(default_factory=list)  # (corpus, sub, epoch, start) per consumed chunk
    planned: list = field(default_factory=list)  # same, for the full batch plan
    checkpoints: list = field(default_factory=list)

    @property
    def losses(self) -> list:
        return [s["total"] for s in self.steps]


def _plan_epoch(chunks: list, epoch: int, cfg: TrainConfig, data_rng: RngState) -> list:
    pool = [c for c in chunks if c.epoch == epoch]
    if not pool:
        pool = list(chunks)  # chunk sets without epoch-distinct chunkings
    return make_batches([pool], cfg.batch_size, data_rng)


def _steps_in_epoch(n_batches: int, cfg: TrainConfig) -> int:
    return n_batches // cfg.grad_accum_steps


def train(
    model: PaPaformerModel,
    chunks: list,
    cfg: TrainConfig,
    state: TrainState | None = None,
    checkpoint_path: str | None = None,
    log_file=None,
) -> TrainReport:
    """Train ``model`` on the given chunks; deterministic under cfg.seed.

    Resuming: pass the ``TrainState`` reconstructed from an epoch-boundary
    checkpoint; planning replays the same seeded batch order, so resumed
    training is bit-identical to an uninterrupted run.
    """
    if state is None:
        state = TrainState(
            opt=OptimizerState.init(model.named_params()),
            data_rng=RngState(cfg.seed),
            model_rng=RngState(cfg.seed + 1),
        )
    params = model.named_params()
    report = TrainReport()

    # the full batch plan is derived up front from the data rng so both the
    # lr schedule horizon and provenance accounting are known exactly
    plan_rng = state.data_rng
    epoch_plans = []
    for epoch in range(1, cfg.epochs + 1):
        epoch_plans.append(_plan_epoch(chunks, epoch, cfg, plan_rng))
    total_steps = sum(_steps_in_epoch(len(p), cfg) for p in epoch_plans)
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    if total_steps == 0:
        raise ConfigError("not enough batches for a single optimizer step")
    for plan in epoch_plans:
        for batch in plan:
            report.planned.extend((c.corpus, c.sub_collection, c.epoch, c.start) for c in batch)

    for epoch_idx, plan in enumerate(epoch_plans, start=1):
        if epoch_idx <= state.epochs_done:
            continue
        n_steps = _steps_in_epoch(len(plan), cfg)
        for s in range(n_steps):
            if state.global_step >= total_steps:
                break
            lr_t = cosine_lr(state.global_step, total_steps, cfg.lr, cfg.warmup_steps)
            t0 = time.perf_counter()
            micro = plan[s * cfg.grad_accum_steps : (s + 1) * cfg.grad_accum_steps]
            acc = {"ce": 0.0, "entropy": 0.0, "load": 0.0, "total": 0.0}
            n_tokens = 0
            for batch in micro:
                tokens = np.stack([c.tokens for c in batch]).astype(np.int64)
                x, y = tokens[:, :-1], tokens[:, 1:]
                logits, records = forward(model, x, rng=state.model_rng, training=True)
                ce = cross_entropy(logits, y)
                breakdown = total_loss(
                    ce,
                    records,
                    cfg.lambda_entropy,
                    cfg.lambda_load,
                    cfg.sign_entropy,
                    cfg.sign_load,
                )
                if not np.isfinite(breakdown.total.data):
                    raise NonFiniteError(
                        f"non-finite loss at step {state.global_step}; last-good checkpoint retained"
                    )
                scaled = breakdown.total * (1.0 / cfg.grad_accum_steps)
                scaled.backward()
                for k in acc:
                    acc[k] += breakdown.scalars()[k] / cfg.grad_accum_steps
                n_tokens += x.size
                report.consumed.extend((c.corpus, c.sub_collection, c.epoch, c.start) for c in batch)
            if cfg.grad_clip > 0:
                clip_gradients(params, cfg.grad_clip)
            adamw_step(params, state.opt, lr_t, cfg)
            model.zero_grad()
            state.global_step += 1
            dt = time.perf_counter() - t0
            entry = {"step": state.global_step, "lr": lr_t, **acc, "tokens_per_sec": n_tokens / dt}
            report.steps.append(entry)
            if log_file is not None:
                log_file.write(
                    "step={step} lr={lr:.6g} ce={ce:.6f} entropy={entropy:.6f} "
                    "load={load:.6f} total={total:.6f} tokens_per_sec={tokens_per_sec:.0f}\n".format(**entry)
                )
        state.epochs_done = epoch_idx
        if checkpoint_path is not None:
            ckpt_path = checkpoint_path.format(epoch=epoch_idx)
            save_checkpoint(
                ckpt_path,
                model,
                provenance={n: "trained" for n in params},
                train_config=cfg.to_dict(),
                rng=state.model_rng,
                opt_tensors=state.opt.tensors(),
                extra={
                    "opt_step": state.opt.step,
                    "global_step": state.global_step,
                    "epochs_done": state.epochs_done,
                    "data_rng": {"seed": state.data_rng.seed, "position": state.data_rng.position},
                },
            )
            report.checkpoints.append(ckpt_path)
        if state.global_step >= total_steps:
            break
    return report


def state_from_checkpoint(ckpt) -> TrainState:
    """Rebuild a TrainState from a loaded Checkpoint for bit-exact resume."""
    extra = ckpt.extra
    data_rng_info = extra["data_rng"]
    return TrainState(
        opt=OptimizerState.from_tensors(ckpt.opt_tensors, step=extra["opt_step"]),
        data_rng=RngState(data_rng_info["seed"], 0),  # plan is re-derived from position 0
        model_rng=ckpt.rng.clone(),
        global_step=extra["global_step"],
        epochs_done=extra["epochs_done"],
    )


# -- two-phase regimen -----------------------------------------------------


def run_phase2(
    store: ChunkStore,
    path_config: ModelConfig,
    target_configs: dict,
    cfg: TrainConfig,
    out_dir: str,
    build_seed: int = 0,
) -> tuple:
    """Pretrain paths on the 60% sub-collections, compose, train on the 40%.

    ``target_configs`` maps run names to parallel ModelConfigs; each target's
    paths must have as many layer blocks as the target has parallel layers,
    so path models are trained per distinct depth. Returns (checkpoint paths,
    train reports) keyed by run name.
    """
    import os

    from papaformer.composer import CompositionPlan, compose, composition_provenance

    os.makedirs(out_dir, exist_ok=True)
    artifacts = {}
    reports = {}
    depths = sorted({t.n_parallel_layers for t in target_configs.values()})
    path_ckpts = {}
    for depth in depths:
        pc = ModelConfig.from_dict({**path_config.to_dict(), "n_layer_blocks": depth})
        for role, corpus in (("path1", "story"), ("path2", "math")):
            name = f"{role}_d{depth}"
            model = build(pc, RngState(build_seed))
            ckpt_path = os.path.join(out_dir, f"{name}.ppck")
            reports[name] = train(model, store.select(corpus=corpus, sub=60), cfg, checkpoint_path=ckpt_path)
            path_ckpts[(depth, role)] = ckpt_path
            artifacts[name] = ckpt_path
    sub40 = store.select(sub=40)
    for run_name, target in target_configs.items():
        depth = target.n_parallel_layers
        plan = CompositionPlan(
            path_checkpoints=[path_ckpts[(depth, "path1")], path_ckpts[(depth, "path2")]],
            target_config=target,
        )
        composite = compose(plan, RngState(build_seed + 1))
        composed_path = os.path.join(out_dir, f"{run_name}_composed.ppck")
        save_checkpoint(composed_path, composite, provenance=composition_provenance(target))
        artifacts[f"{run_name}_composed"] = composed_path
        ckpt_path = os.path.join(out_dir, f"{run_name}.ppck")
        report = train(composite, sub40, cfg, checkpoint_path=ckpt_path)
        # composite training must touch only the 40% sub-collections
        bad = [c for c in report.consumed if c[1] != 40]
        if bad:
            raise ConfigError(f"composite run {run_name} consumed non-40% chunks: {bad[:3]}")
        artifacts[run_name] = ckpt_path
        reports[run_name] = report
    return artifacts, reports

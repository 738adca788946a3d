"""Training objective: token cross-entropy plus routing regularizers.

The two auxiliary terms act on the routing weights pi emitted by Gumbel
connection blocks: the entropy term is the mean per-token entropy of pi,
the load term is the entropy of the batch-mean routing distribution. The
total is ce + sign_e * lambda_e * entropy + sign_l * lambda_l * load, with
both signs defaulting to +1 (the formulas as printed; see the sign_* knobs
for the variant that rewards soft/balanced routing instead).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from papaformer.tensor import Tensor

LOG_CLAMP = 1e-12
DEFAULT_LAMBDA = 0.01


@dataclass
class LossBreakdown:
    ce: Tensor
    entropy: Tensor
    load: Tensor
    total: Tensor
    lambda_entropy: float
    lambda_load: float
    sign_entropy: int
    sign_load: int

    def scalars(self) -> dict:
        return {
            "ce": float(self.ce.data),
            "entropy": float(self.entropy.data),
            "load": float(self.load.data),
            "total": float(self.total.data),
        }


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood with a stable log-sum-exp.

    ``logits`` is [..., vocab]; ``targets`` holds ids over the leading axes.
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    flat = logits.reshape(-1, vocab)
    ids = targets.reshape(-1)
    # log softmax via the stable softmax primitive
    log_probs = (flat.softmax(axis=-1) + LOG_CLAMP).log()
    picked = log_probs[np.arange(ids.size), ids]
    return -picked.mean()


def _entropy_of_rows(pi: Tensor) -> Tensor:
    """Row-wise -sum p log p with 0 log 0 := 0 (via clamping inside the log)."""
    return -(pi * (pi + LOG_CLAMP).log()).sum(axis=-1)


def entropy_loss(pi: Tensor) -> Tensor:
    """Mean per-token routing entropy over all k+1 slots."""
    return _entropy_of_rows(pi).mean()


def load_balance_loss(pi: Tensor) -> Tensor:
    """Entropy of the batch-mean routing distribution pi_bar."""
    leading = pi.ndim - 1
    pi_bar = pi.mean(axis=tuple(range(leading)))
    return _entropy_of_rows(pi_bar)


def total_loss(
    ce: Tensor,
    routing_records: list,
    lambda_entropy: float = DEFAULT_LAMBDA,
    lambda_load: float = DEFAULT_LAMBDA,
    sign_entropy: int = 1,
    sign_load: int = 1,
) -> LossBreakdown:
    """Assemble the full objective; aux terms average over routing layers.

    Models without Gumbel routing (share_linear, baselines) contribute no
    records, so total reduces to the cross-entropy.
    """
    if lambda_entropy < 0 or lambda_load < 0:
        raise ValueError("loss weights must be nonnegative")
    if sign_entropy not in (1, -1) or sign_load not in (1, -1):
        raise ValueError("sign switches must be +1 or -1")
    pis = [r.pi for r in routing_records if hasattr(r, "pi")]
    if pis:
        n = float(len(pis))
        ent = entropy_loss(pis[0]) * (1.0 / n)
        load = load_balance_loss(pis[0]) * (1.0 / n)
        for pi in pis[1:]:
            ent = ent + entropy_loss(pi) * (1.0 / n)
            load = load + load_balance_loss(pi) * (1.0 / n)
        total = ce + ent * float(sign_entropy * lambda_entropy) + load * float(sign_load * lambda_load)
    else:
        ent = Tensor(0.0)
        load = Tensor(0.0)
        total = ce
    return LossBreakdown(
        ce=ce,
        entropy=ent,
        load=load,
        total=total,
        lambda_entropy=lambda_entropy,
        lambda_load=lambda_load,
        sign_entropy=sign_entropy,
        sign_load=sign_load,
    )

"""Routing/dominance inspection, utilization tables, and text generation.

Gumbel models are probed by recording the routing distribution at the last
prompt position of every parallel layer and taking its argmax. Share-linear
models have no router, so dominance is read off the combiner instead: each
path's contribution is compared to the combined output by cosine similarity,
averaged over prompt positions. Utilization aggregates many traces into the
per-path selection shares and a domain accuracy where combined selections
count as incorrect.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from papaformer.model import PaPaformerModel, forward
from papaformer.tensor import RngState

COMBINED = "combined"


class AnalysisError(ValueError):
    """Analysis invoked on a model kind it does not apply to."""


def _selection_label(index: int, k: int) -> str:
    return COMBINED if index == k else f"path_{index + 1}"


@dataclass
class RoutingTrace:
    prompt_tokens: np.ndarray
    selections: list  # per parallel layer: path index in [0, k) or k for combined
    pis: list  # per parallel layer: the full routing distribution at the probe
    position: int
    k: int

    def labels(self) -> list:
        return [_selection_label(s, self.k) for s in self.selections]


@dataclass
class DominanceTrace:
    prompt_tokens: np.ndarray
    dominant: list  # per parallel layer: path index in [0, k)
    cosines: list  # per parallel layer: mean per-token cosine per path

    def labels(self) -> list:
        return [f"path_{i + 1}" for i in self.dominant]


@dataclass
class UtilizationReport:
    path_shares: list  # percentage per path
    combined_share: float
    accuracy: float  # percent of (prompt, layer) cells selecting the domain's path
    cells: int

    def shares(self) -> list:
        return self.path_shares + [self.combined_share]


def trace_routing(model: PaPaformerModel, prompt_tokens: np.ndarray, position: int | None = None) -> RoutingTrace:
    """Argmax routing per parallel layer at the probed prompt position."""
    kind = model.config.connection_kind
    if kind not in ("gumbel_v1", "gumbel_v2"):
        raise AnalysisError(
            f"routing traces need a Gumbel model, got {kind!r}; use trace_dominance for share_linear"
        )
    tokens = np.asarray(prompt_tokens).reshape(-1)
    pos = len(tokens) - 1 if position is None else position
    _, records = forward(model, tokens[None, :], rng=None, training=False)
    pis = [rec.pi.data[0, pos].copy() for rec in records]
    selections = [int(np.argmax(pi)) for pi in pis]  # np.argmax breaks ties at the lowest index
    return RoutingTrace(
        prompt_tokens=tokens,
        selections=selections,
        pis=pis,
        position=pos,
        k=model.config.k_paths,
    )


def _cosine_rows(a: np.ndarray, b: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    num = np.sum(a * b, axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return num / np.maximum(den, eps)


def trace_dominance(model: PaPaformerModel, prompt_tokens: np.ndarray) -> DominanceTrace:
    """Per-layer dominant path of a share_linear model by cosine to the mix.

    The expanding final layer changes width, so each path is represented by
    its contribution through its slice of the combiner; at equal widths the
    raw path output is compared directly.
    """
    if model.config.connection_kind != "share_linear":
        raise AnalysisError(
            f"dominance traces need a share_linear model, got {model.config.connection_kind!r}"
        )
    tokens = np.asarray(prompt_tokens).reshape(-1)
    _, records = forward(model, tokens[None, :], rng=None, training=False)
    d_path = model.config.d_path
    dominant, cosines = [], []
    for rec, layer in zip(records, model.parallel_layers):
        y = rec.combined.data[0]  # [T, d_out]
        scores = []
        for i, f in enumerate(rec.path_outputs):
            fi = f.data[0]
            if y.shape[-1] == fi.shape[-1]:
                rep = fi
            else:
                w = (layer.final_share or layer.connection).w.data
                rep = fi @ w[i * d_path : (i + 1) * d_path]
            scores.append(float(np.mean(_cosine_rows(rep, y))))
        dominant.append(int(np.argmax(scores)))
        cosines.append(scores)
    return DominanceTrace(prompt_tokens=tokens, dominant=dominant, cosines=cosines)


def utilization(traces: list, domains: list, domain_to_path: dict | None = None) -> UtilizationReport:
    """Selection shares and domain accuracy over all (prompt, layer) cells."""
    if len(traces) != len(domains):
        raise AnalysisError("each trace needs a domain label")
    if not traces:
        raise AnalysisError("no traces to aggregate")
    domain_to_path = domain_to_path or {"story": 0, "math": 1}
    k = max(t.k if isinstance(t, RoutingTrace) else len(t.cosines[0]) for t in traces)
    counts = np.zeros(k + 1, dtype=np.int64)
    correct = 0
    cells = 0
    for trace, domain in zip(traces, domains):
        if domain not in domain_to_path:
            raise AnalysisError(f"unknown domain {domain!r}")
        want = domain_to_path[domain]
        selections = trace.selections if isinstance(trace, RoutingTrace) else trace.dominant
        for s in selections:
            counts[s] += 1
            correct += s == want
            cells += 1
    shares = 100.0 * counts / cells
    return UtilizationReport(
        path_shares=[float(s) for s in shares[:k]],
        combined_share=float(shares[k]),
        accuracy=100.0 * correct / cells,
        cells=cells,
    )


def format_utilization(report: UtilizationReport) -> str:
    lines = [
        f"path_{i + 1:<9} {share:6.1f}%" for i, share in enumerate(report.path_shares)
    ]
    lines.append(f"{COMBINED:<11} {report.combined_share:6.1f}%")
    lines.append(f"{'accuracy':<11} {report.accuracy:6.1f}%")
    return "\n".join(lines)


def trace_records(traces: list, domains: list) -> list:
    """One structured record per prompt x layer cell for downstream tooling."""
    out = []
    for p, (trace, domain) in enumerate(zip(traces, domains)):
        for layer, label in enumerate(trace.labels()):
            out.append({"prompt": p, "domain": domain, "layer": layer, "selection": label})
    return out


# -- generation ------------------------------------------------------------


@dataclass
class GenerationStep:
    token: int
    top_tokens: list  # (token id, probability), highest first
    probability_mass: float  # softmax total, ~1 by construction


@dataclass
class GenerationResult:
    tokens: np.ndarray  # prompt + continuation
    new_tokens: list
    steps: list = field(default_factory=list)

    def text(self, tokenizer) -> str:
        return tokenizer.detokenize(np.asarray(self.tokens, dtype=np.uint32))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64) - z.max()
    e = np.exp(z)
    return e / e.sum()


def generate(
    model: PaPaformerModel,
    prompt_tokens: np.ndarray,
    max_new_tokens: int,
    mode: str = "greedy",
    temperature: float = 1.0,
    top_n: int = 5,
    rng: RngState | None = None,
) -> GenerationResult:
    """Greedy or temperature sampling with per-step top-n probabilities.

    Zero temperature falls back to greedy. Contexts longer than max_seq_len
    are truncated from the left with a warning, keeping the most recent
    tokens visible to the model.
    """
    if mode not in ("greedy", "sample"):
        raise AnalysisError(f"unknown generation mode {mode!r}")
    if mode == "sample" and temperature > 0 and rng is None:
        raise AnalysisError("temperature sampling needs an rng")
    tokens = list(np.asarray(prompt_tokens).reshape(-1))
    limit = model.config.max_seq_len
    result = GenerationResult(tokens=None, new_tokens=[])
    for _ in range(max_new_tokens):
        context = tokens
        if len(context) > limit:
            warnings.warn(f"context of {len(context)} tokens truncated to the last {limit}")
            context = context[-limit:]
        logits, _ = forward(model, np.asarray(context, dtype=np.int64), rng=None, training=False)
        probs = _softmax(logits.data[-1])
        order = np.argsort(-probs)
        if mode == "greedy" or temperature <= 0:
            nxt = int(order[0])
        else:
            scaled = _softmax(logits.data[-1] / temperature)
            u = float(rng.uniform(()))
            nxt = int(np.searchsorted(np.cumsum(scaled), u))
        result.steps.append(
            GenerationStep(
                token=nxt,
                top_tokens=[(int(t), float(probs[t])) for t in order[:top_n]],
                probability_mass=float(probs.sum()),
            )
        )
        tokens.append(nxt)
        result.new_tokens.append(nxt)
    result.tokens = np.asarray(tokens, dtype=np.int64)
    return result


def format_generation(result: GenerationResult, tokenizer) -> str:
    """Per-step next-token report: predicted token with top-n percentages."""
    inv = {v: k for k, v in tokenizer.vocab.items()}
    lines = []
    for step in result.steps:
        tops = ", ".join(f"{inv.get(t, '?')} — {100 * p:.1f}%" for t, p in step.top_tokens)
        lines.append(f"{inv.get(step.token, '?')}: {tops}")
    return "\n".join(lines)

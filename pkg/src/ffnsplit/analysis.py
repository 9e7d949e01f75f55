"""FLOPs accounting, routing statistics and held-out evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .moe import MoeConfig, RoutingRecord, selection_mask
from .tensor import ContractError

FLOP_CONVENTION = "1 multiply-accumulate = 2 FLOPs; softmax, norms, activations and biases not counted"


def _r9(x):
    return float(format(float(x), ".9g"))


@dataclass
class FlopsReport:
    convention: str
    d_model: int
    d_hidden: int
    n_layers: int
    seq_len: int
    n_experts: int
    top_k: int
    attention_per_token: float
    dense_ffn_per_token: float
    router_per_token: float
    factorized_ffn_per_token: float
    dense_total_per_token: float
    factorized_total_per_token: float
    dense_total_per_sequence: float
    factorized_total_per_sequence: float
    reduction_ffn: float
    reduction_total: float

    def to_dict(self) -> dict:
        return {k: (_r9(v) if isinstance(v, float) else v) for k, v in asdict(self).items()}


def count_flops(d_model: int, d_hidden: int, n_layers: int, cfg: MoeConfig, seq_len: int) -> FlopsReport:
    """Analytic per-layer costs summed over ``n_layers`` blocks (attention + FFN only).

    Dense FFN per token is ``4 d_e d_h``; the factorized layer runs ``K`` of
    ``N`` experts, ``4 d_e d_h K / N``, plus the router ``2 d_e N``.
    Attention per sequence is ``8 n d_e^2`` for the four projections and
    ``4 n^2 d_e`` for scores and the weighted value sum.
    """
    d, h, n = d_model, d_hidden, seq_len
    attn_seq = 8.0 * n * d * d + 4.0 * n * n * d
    attn_tok = attn_seq / n
    dense = 4.0 * d * h
    router = 2.0 * d * cfg.n_experts
    fact = dense * cfg.top_k / cfg.n_experts + router
    dense_tot = n_layers * (attn_tok + dense)
    fact_tot = n_layers * (attn_tok + fact)
    return FlopsReport(
        FLOP_CONVENTION, d, h, n_layers, n, cfg.n_experts, cfg.top_k,
        n_layers * attn_tok, n_layers * dense, n_layers * router, n_layers * fact,
        dense_tot, fact_tot, dense_tot * n, fact_tot * n,
        1.0 - fact / dense, 1.0 - fact_tot / dense_tot)


# -- routing statistics ------------------------------------------------------------

@dataclass
class RouteStats:
    steps: list[int]
    layers: list[int]
    usage: dict            # layer -> list (per snapshot) of per-expert counts
    entropy: dict          # layer -> list (per snapshot)
    churn: dict            # layer -> list (per consecutive pair)
    mean_entropy: list[float]
    mean_churn: list[float]

    def to_dict(self) -> dict:
        return {"steps": self.steps, "layers": self.layers,
                "usage": {str(k): v for k, v in self.usage.items()},
                "entropy": {str(k): [_r9(e) for e in v] for k, v in self.entropy.items()},
                "churn": {str(k): [_r9(c) for c in v] for k, v in self.churn.items()},
                "mean_entropy": [_r9(e) for e in self.mean_entropy],
                "mean_churn": [_r9(c) for c in self.mean_churn]}


def usage_entropy(counts: np.ndarray) -> float:
    """Shannon entropy (nats) of the empirical expert-usage distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum()) + 0.0


def churn(prev: np.ndarray, cur: np.ndarray) -> float:
    """Fraction of tokens whose selected expert *set* differs between two snapshots."""
    prev, cur = np.asarray(prev), np.asarray(cur)
    if prev.shape != cur.shape:
        raise ContractError(f"snapshot shape mismatch: {prev.shape} vs {cur.shape}")
    n = int(max(prev.max(initial=0), cur.max(initial=0))) + 1
    changed = (selection_mask(prev, n) != selection_mask(cur, n)).any(axis=-1)
    return float(changed.mean())


def route_stats(snapshots: Sequence[Sequence[RoutingRecord]] | Sequence[RoutingRecord]) -> RouteStats:
    """Usage, entropy and churn over snapshots taken on a fixed probe batch.

    Accepts either a list of snapshots (each a list of per-layer records) or
    a flat list of records, which is grouped by step.
    """
    flat: list[RoutingRecord] = []
    for item in snapshots:
        flat.extend(item if isinstance(item, (list, tuple)) else [item])
    if not flat:
        raise ContractError("no routing records")
    steps = sorted({r.step for r in flat})
    layers = sorted({r.layer for r in flat})
    by_key = {(r.step, r.layer): r for r in flat}
    usage, entropy, churns = {}, {}, {}
    for layer in layers:
        recs = [by_key[(s, layer)] for s in steps if (s, layer) in by_key]
        N = recs[0].probs.shape[-1]
        usage[layer] = [np.bincount(r.selected.reshape(-1), minlength=N).tolist() for r in recs]
        entropy[layer] = [usage_entropy(u) for u in usage[layer]]
        churns[layer] = [churn(a.selected, b.selected) for a, b in zip(recs, recs[1:])]
    mean_entropy = [float(np.mean(col)) for col in zip(*entropy.values())]
    mean_churn = [float(np.mean(col)) for col in zip(*churns.values())]
    return RouteStats(steps, layers, usage, entropy, churns, mean_entropy, mean_churn)


def smoothed(values: Sequence[float], window: int = 3) -> list[float]:
    """Trailing moving average (shorter window at the start)."""
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo:i + 1])))
    return out


# -- evaluation -----------------------------------------------------------------------

@dataclass
class EvalReport:
    cross_entropy: float
    perplexity: float
    tokens: int
    maintenance: float | None = None
    ce_ratio: float | None = None
    label: str = ""

    def to_dict(self) -> dict:
        return {k: (_r9(v) if isinstance(v, float) else v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def evaluate(logits_fn: Callable[[np.ndarray], np.ndarray], windows: Iterable[tuple[np.ndarray, np.ndarray]],
             teacher: EvalReport | None = None, batch_size: int = 32, label: str = "") -> EvalReport:
    """Mean next-token cross-entropy of ``logits_fn`` over held-out windows.

    ``windows`` yields ``(inputs[n], targets[n])`` in a fixed order. When a
    teacher report is given, maintenance is ``exp(-(CE - CE_teacher))`` and
    ``ce_ratio`` is ``CE_teacher / CE``.
    """
    total, count = 0.0, 0
    buf_x, buf_y = [], []

    def flush():
        nonlocal total, count
        xb, yb = np.stack(buf_x), np.stack(buf_y)
        lp = _log_softmax_np(logits_fn(xb))
        total += float(-np.take_along_axis(lp, yb[..., None], axis=-1).sum())
        count += yb.size
        buf_x.clear()
        buf_y.clear()

    for xw, yw in windows:
        buf_x.append(np.asarray(xw))
        buf_y.append(np.asarray(yw))
        if len(buf_x) == batch_size:
            flush()
    if buf_x:
        flush()
    if count == 0:
        raise ContractError("evaluation stream is empty")
    ce = total / count
    report = EvalReport(ce, math.exp(ce), count, label=label)
    if teacher is not None:
        report.maintenance = math.exp(-(ce - teacher.cross_entropy))
        report.ce_ratio = teacher.cross_entropy / ce
    return report

"""Routed expert layer: linear softmax router, TopK selection, unweighted expert sum."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .factorize import ExpertBank
from .tensor import ContractError, DimensionError, Tensor, default_dtype, grouped_matmul, linear_forward, \
    scatter_add_rows, silu, softmax


@dataclass(frozen=True)
class MoeConfig:
    n_experts: int = 4
    top_k: int = 2
    routers_per_layer: int = 1

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ContractError(f"need 1 <= K <= N, got K={self.top_k}, N={self.n_experts}")
        R = self.routers_per_layer
        if R < 1 or self.n_experts % R or self.top_k % R:
            raise ContractError(f"routers_per_layer={R} must divide both N and K")


@dataclass
class RouterParams:
    w3: Tensor  # [d_e, N]
    b3: Tensor  # [N]

    @property
    def n_experts(self) -> int:
        return self.w3.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w3, self.b3]


def init_router(d_model: int, n_experts: int, rng: np.random.Generator, std: float = 0.02, dtype=None
                ) -> RouterParams:
    dtype = dtype or default_dtype()
    return RouterParams(Tensor((rng.standard_normal((d_model, n_experts)) * std).astype(dtype)),
                        Tensor(np.zeros(n_experts, dtype=dtype)))


@dataclass
class RoutingRecord:
    probs: np.ndarray      # [b, n, N]
    selected: np.ndarray   # [b, n, K] ints
    layer: int = 0
    step: int = 0

    def rows(self) -> Iterable[dict]:
        b, n, _ = self.probs.shape
        for i in range(b):
            for t in range(n):
                yield {"step": self.step, "layer": self.layer, "sample": i, "position": t,
                       "selected": [int(s) for s in self.selected[i, t]],
                       "probs": [float(p) for p in self.probs[i, t]]}


def router_forward(x: Tensor, rp: RouterParams, routers: int = 1) -> Tensor:
    """``softmax(x W3 + b3)``; with several routers each owns a disjoint group.

    Group-wise softmaxes are scaled by ``1/routers`` so rows still sum to one.
    """
    logits = linear_forward(x, rp.w3, rp.b3)
    if routers == 1:
        return softmax(logits)
    N = rp.n_experts
    lead = logits.shape[:-1]
    grouped = softmax(logits.reshape(*lead, routers, N // routers))
    return grouped.reshape(*lead, N) * (1.0 / routers)


def topk_select(probs: np.ndarray, k: int, routers: int = 1) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; ties go to the lower index.

    Returned indices are ordered by decreasing probability.
    """
    probs = np.asarray(probs)
    N = probs.shape[-1]
    if not 1 <= k <= N:
        raise ContractError(f"K={k} outside [1, {N}]")
    if routers > 1:
        g = N // routers
        parts = [topk_select(probs[..., r * g:(r + 1) * g], k // routers) + r * g for r in range(routers)]
        return np.concatenate(parts, axis=-1)
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def selection_mask(selected: np.ndarray, n_experts: int) -> np.ndarray:
    """0/1 mask ``[..., N]`` from index sets ``[..., K]``."""
    mask = np.zeros(selected.shape[:-1] + (n_experts,), dtype=bool)
    np.put_along_axis(mask, selected, True, axis=-1)
    return mask


def random_selection(shape: tuple, n_experts: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random ``k``-subsets of experts per token."""
    return np.argsort(rng.random(tuple(shape) + (n_experts,)), axis=-1)[..., :k]


class ExpertCounter:
    """Counts token-expert evaluations performed by :func:`experts_forward`."""

    def __init__(self):
        self.token_evals = 0
        self.per_expert: dict[int, int] = {}

    def add(self, expert: int, tokens: int) -> None:
        self.token_evals += tokens
        self.per_expert[expert] = self.per_expert.get(expert, 0) + tokens


def experts_forward(x: Tensor, bank: ExpertBank, selected: np.ndarray, counter: ExpertCounter | None = None
                    ) -> Tensor:
    """Sparse unweighted sum ``sum_{i in selected} silu(x W1_i + b1_i) W2_i + b2``.

    Only the selected tokens are pushed through each expert block. Router
    probabilities play no part here; they gate selection only.
    """
    selected = np.asarray(selected)
    if selected.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"selection {selected.shape} does not match tokens {x.shape[:-1]}")
    flat_sel = selected.reshape(int(np.prod(selected.shape[:-1])), selected.shape[-1])
    if flat_sel.size:
        if flat_sel.min() < 0 or flat_sel.max() >= bank.n_experts:
            raise ContractError("selected expert index out of range")
        srt = np.sort(flat_sel, axis=-1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise ContractError("duplicate expert indices in a token's selection")
    d = x.shape[-1]
    xf = x.reshape(-1, d)
    M = xf.shape[0]
    y = None
    for i in range(bank.n_experts):
        rows = np.flatnonzero((flat_sel == i).any(axis=-1)) if flat_sel.size else np.zeros(0, dtype=np.int64)
        if rows.size == 0:
            continue
        if counter is not None:
            counter.add(i, rows.size)
        s = bank.block(i)
        h = silu(linear_forward(xf[rows], bank.w1[:, s], bank.b1[s]))
        part = scatter_add_rows(h @ bank.w2[s, :], rows, M)
        y = part if y is None else y + part
    out = bank.b2 + (0.0 * xf if y is None else y)
    return out.reshape(*x.shape[:-1], bank.d_model)


def all_expert_outputs(x: Tensor, bank: ExpertBank, with_bias: bool = True) -> Tensor:
    """Every expert's standalone output, stacked to ``[..., N, d_e]``.

    Each slice is ``silu(x W1_i + b1_i) W2_i`` (+ ``b2`` when ``with_bias``).
    """
    lead = x.shape[:-1]
    N, dn = bank.n_experts, bank.d_expert
    h = silu(linear_forward(x, bank.w1, bank.b1)).reshape(*lead, N, dn)
    out = grouped_matmul(h, bank.w2.reshape(N, dn, bank.d_model))
    return out + bank.b2 if with_bias else out


def masked_expert_sum(expert_out: Tensor, mask: np.ndarray, b2: Tensor) -> Tensor:
    """Sum stacked bias-free expert outputs over the selected experts, then add ``b2`` once."""
    return (expert_out * mask[..., None].astype(expert_out.dtype)).sum(axis=-2) + b2


@dataclass
class MoeLayer:
    bank: ExpertBank
    router: RouterParams
    cfg: MoeConfig

    def __post_init__(self):
        if self.router.n_experts != self.bank.n_experts or self.cfg.n_experts != self.bank.n_experts:
            raise ContractError(f"router width {self.router.n_experts}, bank N {self.bank.n_experts} and "
                                f"config N {self.cfg.n_experts} disagree")


def moe_ffn_forward(x: Tensor, bank: ExpertBank, rp: RouterParams, cfg: MoeConfig,
                    counter: ExpertCounter | None = None, layer: int = 0, step: int = 0
                    ) -> tuple[Tensor, RoutingRecord]:
    MoeLayer(bank, rp, cfg)
    probs = router_forward(x, rp, cfg.routers_per_layer)
    selected = topk_select(probs.data, cfg.top_k, cfg.routers_per_layer)
    y = experts_forward(x, bank, selected, counter)
    p = probs.data if probs.ndim == 3 else probs.data.reshape((1,) * (3 - probs.ndim) + probs.shape)
    s = selected if selected.ndim == 3 else selected.reshape(p.shape[:-1] + (selected.shape[-1],))
    return y, RoutingRecord(p, s, layer, step)


# -- route trace export ----------------------------------------------------------

ROUTE_FIELDS = ["step", "layer", "sample", "position", "selected", "probs"]


def _fmt(x: float) -> str:
    return format(x, ".9g")


def write_routes_csv(records: Iterable[RoutingRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUTE_FIELDS)
        for rec in records:
            for row in rec.rows():
                w.writerow([row["step"], row["layer"], row["sample"], row["position"],
                            ";".join(str(s) for s in row["selected"]),
                            ";".join(_fmt(p) for p in row["probs"])])
    return path


def write_routes_jsonl(records: Iterable[RoutingRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            for row in rec.rows():
                row["probs"] = [float(_fmt(p)) for p in row["probs"]]
                fh.write(json.dumps(row) + "\n")
    return path


def read_routes_csv(path) -> list[RoutingRecord]:
    """Rebuild one record per (step, layer) from a CSV trace."""
    groups: dict[tuple[int, int], list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["step"]), int(row["layer"]))
            groups.setdefault(key, []).append(
                (int(row["sample"]), int(row["position"]),
                 [int(s) for s in row["selected"].split(";") if s != ""],
                 [float(p) for p in row["probs"].split(";")]))
    records = []
    for (step, layer), rows in sorted(groups.items()):
        b = max(r[0] for r in rows) + 1
        n = max(r[1] for r in rows) + 1
        N = len(rows[0][3])
        K = len(rows[0][2])
        probs = np.zeros((b, n, N))
        sel = np.zeros((b, n, K), dtype=np.int64)
        for i, t, s, p in rows:
            probs[i, t] = p
            sel[i, t] = s
        records.append(RoutingRecord(probs, sel, layer, step))
    return records

"""Pseudo allocations and the loss terms used to train routers and experts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import cross_entropy
from .tensor import ContractError, DimensionError, Tensor

LOG_FLOOR = 1e-12


@dataclass
class PseudoAllocation:
    allocation: np.ndarray  # [..., N] 0/1 with exactly K ones per token
    distances: np.ndarray   # [..., N]


def smallest_k(values: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask of the ``k`` smallest entries per row (ties to the lower index)."""
    values = np.asarray(values)
    N = values.shape[-1]
    if not 1 <= k <= N:
        raise ContractError(f"K={k} outside [1, {N}]")
    idx = np.argsort(values, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(values.shape, dtype=np.int8)
    np.put_along_axis(mask, idx, 1, axis=-1)
    return mask


def expert_distances(teacher_out: np.ndarray, expert_outs: np.ndarray) -> np.ndarray:
    """``D[..., k] = mean_d (f_k - f_teacher)^2`` for every expert ``k``."""
    teacher_out = np.asarray(teacher_out)
    expert_outs = np.asarray(expert_outs)
    if expert_outs.shape[:-2] != teacher_out.shape[:-1] or expert_outs.shape[-1] != teacher_out.shape[-1]:
        raise DimensionError(f"expert outputs {expert_outs.shape} vs teacher output {teacher_out.shape}")
    diff = expert_outs - teacher_out[..., None, :]
    return (diff * diff).mean(axis=-1)


def pseudo_allocation(teacher_out: np.ndarray, expert_outs: np.ndarray, k: int) -> PseudoAllocation:
    """Mark the ``k`` experts whose standalone output is closest to the teacher FFN.

    ``expert_outs`` must hold all ``N`` experts, shape ``[..., N, d_e]``.
    """
    if k > np.shape(expert_outs)[-2]:
        raise ContractError(f"K={k} exceeds the number of experts {np.shape(expert_outs)[-2]}")
    d = expert_distances(teacher_out, expert_outs)
    return PseudoAllocation(smallest_k(d, k), d)


def pa_loss(allocations: Sequence[np.ndarray], probs: Sequence[Tensor], n_experts: int,
            n_layers: int | None = None) -> Tensor:
    """Cross-entropy between pseudo allocations and router probabilities.

    ``-(1/N) * mean_layers sum_experts mean_tokens A * log R``, with ``log``
    clamped at ``1e-12``. Pass one array/tensor per layer.
    """
    if isinstance(probs, Tensor):
        probs, allocations = [probs], [allocations]
    L = n_layers if n_layers is not None else len(probs)
    if len(probs) != len(allocations) or L != len(probs):
        raise DimensionError(f"{len(allocations)} allocations, {len(probs)} router outputs, L={L}")
    total = None
    for a, r in zip(allocations, probs):
        a = np.asarray(a)
        if a.shape != r.shape:
            raise DimensionError(f"allocation {a.shape} vs router output {r.shape}")
        tokens = int(np.prod(r.shape[:-1]))
        term = (r.clamp_min(LOG_FLOOR).log() * a.astype(r.dtype)).sum() * (1.0 / tokens)
        total = term if total is None else total + term
    return total * (-1.0 / (n_experts * L))


def ft_loss(logits: Tensor, labels) -> Tensor:
    """Mean next-token cross-entropy."""
    return cross_entropy(logits, labels)


def balance_loss(probs: Tensor | Sequence[Tensor], masks, k: int, n_experts: int) -> Tensor:
    """``(K/N) * mean_tokens sum_i v_i R_i``, averaged over layers when given a list."""
    if isinstance(probs, Tensor):
        probs, masks = [probs], [masks]
    total = None
    for r, v in zip(probs, masks):
        v = np.asarray(v)
        if v.shape != r.shape:
            raise DimensionError(f"selection mask {v.shape} vs router output {r.shape}")
        tokens = int(np.prod(r.shape[:-1]))
        term = (r * v.astype(r.dtype)).sum() * (k / n_experts / tokens)
        total = term if total is None else total + term
    return total * (1.0 / len(probs))


def overall_loss(l_ft, l_pa, alpha: float):
    return l_ft + alpha * l_pa


def feature_mse(student_out: Sequence[Tensor], teacher_out: Sequence[np.ndarray]) -> Tensor:
    """Mean squared error between routed FFN outputs and teacher FFN outputs, averaged over layers."""
    total = None
    for s, t in zip(student_out, teacher_out):
        d = s - Tensor(np.asarray(t, dtype=s.dtype))
        term = (d * d).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(student_out))

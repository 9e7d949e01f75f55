"""Permutation split of a dense FFN into equal-width experts.

A :class:`PermutationMap` stores ``delta`` where ``delta[q] = p`` means slot
``q`` of the reordered hidden layer takes old neuron ``p``. Splitting
column-permutes ``W1``/``b1``, row-permutes ``W2`` the same way and cuts the
result into ``N`` contiguous blocks; ``b2`` is kept once. Because the
permutation only shuffles hidden units, the sum over all experts reproduces
the dense FFN for any ``delta``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import FfnWeights, ffn_forward
from .tensor import ContractError, Tensor, no_grad, silu

STRATEGIES = ("contiguous", "random", "coactivation")


class ConfigurationError(ValueError):
    pass


@dataclass
class PermutationMap:
    delta: np.ndarray
    strategy: str = "contiguous"
    seed: int | None = None

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.int64)
        n = len(self.delta)
        if self.delta.ndim != 1 or not np.array_equal(np.sort(self.delta), np.arange(n)):
            raise ContractError("delta must be a bijection on [0, d_h)")

    @property
    def size(self) -> int:
        return len(self.delta)

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.delta)
        inv[self.delta] = np.arange(self.size)
        return inv

    def to_dict(self) -> dict:
        return {"delta": self.delta.tolist(), "strategy": self.strategy, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> PermutationMap:
        return cls(np.asarray(d["delta"]), d.get("strategy", "contiguous"), d.get("seed"))


def _check_divides(d_h: int, n_experts: int) -> None:
    if n_experts < 1 or d_h % n_experts:
        raise ConfigurationError(f"expert count {n_experts} does not divide hidden width {d_h}")


def coactivation_groups(acts: np.ndarray, n_groups: int) -> list[list[int]]:
    """Greedy balanced grouping of neurons by activation correlation.

    ``acts`` is ``[S, d_h]``. Each group is seeded with the most correlated
    pair still unassigned, then grown one neuron at a time by the highest
    mean correlation to the group until it holds ``d_h / n_groups`` neurons.
    """
    S, d_h = acts.shape
    size = d_h // n_groups
    a = acts.astype(np.float64)
    a = a - a.mean(axis=0)
    norms = np.sqrt((a * a).sum(axis=0))
    norms[norms == 0] = 1.0
    corr = (a.T @ a) / np.outer(norms, norms)
    np.fill_diagonal(corr, -np.inf)
    free = np.ones(d_h, dtype=bool)
    groups = []
    for _ in range(n_groups):
        members: list[int] = []
        if size == 1:
            members = [int(np.flatnonzero(free)[0])]
        else:
            sub = np.where(np.outer(free, free), corr, -np.inf)
            i, j = np.unravel_index(int(np.argmax(sub)), sub.shape)
            members = sorted((int(i), int(j)))
        free[members] = False
        while len(members) < size:
            score = corr[:, members].mean(axis=1)
            score[~free] = -np.inf
            k = int(np.argmax(score))
            members.append(k)
            free[k] = False
        groups.append(sorted(members))
    return groups


def build_permutation(strategy: str, d_h: int, n_experts: int, calib: np.ndarray | None = None,
                      seed: int = 0) -> PermutationMap:
    _check_divides(d_h, n_experts)
    if strategy == "contiguous":
        return PermutationMap(np.arange(d_h), strategy, None)
    if strategy == "random":
        # Fisher-Yates with a seeded generator
        rng = np.random.default_rng(seed)
        delta = np.arange(d_h)
        for i in range(d_h - 1, 0, -1):
            j = int(rng.integers(0, i + 1))
            delta[i], delta[j] = delta[j], delta[i]
        return PermutationMap(delta, strategy, seed)
    if strategy == "coactivation":
        if calib is None:
            raise ContractError("coactivation strategy needs calibration activations")
        calib = np.asarray(calib)
        if calib.ndim != 2 or calib.shape[1] != d_h:
            raise ContractError(f"calibration activations must be [S, {d_h}], got {calib.shape}")
        groups = coactivation_groups(calib, n_experts)
        return PermutationMap(np.concatenate(groups), strategy, seed)
    raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def permutation_matrix(pm: PermutationMap) -> np.ndarray:
    """Dense 0/1 matrix with ``P[p, q] = 1`` iff ``delta[q] = p``."""
    P = np.zeros((pm.size, pm.size))
    P[pm.delta, np.arange(pm.size)] = 1.0
    return P


@dataclass
class ExpertBank:
    """``N`` equal-width sub-FFNs laid out contiguously, plus the shared ``b2``.

    ``w1`` is ``[d_e, N*d_n]``, ``b1`` is ``[N*d_n]`` and ``w2`` is
    ``[N*d_n, d_e]``; expert ``i`` owns hidden slots ``[i*d_n, (i+1)*d_n)``.
    """
    n_experts: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    perm: PermutationMap = field(default_factory=lambda: PermutationMap(np.arange(0)))

    @property
    def d_model(self) -> int:
        return self.w1.shape[0]

    @property
    def d_expert(self) -> int:
        return self.w1.shape[1] // self.n_experts

    def block(self, i: int) -> slice:
        if not 0 <= i < self.n_experts:
            raise ContractError(f"expert index {i} out of range [0, {self.n_experts})")
        return slice(i * self.d_expert, (i + 1) * self.d_expert)

    def expert(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(W1_i, b1_i, W2_i)`` as arrays."""
        s = self.block(i)
        return self.w1.data[:, s], self.b1.data[s], self.w2.data[s, :]

    def parameters(self) -> list[Tensor]:
        # b2 is inherited from the teacher and stays fixed with it
        return [self.w1, self.b1, self.w2]

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + "w1": self.w1.data, prefix + "b1": self.b1.data,
                prefix + "w2": self.w2.data, prefix + "b2": self.b2.data}


def split_ffn(w: FfnWeights, pm: PermutationMap, n_experts: int) -> ExpertBank:
    d_h = w.d_hidden
    _check_divides(d_h, n_experts)
    if pm.size != d_h:
        raise ContractError(f"permutation size {pm.size} != hidden width {d_h}")
    d = pm.delta
    # W1 P: new column q is old column delta[q]; P^T W2: new row q is old row delta[q]
    return ExpertBank(n_experts,
                      Tensor(w.w1.data[:, d].copy()), Tensor(w.b1.data[d].copy()),
                      Tensor(w.w2.data[d, :].copy()), Tensor(w.b2.data.copy()), pm)


def merge_experts(bank: ExpertBank) -> FfnWeights:
    """Undo :func:`split_ffn`: concatenate blocks and apply the inverse permutation."""
    inv = bank.perm.inverse()
    return FfnWeights(Tensor(bank.w1.data[:, inv].copy()), Tensor(bank.b1.data[inv].copy()),
                      Tensor(bank.w2.data[inv, :].copy()), Tensor(bank.b2.data.copy()))


def expert_sum(x: np.ndarray, bank: ExpertBank) -> np.ndarray:
    """All-expert output ``sum_i silu(x W1_i + b1_i) W2_i + b2``, one block at a time."""
    y = np.zeros(x.shape[:-1] + (bank.d_model,), dtype=x.dtype)
    for i in range(bank.n_experts):
        w1, b1, w2 = bank.expert(i)
        with no_grad():
            y = y + (silu(Tensor(x @ w1 + b1)).data @ w2)
    return y + bank.b2.data


@dataclass
class Certificate:
    strategy: str
    seed: int | None
    n_experts: int
    samples: int
    tol: float
    max_abs: dict
    max_rel: dict
    passed: bool
    failures: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path


def _deviation(w: FfnWeights, bank: ExpertBank, x: np.ndarray, dtype) -> tuple[float, float]:
    wt = FfnWeights(*(Tensor(t.data.astype(dtype)) for t in (w.w1, w.b1, w.w2, w.b2)))
    bt = ExpertBank(bank.n_experts, *(Tensor(t.data.astype(dtype)) for t in (bank.w1, bank.b1, bank.w2, bank.b2)),
                    perm=bank.perm)
    xt = x.astype(dtype)
    with no_grad():
        ref = ffn_forward(Tensor(xt), wt).data.astype(np.float64)
    got = expert_sum(xt, bt).astype(np.float64)
    abs_dev = float(np.abs(got - ref).max())
    return abs_dev, abs_dev / max(float(np.abs(ref).max()), np.finfo(np.float64).tiny)


def verify_equivalence(w: FfnWeights, bank: ExpertBank, samples: int = 1000, tol: float = 1e-10,
                       f32_tol: float = 1e-5, seed: int = 0, x: np.ndarray | None = None) -> Certificate:
    """Compare the all-expert sum against the dense FFN in float64 and float32.

    Relative deviation is ``max|sum - dense| / max|dense|`` over the samples.
    The certificate passes when the float64 deviation is within ``tol`` and
    the float32 one within ``f32_tol``.
    """
    if bank.d_model != w.d_model or bank.w1.shape[1] != w.d_hidden:
        raise ContractError(f"bank [{bank.d_model}x{bank.w1.shape[1]}] does not match FFN "
                            f"[{w.d_model}x{w.d_hidden}]")
    if x is None:
        x = np.random.default_rng(seed).standard_normal((samples, w.d_model))
    max_abs, max_rel = {}, {}
    for name, dtype in (("float64", np.float64), ("float32", np.float32)):
        max_abs[name], max_rel[name] = _deviation(w, bank, x, dtype)
    failures = []
    if not max_rel["float64"] <= tol:
        failures.append(f"float64 relative deviation {max_rel['float64']:.3e} > {tol:.1e}")
    if not max_rel["float32"] <= f32_tol:
        failures.append(f"float32 relative deviation {max_rel['float32']:.3e} > {f32_tol:.1e}")
    return Certificate(bank.perm.strategy, bank.perm.seed, bank.n_experts, len(x), tol,
                       max_abs, max_rel, not failures, failures)


def hidden_activations(x: np.ndarray, w: FfnWeights) -> np.ndarray:
    """``silu(x W1 + b1)`` for calibration of the coactivation strategy."""
    with no_grad():
        return silu(Tensor(x @ w.w1.data + w.b1.data)).data

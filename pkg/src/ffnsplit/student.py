"""The factorized student: teacher weights with each FFN swapped for a routed expert layer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .factorize import ExpertBank, PermutationMap, build_permutation, hidden_activations, split_ffn
from .losses import pseudo_allocation
from .model import ModelConfig, ModelWeights, attention_residual, embed, ffn_forward, head_forward, rms_norm
from .moe import (
    ExpertCounter,
    MoeConfig,
    MoeLayer,
    RouterParams,
    RoutingRecord,
    all_expert_outputs,
    experts_forward,
    init_router,
    masked_expert_sum,
    random_selection,
    router_forward,
    selection_mask,
    topk_select,
)
from .tensor import Tensor, no_grad

ROUTING_MODES = ("router", "random")


@dataclass
class Student:
    base: ModelWeights
    layers: list[MoeLayer]
    cfg: MoeConfig

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    def expert_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.bank.parameters()]

    def router_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.router.parameters()]

    def freeze_all(self) -> None:
        self.base.set_trainable(False)
        for p in self.expert_parameters() + self.router_parameters():
            p.requires_grad = False
        for layer in self.layers:
            layer.bank.b2.requires_grad = False

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"base.{k}": v for k, v in self.base.state_dict().items()}
        for i, layer in enumerate(self.layers):
            state.update(layer.bank.state_dict(f"layers.{i}.bank."))
            state[f"layers.{i}.router.w3"] = layer.router.w3.data
            state[f"layers.{i}.router.b3"] = layer.router.b3.data
        return state

    def meta(self) -> dict:
        return {"kind": "student", "model": self.config.to_dict(),
                "moe": {"n_experts": self.cfg.n_experts, "top_k": self.cfg.top_k,
                        "routers_per_layer": self.cfg.routers_per_layer},
                "permutations": [layer.bank.perm.to_dict() for layer in self.layers]}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], meta: dict, dtype=None) -> Student:
        config = ModelConfig(**meta["model"])
        cfg = MoeConfig(**meta["moe"])
        base = ModelWeights.from_state(config, {k[5:]: v for k, v in state.items() if k.startswith("base.")},
                                       dtype=dtype)
        base.set_trainable(False)
        dtype = base.tok_emb.dtype
        layers = []
        for i, pm in enumerate(meta["permutations"]):
            p = f"layers.{i}."
            bank = ExpertBank(cfg.n_experts, *(Tensor(np.array(state[p + "bank." + n], dtype=dtype))
                                                for n in ("w1", "b1", "w2", "b2")),
                              perm=PermutationMap.from_dict(pm))
            router = RouterParams(Tensor(np.array(state[p + "router.w3"], dtype=dtype)),
                                  Tensor(np.array(state[p + "router.b3"], dtype=dtype)))
            layers.append(MoeLayer(bank, router, cfg))
        return cls(base, layers, cfg)


def calibration_activations(teacher: ModelWeights, tokens: np.ndarray) -> list[np.ndarray]:
    """Per-layer FFN hidden activations ``silu(h)`` of the teacher on ``tokens[b, n]``."""
    acts = []
    with no_grad():
        x = embed(tokens, teacher)
        for bw in teacher.blocks:
            hidden = attention_residual(x, bw)
            u = rms_norm(hidden, bw.norm2_scale, bw.norm2_shift)
            acts.append(hidden_activations(u.data.reshape(-1, u.shape[-1]), bw.ffn))
            x = hidden + ffn_forward(u, bw.ffn)
    return acts


def build_student(teacher: ModelWeights, cfg: MoeConfig, strategy: str = "contiguous", seed: int = 0,
                  calib_tokens: np.ndarray | None = None, router_std: float = 0.02) -> Student:
    """Split every teacher FFN and attach a freshly initialised router per layer.

    The base weights are shared with (not copied from) the frozen teacher.
    """
    teacher.set_trainable(False)
    acts = calibration_activations(teacher, calib_tokens) if strategy == "coactivation" else None
    rng = np.random.default_rng(seed)
    layers = []
    for i, bw in enumerate(teacher.blocks):
        pm = build_permutation(strategy, bw.ffn.d_hidden, cfg.n_experts,
                               calib=None if acts is None else acts[i], seed=seed + i)
        bank = split_ffn(bw.ffn, pm, cfg.n_experts)
        router = init_router(teacher.config.d_model, cfg.n_experts, rng, std=router_std,
                             dtype=teacher.tok_emb.dtype)
        layers.append(MoeLayer(bank, router, cfg))
    return Student(teacher, layers, cfg)


@dataclass
class LayerTrace:
    probs: Tensor | None
    selected: np.ndarray
    mask: np.ndarray
    allocation: np.ndarray | None
    distances: np.ndarray | None
    teacher_out: np.ndarray
    output: Tensor


@dataclass
class StudentPass:
    logits: Tensor
    layers: list[LayerTrace] = field(default_factory=list)


def student_forward(student: Student, tokens: np.ndarray, routing: str = "router",
                    rng: np.random.Generator | None = None, fixed_selection: list[np.ndarray] | None = None,
                    fixed_allocation: list[np.ndarray] | None = None) -> StudentPass:
    """Training forward pass that evaluates every expert densely.

    Per layer it records router probabilities, the chosen index sets, the
    teacher FFN output on the same input, per-expert distances to it and
    the resulting pseudo allocation. ``fixed_selection`` and
    ``fixed_allocation`` pin the discrete choices (used by gradient checks).
    """
    cfg = student.cfg
    x = embed(tokens, student.base)
    traces = []
    for i, (bw, layer) in enumerate(zip(student.base.blocks, student.layers)):
        hidden = attention_residual(x, bw)
        u = rms_norm(hidden, bw.norm2_scale, bw.norm2_shift)
        experts = all_expert_outputs(u, layer.bank, with_bias=False)
        with no_grad():
            teacher_out = ffn_forward(Tensor(u.data), bw.ffn).data
        if fixed_allocation is not None:
            allocation, distances = fixed_allocation[i], None
        else:
            # distances use each expert as a standalone FFN, shared output bias included
            pa = pseudo_allocation(teacher_out, experts.data + layer.bank.b2.data, cfg.top_k)
            allocation, distances = pa.allocation, pa.distances
        probs = None
        if routing == "router":
            probs = router_forward(u, layer.router, cfg.routers_per_layer)
        if fixed_selection is not None:
            selected = fixed_selection[i]
        elif routing == "router":
            selected = topk_select(probs.data, cfg.top_k, cfg.routers_per_layer)
        elif routing == "random":
            selected = random_selection(u.shape[:-1], cfg.n_experts, cfg.top_k, rng)
        else:
            raise ValueError(f"unknown routing mode {routing!r}")
        mask = selection_mask(selected, cfg.n_experts)
        y = masked_expert_sum(experts, mask, layer.bank.b2)
        traces.append(LayerTrace(probs, selected, mask, allocation, distances, teacher_out, y))
        x = hidden + y
    return StudentPass(head_forward(x, student.base), traces)


def student_logits(student: Student, tokens: np.ndarray, routing: str = "router",
                   rng: np.random.Generator | None = None, counter: ExpertCounter | None = None,
                   records: list[RoutingRecord] | None = None, step: int = 0) -> np.ndarray:
    """Inference pass with sparse expert evaluation; returns logits as an array."""
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None]
    cfg = student.cfg
    with no_grad():
        x = embed(tokens, student.base)
        for i, (bw, layer) in enumerate(zip(student.base.blocks, student.layers)):
            hidden = attention_residual(x, bw)
            u = rms_norm(hidden, bw.norm2_scale, bw.norm2_shift)
            if routing == "router":
                probs = router_forward(u, layer.router, cfg.routers_per_layer).data
                selected = topk_select(probs, cfg.top_k, cfg.routers_per_layer)
            elif routing == "random":
                probs = np.full(u.shape[:-1] + (cfg.n_experts,), 1.0 / cfg.n_experts)
                selected = random_selection(u.shape[:-1], cfg.n_experts, cfg.top_k, rng)
            else:
                raise ValueError(f"unknown routing mode {routing!r}")
            if records is not None:
                records.append(RoutingRecord(probs.copy(), selected.copy(), i, step))
            x = hidden + experts_forward(u, layer.bank, selected, counter)
        logits = head_forward(x, student.base).data
    return logits[0] if squeeze else logits

"""Teacher pretraining and the two-phase router/expert training schedule."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .losses import balance_loss, feature_mse, ft_loss, pa_loss
from .model import ModelWeights, cross_entropy, lm_forward
from .moe import RoutingRecord, write_routes_csv
from .student import Student, student_forward, student_logits
from .tensor import Tensor, global_grad_norm

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        super().__init__(f"loss became non-finite at step {step}; last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def clip(self, max_norm: float) -> float:
        norm = global_grad_norm(self.params)
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / (norm + 1e-6)
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * p.grad.dtype.type(scale)
        return norm

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def _r9(x: float) -> float:
    # round to 9 significant digits for logs
    return float(format(float(x), ".9g"))


def param_hash(params: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def batches(n_windows: int, batch_size: int, rng: np.random.Generator):
    while True:
        yield rng.integers(0, n_windows, size=batch_size)


# -- teacher pretraining ---------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 1500
    lr: float = 3e-3
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 1.0
    weight_decay: float = 0.0


def pretrain(model: ModelWeights, x: np.ndarray, y: np.ndarray, cfg: PretrainConfig,
             metrics_path=None) -> list[dict]:
    """Fit the dense model with next-token cross-entropy; updates ``model`` in place."""
    model.set_trainable(True)
    opt = Adam(model.parameters(), cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    sampler = batches(len(x), cfg.batch_size, rng)
    metrics = []
    for step in range(cfg.steps):
        idx = next(sampler)
        # cosine decay to 10% of the base rate
        opt.lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * step / max(cfg.steps, 1))))
        opt.zero_grad()
        loss = cross_entropy(lm_forward(x[idx], model), y[idx])
        loss.backward()
        norm = opt.clip(cfg.grad_clip)
        opt.step()
        metrics.append({"step": step, "loss": _r9(loss.data), "grad_norm": _r9(norm), "lr": _r9(opt.lr)})
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f", step, float(loss.data))
    model.set_trainable(False)
    if metrics_path is not None:
        _write_jsonl(metrics, metrics_path)
    return metrics


# -- student training ------------------------------------------------------------

@dataclass
class TrainConfig:
    alpha: float = 1.0
    lr: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-5
    grad_clip: float = 1.0
    warmup_steps: int | None = None
    train_steps: int = 1000
    seed: int = 0
    lb_weight: float = 0.01
    warmup_lr: float | None = None
    batch_size: int = 16
    routing: str = "router"
    distill_weight: float = 0.0
    snapshots: int = 10
    probe_size: int = 8
    checkpoint_every: int = 0

    REQUIRED = ("alpha", "lr", "beta1", "beta2", "weight_decay", "grad_clip", "warmup_steps", "train_steps",
                "seed", "lb_weight")

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.warmup_steps is None:
            self.warmup_steps = self.train_steps // 10
        if self.warmup_steps < 0 or self.train_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.routing not in ("router", "random"):
            raise ValueError(f"routing must be 'router' or 'random', got {self.routing!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LossBreakdown:
    step: int
    phase: str
    l_ft: float
    l_pa: float
    l_lb: float
    l_overall: float
    objective: float
    grad_norm: float
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    student: Student
    metrics: list[dict]
    snapshots: list[list[RoutingRecord]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    router_hash_after_warmup: str | None = None


def _write_jsonl(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path


def _step_losses(student: Student, x, y, cfg: TrainConfig, rng, phase: str):
    out = student_forward(student, x, routing=cfg.routing, rng=rng)
    l_ft = ft_loss(out.logits, y)
    N, K = student.cfg.n_experts, student.cfg.top_k
    if cfg.routing == "router":
        probs = [t.probs for t in out.layers]
        l_pa = pa_loss([t.allocation for t in out.layers], probs, N)
        l_lb = balance_loss(probs, [t.mask for t in out.layers], K, N)
    else:
        l_pa = l_lb = Tensor(np.zeros((), dtype=out.logits.dtype))
    if phase == "warmup":
        objective = cfg.alpha * l_pa + cfg.lb_weight * l_lb
    else:
        objective = l_ft + cfg.alpha * l_pa
        if cfg.distill_weight:
            objective = objective + cfg.distill_weight * feature_mse([t.output for t in out.layers],
                                                                     [t.teacher_out for t in out.layers])
    return l_ft, l_pa, l_lb, objective


def run_training(student: Student, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, out_dir=None,
                 teacher_params: Sequence[Tensor] | None = None) -> TrainResult:
    """Warmup (routers only) then expert tuning with routers frozen.

    With ``routing='random'`` there is no router: the warmup phase is skipped
    and experts are tuned under uniformly random per-token selection.
    """
    out_dir = None if out_dir is None else Path(out_dir)
    student.freeze_all()
    rng = np.random.default_rng(cfg.seed)
    probe = x[np.random.default_rng(cfg.seed + 7919).permutation(len(x))[:cfg.probe_size]]
    sampler = batches(len(x), cfg.batch_size, rng)
    route_rng = np.random.default_rng(cfg.seed + 104729)
    result = TrainResult(student, [])
    warmup = cfg.warmup_steps if cfg.routing == "router" else 0
    snap_every = max(1, warmup // max(cfg.snapshots, 1)) if warmup else 0
    last_good = {"state": student.state_dict(), "step": -1}
    last_good_path: Path | None = None

    def snapshot(step: int) -> None:
        if cfg.routing != "router":
            return
        records: list[RoutingRecord] = []
        student_logits(student, probe, records=records, step=step)
        result.snapshots.append(records)

    def save(tag: str, step: int) -> Path | None:
        if out_dir is None:
            return None
        meta = dict(student.meta(), step=step, routing=cfg.routing, train=cfg.to_dict())
        return save_checkpoint(out_dir / "checkpoints" / tag, student.state_dict(), meta)

    phases = [("warmup", warmup, student.router_parameters(), cfg.warmup_lr or cfg.lr),
              ("expert", cfg.train_steps, student.expert_parameters(), cfg.lr)]
    global_step = 0
    for phase, steps, params, lr in phases:
        if steps == 0:
            continue
        for p in params:
            p.requires_grad = True
        opt = Adam(params, lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
        if phase == "warmup":
            snapshot(global_step)
        for local in range(steps):
            idx = next(sampler)
            opt.zero_grad()
            l_ft, l_pa, l_lb, objective = _step_losses(student, x[idx], y[idx], cfg, route_rng, phase)
            values = [float(v.data) for v in (l_ft, l_pa, l_lb, objective)]
            if not all(np.isfinite(values)):
                if out_dir is not None:
                    last_good_path = save_checkpoint(out_dir / "checkpoints" / "last_good", last_good["state"],
                                                     dict(student.meta(), step=last_good["step"]))
                raise TrainingDiverged(global_step, last_good_path)
            objective.backward()
            norm = opt.clip(cfg.grad_clip)
            opt.step()
            f_ft, f_pa, f_lb, f_obj = (_r9(v) for v in values)
            result.metrics.append(LossBreakdown(global_step, phase, f_ft, f_pa, f_lb,
                                                _r9(values[0] + cfg.alpha * values[1]), f_obj,
                                                _r9(norm), _r9(lr)).to_dict())
            global_step += 1
            last_good = {"state": {k: v.copy() for k, v in student.state_dict().items()}, "step": global_step}
            if phase == "warmup" and (local + 1) % snap_every == 0:
                snapshot(global_step)
            if phase == "expert" and cfg.checkpoint_every and (local + 1) % cfg.checkpoint_every == 0:
                path = save(f"step_{global_step:06d}", global_step)
                if path is not None:
                    result.checkpoints.append(path)
                snapshot(global_step)
        for p in params:
            p.requires_grad = False
        if phase == "warmup":
            result.router_hash_after_warmup = param_hash(student.router_parameters())
    final = save("final", global_step)
    if final is not None:
        result.checkpoints.append(final)
    if out_dir is not None:
        _write_jsonl(result.metrics, out_dir / "metrics.jsonl")
        if result.snapshots:
            write_routes_csv([r for snap in result.snapshots for r in snap], out_dir / "routes.csv")
    return result

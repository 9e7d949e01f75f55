"""Desk-scale experiments: trained router versus random expert selection, and routing stabilisation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import EvalReport, evaluate, route_stats, smoothed
from .corpus import make_windows, split_windows, synthetic_text
from .model import ModelConfig, ModelWeights, init_model, lm_forward
from .moe import MoeConfig
from .student import build_student, student_logits
from .tensor import no_grad
from .train import PretrainConfig, TrainConfig, TrainResult, pretrain, run_training

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    corpus_bytes: int = 400_000
    corpus_seed: int = 0
    heldout_fraction: float = 0.05
    eval_windows: int = 256
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(steps=1500, lr=3e-3))
    moe: MoeConfig = field(default_factory=lambda: MoeConfig(n_experts=4, top_k=2))
    strategy: str = "contiguous"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=1e-3, warmup_lr=1e-2, warmup_steps=100, train_steps=600, snapshots=10, lb_weight=0.01))


@dataclass
class SeedOutcome:
    seed: int
    teacher: EvalReport
    routed: EvalReport
    random: EvalReport
    churn: list[float]
    smoothed_churn: list[float]
    router_run: TrainResult
    random_run: TrainResult

    @property
    def churn_ratio(self) -> float:
        return self.smoothed_churn[-1] / self.smoothed_churn[0] if self.smoothed_churn[0] > 0 else float("inf")


def corpus_windows(cfg: ExperimentConfig):
    data = np.frombuffer(synthetic_text(cfg.corpus_bytes, cfg.corpus_seed), dtype=np.uint8).astype(np.int64)
    x, y = make_windows(data, cfg.model.seq_len)
    return split_windows(x, y, cfg.heldout_fraction)


def train_teacher(cfg: ExperimentConfig, x, y, seed: int) -> ModelWeights:
    teacher = init_model(cfg.model, seed=seed)
    pretrain(teacher, x, y, replace(cfg.pretrain, seed=seed))
    return teacher


def _teacher_fn(teacher):
    def fn(tokens):
        with no_grad():
            return lm_forward(tokens, teacher).data
    return fn


def run_seed(cfg: ExperimentConfig, seed: int, data=None, teacher: ModelWeights | None = None) -> SeedOutcome:
    """Pretrain a teacher, then train a routed student and a random-selection student on equal budgets."""
    (x, y), (hx, hy) = data if data is not None else corpus_windows(cfg)
    hx, hy = hx[:cfg.eval_windows], hy[:cfg.eval_windows]
    if teacher is None:
        teacher = train_teacher(cfg, x, y, seed)
    t_report = evaluate(_teacher_fn(teacher), zip(hx, hy), label="teacher")
    calib = x[:16] if cfg.strategy == "coactivation" else None

    runs = {}
    reports = {}
    for routing in ("router", "random"):
        student = build_student(teacher, cfg.moe, cfg.strategy, seed=seed, calib_tokens=calib)
        tcfg = replace(cfg.train, seed=seed, routing=routing)
        runs[routing] = run_training(student, x, y, tcfg)
        rng = np.random.default_rng(seed + 1)
        reports[routing] = evaluate(lambda t, s=student, r=routing: student_logits(s, t, routing=r, rng=rng),
                                    zip(hx, hy), teacher=t_report, label=f"student/{routing}")
        log.info("seed %d %s CE %.4f (teacher %.4f)", seed, routing, reports[routing].cross_entropy,
                 t_report.cross_entropy)
    stats = route_stats(runs["router"].snapshots[: cfg.train.snapshots + 1])
    return SeedOutcome(seed, t_report, reports["router"], reports["random"], stats.mean_churn,
                       smoothed(stats.mean_churn), runs["router"], runs["random"])

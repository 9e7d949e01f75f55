"""Command-line entry point: ``ffnsplit <command> --config PATH --out DIR``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .analysis import count_flops, evaluate, route_stats
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import IngestionError, make_windows, read_bytes, split_windows
from .factorize import STRATEGIES, verify_equivalence
from .model import ModelConfig, ModelWeights, init_model, lm_forward
from .moe import MoeConfig, read_routes_csv
from .student import Student, build_student, student_logits
from .tensor import ContractError, no_grad
from .train import PretrainConfig, TrainConfig, TrainingDiverged, pretrain, run_training

log = logging.getLogger("ffnsplit")

COMMANDS = ("pretrain", "factorize", "verify", "train", "eval", "flops", "routes")


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg["_dir"] = str(path.resolve().parent)
    return cfg


def _section(cfg: dict, name: str, cls, required=(), overrides=None):
    sec = dict(cfg.get(name, {}))
    if not isinstance(sec, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    for key in sec:
        if key not in known:
            raise ConfigError(f"unknown config field '{name}.{key}'")
    for key in required:
        if key not in sec:
            raise ConfigError(f"missing config field '{name}.{key}'")
    sec.update({k: v for k, v in (overrides or {}).items() if v is not None and k in known})
    try:
        return cls(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def _path(cfg: dict, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(cfg["_dir"]) / p


def _moe(cfg: dict, args) -> tuple[MoeConfig, str]:
    sec = dict(cfg.get("moe", {}))
    strategy = args.strategy or sec.pop("strategy", "contiguous")
    sec.pop("strategy", None)
    for key in sec:
        if key not in ("n_experts", "top_k", "routers_per_layer"):
            raise ConfigError(f"unknown config field 'moe.{key}'")
    if args.N is not None:
        sec["n_experts"] = args.N
    if args.K is not None:
        sec["top_k"] = args.K
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    try:
        return MoeConfig(**sec), strategy
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _data(cfg: dict, seq_len: int):
    if "corpus" not in cfg:
        raise ConfigError("missing config field 'corpus'")
    x, y = make_windows(read_bytes(_path(cfg, cfg["corpus"])), seq_len)
    return split_windows(x, y, float(cfg.get("heldout_fraction", 0.05)))


def _teacher_path(cfg: dict, args) -> Path:
    if args.teacher:
        return Path(args.teacher)
    if "teacher" in cfg:
        return _path(cfg, cfg["teacher"])
    return Path(args.out) / "teacher"


def load_teacher(path) -> ModelWeights:
    state, meta = load_checkpoint(path)
    model = ModelWeights.from_state(ModelConfig(**meta["model"]), state)
    model.set_trainable(False)
    return model


def load_student(path) -> Student:
    state, meta = load_checkpoint(path)
    return Student.from_state(state, meta)


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


# -- commands --------------------------------------------------------------------

def cmd_pretrain(cfg, args) -> int:
    mcfg = _section(cfg, "model", ModelConfig)
    pcfg = _section(cfg, "pretrain", PretrainConfig, overrides={"seed": args.seed})
    (x, y), (hx, hy) = _data(cfg, mcfg.seq_len)
    model = init_model(mcfg, seed=pcfg.seed)
    out = Path(args.out)
    pretrain(model, x, y, pcfg, metrics_path=out / "pretrain_metrics.jsonl")
    save_checkpoint(out / "teacher", model.state_dict(), {"kind": "teacher", "model": mcfg.to_dict()})
    report = evaluate(lambda t: _teacher_logits(model, t), zip(hx, hy), label="teacher")
    _write_json(out / "eval_teacher.json", report.to_dict())
    print(f"teacher saved to {out / 'teacher.json'}; held-out CE {report.cross_entropy:.9g}")
    return 0


def _teacher_logits(model: ModelWeights, tokens):
    with no_grad():
        return lm_forward(tokens, model).data


def _build(cfg, args):
    teacher = load_teacher(_teacher_path(cfg, args))
    moe, strategy = _moe(cfg, args)
    seed = args.seed if args.seed is not None else int(cfg.get("train", {}).get("seed", 0))
    calib = None
    if strategy == "coactivation":
        (x, _), _ = _data(cfg, teacher.config.seq_len)
        calib = x[np.random.default_rng(seed).permutation(len(x))[:16]]
    return teacher, build_student(teacher, moe, strategy, seed=seed, calib_tokens=calib)


def cmd_factorize(cfg, args) -> int:
    _, student = _build(cfg, args)
    path = save_checkpoint(Path(args.out) / "student_init", student.state_dict(), student.meta())
    print(f"factorized student saved to {path}")
    return 0


def cmd_verify(cfg, args) -> int:
    if args.student:
        student = load_student(args.student)
        teacher = student.base
    else:
        teacher, student = _build(cfg, args)
    vcfg = cfg.get("verify", {})
    certs = []
    for i, (bw, layer) in enumerate(zip(teacher.blocks, student.layers)):
        c = verify_equivalence(bw.ffn, layer.bank, samples=int(vcfg.get("samples", 1000)),
                               tol=float(vcfg.get("tol", 1e-10)), f32_tol=float(vcfg.get("f32_tol", 1e-5)),
                               seed=i)
        certs.append(dict(json.loads(c.to_json()), layer=i))
    passed = all(c["passed"] for c in certs)
    path = _write_json(Path(args.out) / "certificate.json", {"passed": passed, "layers": certs})
    if not passed:
        print(f"equivalence check FAILED; certificate: {path}", file=sys.stderr)
        return 1
    print(f"equivalence check passed; certificate: {path}")
    return 0


def cmd_train(cfg, args) -> int:
    tcfg = _section(cfg, "train", TrainConfig, required=TrainConfig.REQUIRED, overrides={"seed": args.seed})
    teacher, student = _build(cfg, args)
    (x, y), _ = _data(cfg, teacher.config.seq_len)
    try:
        result = run_training(student, x, y, tcfg, out_dir=args.out)
    except TrainingDiverged as exc:
        print(str(exc), file=sys.stderr)
        return 1
    print(f"trained {len(result.metrics)} steps; final checkpoint {result.checkpoints[-1]}")
    return 0


def cmd_eval(cfg, args) -> int:
    teacher = load_teacher(_teacher_path(cfg, args))
    _, (hx, hy) = _data(cfg, teacher.config.seq_len)
    t_report = evaluate(lambda t: _teacher_logits(teacher, t), zip(hx, hy), label="teacher")
    reports = {"teacher": t_report.to_dict()}
    student_path = Path(args.student) if args.student else Path(args.out) / "checkpoints" / "final"
    if student_path.with_suffix(".json").exists():
        state, meta = load_checkpoint(student_path)
        student = Student.from_state(state, meta)
        routing = args.routing or meta.get("routing", "router")
        rng = np.random.default_rng(args.seed if args.seed is not None else 0)

        def fn(tokens):
            return student_logits(student, tokens, routing=routing, rng=rng)

        reports["student"] = evaluate(fn, zip(hx, hy), teacher=t_report, label=f"student/{routing}").to_dict()
    path = _write_json(Path(args.out) / "eval.json", reports)
    print(json.dumps(reports, sort_keys=True))
    print(f"report: {path}")
    return 0


def cmd_flops(cfg, args) -> int:
    mcfg = _section(cfg, "model", ModelConfig) if cfg else ModelConfig()
    moe, _ = _moe(cfg or {}, args)
    report = count_flops(mcfg.d_model, mcfg.d_hidden, mcfg.n_layers, moe, mcfg.seq_len).to_dict()
    path = _write_json(Path(args.out) / f"flops_N{moe.n_experts}_K{moe.top_k}.json", report)
    print(json.dumps(report, sort_keys=True))
    print(f"report: {path}")
    return 0


def cmd_routes(cfg, args) -> int:
    src = Path(args.routes) if args.routes else Path(args.out) / "routes.csv"
    if not src.exists():
        raise ConfigError(f"route trace {src} not found")
    stats = route_stats(read_routes_csv(src)).to_dict()
    path = _write_json(Path(args.out) / "route_stats.json", stats)
    print(f"route statistics: {path}")
    return 0


HANDLERS = {"pretrain": cmd_pretrain, "factorize": cmd_factorize, "verify": cmd_verify, "train": cmd_train,
            "eval": cmd_eval, "flops": cmd_flops, "routes": cmd_routes}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffnsplit", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--N", type=int, help="number of experts")
    parser.add_argument("--K", type=int, help="experts selected per token")
    parser.add_argument("--strategy", choices=STRATEGIES, help="neuron permutation strategy")
    parser.add_argument("--teacher", help="teacher checkpoint (manifest path or stem)")
    parser.add_argument("--student", help="student checkpoint (manifest path or stem)")
    parser.add_argument("--routing", choices=("router", "random"), help="expert selection used by eval")
    parser.add_argument("--routes", help="route trace CSV for the routes command")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.config:
            cfg = load_config(args.config)
        elif args.command == "flops":
            cfg = {}
        else:
            raise ConfigError(f"'{args.command}' needs --config")
        with threadpool_limits(limits=1):
            return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"ffnsplit {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ContractError, IngestionError, CheckpointError) as exc:
        print(f"ffnsplit {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

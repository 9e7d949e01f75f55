"""Compare a pseudo-label-trained router against random expert selection over several seeds.

Prints held-out cross-entropy per seed and the smoothed warmup churn curve,
and writes a JSON summary next to the chosen output path.
"""
import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from ffnsplit.experiments import ExperimentConfig, corpus_windows, run_seed
from ffnsplit.moe import MoeConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--N", type=int, default=4)
    ap.add_argument("--K", type=int, default=2)
    ap.add_argument("--strategy", default="contiguous")
    ap.add_argument("--train-steps", type=int, default=None)
    ap.add_argument("--out", type=Path, default=Path("out/router_vs_random.json"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = replace(ExperimentConfig(), moe=MoeConfig(args.N, args.K), strategy=args.strategy)
    if args.train_steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, train_steps=args.train_steps))
    data = corpus_windows(cfg)
    rows = []
    with threadpool_limits(limits=1):
        for seed in args.seeds:
            o = run_seed(cfg, seed, data=data)
            rows.append({"seed": seed, "teacher_ce": o.teacher.cross_entropy, "router_ce": o.routed.cross_entropy,
                         "random_ce": o.random.cross_entropy, "router_maintenance": o.routed.maintenance,
                         "random_maintenance": o.random.maintenance, "churn": o.churn,
                         "smoothed_churn": o.smoothed_churn})
            print(f"seed {seed}: teacher {o.teacher.cross_entropy:.4f}  router {o.routed.cross_entropy:.4f}  "
                  f"random {o.random.cross_entropy:.4f}  churn ratio {o.churn_ratio:.3f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=1))
    print(f"summary: {args.out}")


if __name__ == "__main__":
    main()

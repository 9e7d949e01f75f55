"""Tabulate analytic FFN and total FLOPs reduction for every (N, K) pair."""
import argparse

from ffnsplit.analysis import FLOP_CONVENTION, count_flops
from ffnsplit.model import ModelConfig
from ffnsplit.moe import MoeConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--experts", type=int, nargs="+", default=[4, 8, 16])
    args = ap.parse_args()
    m = ModelConfig()
    print(f"# {FLOP_CONVENTION}")
    print("N,K,reduction_ffn,reduction_total")
    for N in args.experts:
        for K in range(1, N + 1):
            r = count_flops(m.d_model, m.d_hidden, m.n_layers, MoeConfig(N, K), m.seq_len)
            print(f"{N},{K},{r.reduction_ffn:.9g},{r.reduction_total:.9g}")


if __name__ == "__main__":
    main()

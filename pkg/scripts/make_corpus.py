"""Write the seeded synthetic byte corpus used by the desk experiments."""
import argparse
from pathlib import Path

from ffnsplit.corpus import synthetic_text


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=Path)
    ap.add_argument("--bytes", type=int, default=400_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_bytes(synthetic_text(args.bytes, args.seed))
    print(f"wrote {args.bytes} bytes to {args.out}")


if __name__ == "__main__":
    main()

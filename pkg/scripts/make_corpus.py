"""Write the synthetic English-like training corpus used by the experiments."""

import argparse
from pathlib import Path

from smlp.data import synthetic_text


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--chars", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(synthetic_text(args.chars, args.seed), encoding="utf-8")
    print(f"wrote {args.chars} chars to {out}")


if __name__ == "__main__":
    main()

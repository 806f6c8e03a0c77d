"""Print token-mixing parameter and FLOPs counts at H = T = 1024."""

import argparse

from smlp.analysis import token_mixing_costs


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--hidden", type=int, default=1024)
    ap.add_argument("--seq-len", type=int, default=1024)
    ap.add_argument("--experts", type=int, default=16, help="sMoE experts (deterministic routing)")
    args = ap.parse_args()
    rep = token_mixing_costs(args.hidden, args.seq_len, heads=(16, 1), smoe_experts=args.experts)
    print(rep.to_text())
    a16, a1 = rep.get("self_attention[h=16]"), rep.get("self_attention[h=1]")
    s16, s1 = rep.get("sgu[h=16]"), rep.get("sgu[h=1]")
    print(f"\nattention params h=16 / h=1: {a16.params / a1.params:.3f}")
    print(f"sgu params h=16 / h=1:       {s16.params / s1.params:.3f}")


if __name__ == "__main__":
    main()

"""Desk-scale comparison: sMLP with deterministic sMoE routing vs a gMLP whose
sparse layers route whole gMLP layers by token.

Trains both configs for each seed on the same corpus and writes a JSON summary
with final validation loss / perplexity, per-run loss curves and FLOPs counts.
"""

from __future__ import annotations

import argparse
import json
import math
import time
from pathlib import Path

from smlp.analysis import count_costs
from smlp.cli import load_config
from smlp.data import Corpus, synthetic_text
from smlp.model import ModelConfig, build_model
from smlp.train import TrainConfig, evaluate_loss, train

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = {"smlp_deterministic": ROOT / "configs/ordering_smlp.json",
           "gmlp_token_moe": ROOT / "configs/ordering_gmlp_moe.json"}


def run_one(name: str, raw: dict, corpus: Corpus, seed: int, steps: int) -> dict:
    mcfg = ModelConfig.from_dict(dict(raw["model"], vocab_size=len(corpus.vocab), seed=seed))
    tcfg = TrainConfig.from_dict(dict(raw["train"], seed=seed, steps=steps, log_interval=0))
    model = build_model(mcfg)
    t0 = time.perf_counter()
    _, losses = train(model, corpus, tcfg)
    valid = evaluate_loss(model, corpus.valid)
    tail = losses[-50:]
    return {"model": name, "seed": seed, "params": model.n_params(),
            "flops_per_seq": count_costs(mcfg).total_flops,
            "first_loss": losses[0], "final_train_loss": sum(tail) / len(tail),
            "valid_loss": valid, "valid_ppl": math.exp(valid),
            "seconds": round(time.perf_counter() - t0, 1),
            "curve": losses[::max(1, steps // 100)]}


def summarize(runs: list[dict], ln_v: float, seeds: list[int]) -> dict:
    by = {(r["model"], r["seed"]): r for r in runs}
    wins = sum(by["smlp_deterministic", s]["valid_ppl"] < by["gmlp_token_moe", s]["valid_ppl"]
               for s in seeds)
    bound = 0.8 * ln_v
    below = all(r["valid_loss"] < bound and r["final_train_loss"] < bound for r in runs)
    return {"ln_vocab": ln_v, "loss_bound": bound, "smlp_wins": wins, "pairings": len(seeds),
            "ordering_holds": wins >= (2 * len(seeds) + 2) // 3, "all_below_bound": below}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", help="UTF-8 text file (default: 1 MB synthetic text)")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default=str(ROOT / "results/ordering.json"))
    args = ap.parse_args()

    corpus = (Corpus.from_file(args.corpus) if args.corpus
              else Corpus.from_text(synthetic_text(1_000_000, seed=0)))
    runs = []
    for seed in args.seeds:
        for name, path in CONFIGS.items():
            r = run_one(name, load_config(path), corpus, seed, args.steps)
            runs.append(r)
            print(f"{name:20s} seed={seed} params={r['params']} flops={r['flops_per_seq'] / 1e6:.1f}M "
                  f"train={r['final_train_loss']:.4f} valid={r['valid_loss']:.4f} "
                  f"ppl={r['valid_ppl']:.3f} ({r['seconds']}s)", flush=True)
    summary = summarize(runs, math.log(len(corpus.vocab)), args.seeds)
    print(json.dumps(summary))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"summary": summary, "steps": args.steps, "runs": runs}, indent=1))


if __name__ == "__main__":
    main()

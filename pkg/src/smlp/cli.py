"""Command-line entry point: train, eval, analyze, probe-leak, score.

Exit codes: 0 success (or causal), 1 usage/config error, 2 leak detected.
``SMLP_SEED`` overrides the seeds in a config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import count_costs, probe_all_pairs, randomize_parameters, summarize_leaks, token_mixing_costs
from .checkpoint import load_checkpoint
from .data import Corpus
from .errors import ConfigError, SMLPError
from .model import ModelConfig, build_model
from .scoring import NORMALIZE_MODES, ChoiceTask, score_choices
from .train import TrainConfig, evaluate_loss, train

EXIT_OK, EXIT_ERROR, EXIT_LEAK = 0, 1, 2
MAX_PROBE_LEN = 32


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: usage error: {message}\n")


def load_config(path: str | Path) -> dict:
    """Read a JSON config with optional ``model``, ``train`` and ``token_mixing`` sections."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(raw) - {"model", "train", "token_mixing", "description"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    seed = os.environ.get("SMLP_SEED")
    if seed is not None:
        try:
            s = int(seed)
        except ValueError:
            raise ConfigError(f"SMLP_SEED must be an integer, got {seed!r}") from None
        for sec in ("model", "train"):
            raw.setdefault(sec, {})["seed"] = s
    return raw


def model_config(raw: dict) -> ModelConfig:
    return ModelConfig.from_dict(raw.get("model", {})).validate()


def cmd_train(args) -> int:
    raw = load_config(args.config)
    tcfg = TrainConfig.from_dict(raw.get("train", {}))
    if args.steps is not None:
        tcfg.steps = args.steps
    corpus = Corpus.from_file(args.corpus, tcfg.valid_fraction)
    mdict = dict(raw.get("model", {}), vocab_size=len(corpus.vocab))
    model = build_model(ModelConfig.from_dict(mdict))
    train(model, corpus, tcfg, out_dir=args.out)
    loss = evaluate_loss(model, corpus.valid)
    print(f"step={tcfg.steps} valid_loss={loss:.6f} valid_ppl={np.exp(loss):.6f}")
    print(f"checkpoint={Path(args.out) / 'checkpoint.smlp'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, vocab, tcfg = load_checkpoint(args.ckpt)
    if vocab is None:
        raise ConfigError("checkpoint has no vocabulary")
    frac = tcfg.valid_fraction if tcfg else 0.1
    corpus = Corpus.from_file(args.corpus, frac, vocab)
    tokens = corpus.tokens if args.split == "all" else getattr(corpus, args.split)
    loss = evaluate_loss(model, tokens)
    print(f"split={args.split} loss={loss:.6f} ppl={np.exp(loss):.6f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    raw = load_config(args.config)
    if "token_mixing" in raw:
        tm = dict(raw["token_mixing"])
        rep = token_mixing_costs(H=tm.pop("hidden", 1024), T_=tm.pop("seq_len", 1024),
                                 heads=tuple(tm.pop("heads", (16, 1))),
                                 smoe_experts=tm.pop("smoe_experts", 1))
        if tm:
            raise ConfigError(f"unknown token_mixing keys: {sorted(tm)}")
    else:
        rep = count_costs(model_config(raw))
    print(rep.to_jsonl() if args.json else rep.to_text(), end="" if args.json else "\n")
    return EXIT_OK


def cmd_probe(args) -> int:
    if args.ckpt:
        model = load_checkpoint(args.ckpt)[0]
    elif args.config is None:
        raise ConfigError("probe-leak needs --config or --ckpt")
    else:
        model = build_model(model_config(load_config(args.config)))
    cfg = model.cfg
    if cfg.seq_len > MAX_PROBE_LEN:
        raise ConfigError(f"probe-leak supports seq_len <= {MAX_PROBE_LEN}, got {cfg.seq_len}")
    rng = np.random.default_rng(args.seed)
    if args.randomize:
        randomize_parameters(model, rng)
    tokens = rng.integers(0, cfg.vocab_size, cfg.seq_len)
    s = summarize_leaks(probe_all_pairs(model, tokens))
    print(" ".join(f"{k}={v:.3e}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()))
    return EXIT_LEAK if s["verdict"] == "leak" else EXIT_OK


def cmd_score(args) -> int:
    model, _, vocab, _ = load_checkpoint(args.ckpt)
    if vocab is None:
        raise ConfigError("checkpoint has no vocabulary")
    task = ChoiceTask.from_jsonl(args.task)
    res = score_choices(model, vocab, task, args.normalize)
    for i, (p, s) in enumerate(zip(res.predictions, res.scores)):
        shown = "skipped" if s is None else " ".join(f"{v:.4f}" for v in s)
        print(f"item={i} pred={p} gold={task.items[i].gold} scores={shown}")
    print(f"accuracy={res.accuracy:.4f} items={len(task.items)} skipped={len(res.skipped)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smlp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training metrics to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on a text corpus")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="override train.steps")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", choices=("valid", "train", "all"), default="valid")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="parameter and FLOPs accounting")
    a.add_argument("--config", required=True)
    a.add_argument("--json", action="store_true", help="emit one JSON object per module")
    a.set_defaults(fn=cmd_analyze)

    pl = sub.add_parser("probe-leak", help="check that no logit depends on a future token")
    pl.add_argument("--config")
    pl.add_argument("--ckpt", help="probe trained weights instead of a fresh model")
    pl.add_argument("--seed", type=int, default=0, help="seed for probe tokens")
    pl.add_argument("--randomize", action="store_true",
                    help="replace parameters with generic random values first")
    pl.set_defaults(fn=cmd_probe)

    s = sub.add_parser("score", help="zero-shot multiple-choice accuracy")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--normalize", choices=NORMALIZE_MODES, default="none")
    s.set_defaults(fn=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (SMLPError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

"""Optimisation loop: Adam with inverse-sqrt schedule, perplexity evaluation."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .analysis import balance_metrics
from .data import Corpus, batch_for_step, windows
from .errors import ConfigError, TrainingDivergenceError
from .model import Model, forward_lm, lm_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_updates: int = 4000
    warmup_init_lr: float = 1e-7
    clip_norm: float = 1.0
    valid_fraction: float = 0.1
    log_interval: int = 10
    checkpoint_interval: int = 0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def fresh(cls, model: Model, seed: int = 0) -> "TrainState":
        named = model.named_parameters()
        return cls(0, {k: np.zeros_like(t.data) for k, t in named},
                   {k: np.zeros_like(t.data) for k, t in named}, seed)


def inverse_sqrt_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_init_lr`` to ``lr``, then ``lr * sqrt(warmup / step)``."""
    w = cfg.warmup_updates
    if w > 0 and step < w:
        return cfg.warmup_init_lr + step * (cfg.lr - cfg.warmup_init_lr) / w
    return cfg.lr * math.sqrt(w / step) if w > 0 else cfg.lr


def adam_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                lr: float, betas=(0.9, 0.98), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place Adam step with decoupled weight decay."""
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * g * g
    step_size = lr * math.sqrt(1 - b2**step) / (1 - b1**step)
    if weight_decay:
        p -= weight_decay * lr * p
    p -= step_size * m / (np.sqrt(v) + eps)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads])))
    if max_norm > 0 and total > max_norm:
        coef = max_norm / (total + 1e-6)
        for g in grads:
            g *= coef
    return total


def imbalance_of(plans) -> float:
    ratios = [balance_metrics(p).imbalance_ratio for kind, p in plans if kind == "tmoe"]
    return float(np.mean(ratios)) if ratios else float("nan")


def train_step(model: Model, state: TrainState, batch: np.ndarray, cfg: TrainConfig) -> dict:
    """One optimizer update on ``batch`` of shape (B, T+1)."""
    batch = np.asarray(batch, dtype=np.int64)
    state.step += 1
    step = state.step
    named = model.named_parameters()
    T.zero_grad(t for _, t in named)
    rng = np.random.default_rng([state.seed, step, 7]) if model.cfg.dropout > 0 else None
    with T.Tape():
        total, ce, out = lm_loss(model, batch[:, :-1], batch[:, 1:], training=True, rng=rng)
        loss = total.item()
        if not math.isfinite(loss):
            raise TrainingDivergenceError(step, loss)
        T.backward(total)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for _, t in named]
    gnorm = clip_grad_norm(grads, cfg.clip_norm)
    lr = inverse_sqrt_lr(step, cfg)
    for (name, t), g in zip(named, grads):
        adam_update(t.data, g, state.m[name], state.v[name], step, lr, cfg.betas, cfg.eps,
                    cfg.weight_decay)
    model.apply_constraints()
    return {"step": step, "loss": loss, "ce": ce.item(), "lr": lr, "grad_norm": gnorm,
            "imbalance_ratio": imbalance_of(out.plans)}


def evaluate_loss(model: Model, tokens: np.ndarray, batch_size: int = 16) -> float:
    """Mean masked next-token NLL over non-overlapping windows of ``tokens``."""
    wins = windows(np.asarray(tokens), model.cfg.seq_len)
    if len(wins) == 0:
        raise ConfigError("evaluation split is shorter than one window")
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(wins), batch_size):
            b = wins[i:i + batch_size]
            out = forward_lm(model, b[:, :-1], training=False)
            ce = T.cross_entropy(out.logits, b[:, 1:], out.mask)
            n = int(out.mask.sum())
            total += ce.item() * n
            count += n
    return total / count


def evaluate_ppl(model: Model, tokens: np.ndarray, batch_size: int = 16) -> float:
    return math.exp(evaluate_loss(model, tokens, batch_size))


def format_metrics(m: dict) -> str:
    parts = []
    for k, v in m.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def train(model: Model, corpus: Corpus, cfg: TrainConfig, state: TrainState | None = None,
          out_dir: str | Path | None = None, until: int | None = None) -> tuple[TrainState, list[float]]:
    """Run updates from ``state.step`` to ``until`` (default ``cfg.steps``).

    Returns the state and the per-step training losses of this call.
    """
    from .checkpoint import save_checkpoint

    state = state or TrainState.fresh(model, cfg.seed)
    until = cfg.steps if until is None else until
    wins = windows(corpus.train, model.cfg.seq_len)
    if len(wins) == 0:
        raise ConfigError("training split is shorter than one window")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    metrics_f = open(out / "metrics.log", "a") if out else None
    losses = []
    try:
        t0 = time.perf_counter()
        while state.step < until:
            batch = batch_for_step(wins, state.step + 1, cfg.batch_size, state.seed)
            m = train_step(model, state, batch, cfg)
            losses.append(m["loss"])
            if cfg.log_interval and (m["step"] % cfg.log_interval == 0 or m["step"] == until):
                rec = {"step": m["step"], "loss": m["loss"], "ppl": math.exp(m["ce"]), "lr": m["lr"],
                       "imbalance_ratio": m["imbalance_ratio"],
                       "wall_ms": round((time.perf_counter() - t0) * 1e3, 1)}
                line = format_metrics(rec)
                log.info(line)
                if metrics_f:
                    metrics_f.write(line + "\n")
                    metrics_f.flush()
            if out and cfg.checkpoint_interval and m["step"] % cfg.checkpoint_interval == 0:
                save_checkpoint(out / f"ckpt_{m['step']:07d}.smlp", model, state, corpus.vocab, cfg)
        if out:
            save_checkpoint(out / "checkpoint.smlp", model, state, corpus.vocab, cfg)
    finally:
        if metrics_f:
            metrics_f.close()
    return state, losses

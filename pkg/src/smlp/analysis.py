"""Parameter / FLOPs accounting, the causality (information-leak) probe, and
load-balance metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import routing as R
from . import tensor as T
from .errors import ConfigError
from .model import Model, ModelConfig, block_spec, forward_lm

CONVENTION = ("forward pass over one sequence of T tokens; multiply-accumulate = 2 FLOPs; "
              "softmax/layernorm/gelu = 5 FLOPs per element; bias, residual and gate "
              "elementwise ops = 1 FLOP per element; MoE layers count the active top-k path")


@dataclass
class ModuleCost:
    name: str
    params: int
    flops: int
    matmul_flops: int = 0


@dataclass
class CostReport:
    modules: list[ModuleCost] = field(default_factory=list)
    convention: str = CONVENTION
    show_total: bool = True  # off for side-by-side comparisons of alternatives

    @property
    def total_params(self) -> int:
        return sum(m.params for m in self.modules)

    @property
    def total_flops(self) -> int:
        return sum(m.flops for m in self.modules)

    @property
    def total_matmul_flops(self) -> int:
        return sum(m.matmul_flops for m in self.modules)

    def add(self, name: str, params: int, matmul: int = 0, other: int = 0) -> None:
        self.modules.append(ModuleCost(name, int(params), int(matmul + other), int(matmul)))

    def get(self, name: str) -> ModuleCost:
        for m in self.modules:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_text(self) -> str:
        rows = [("module", "params (M)", "FLOPs (G)", "matmul FLOPs (G)")]
        total = [ModuleCost("TOTAL", self.total_params, self.total_flops, self.total_matmul_flops)]
        for m in self.modules + (total if self.show_total else []):
            rows.append((m.name, f"{m.params / 1e6:.3f}", f"{m.flops / 1e9:.3f}",
                         f"{m.matmul_flops / 1e9:.3f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.append(f"convention: {self.convention}")
        return "\n".join(lines)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(asdict(m)) for m in self.modules) + "\n"


# ---------------------------------------------------------------------------
# per-module formulas (T tokens, width H)


def layernorm_cost(T_: int, H: int) -> tuple[int, int, int]:
    return 2 * H, 0, 5 * T_ * H


def sgu_cost(T_: int, H: int, heads: int = 1) -> tuple[int, int, int]:
    """heads x (T x T) spatial weights; hidden width H split across heads."""
    return heads * (T_ * T_ + T_), 2 * T_ * T_ * H, T_ * H


def attention_cost(T_: int, H: int, heads: int) -> tuple[int, int, int]:
    params = 4 * H * (H + 1)
    proj = 4 * 2 * T_ * H * H
    mix = 2 * (2 * T_ * T_ * H)  # scores and weighted values, summed over heads
    other = 4 * T_ * H + 5 * heads * T_ * T_
    return params, proj + mix, other


def ffn_cost(T_: int, H: int, F: int) -> tuple[int, int, int]:
    return 2 * H * F + F + H, 4 * T_ * H * F, T_ * F + T_ * H + 5 * T_ * F


def token_mixing_costs(H: int = 1024, T_: int = 1024, heads=(16, 1), smoe_experts: int = 1) -> CostReport:
    """Self-attention vs SGU vs sMoE token mixing at hidden width H and length T."""
    rep = CostReport(show_total=False)
    for h in heads:
        p, mm, o = attention_cost(T_, H, h)
        rep.add(f"self_attention[h={h}]", p, mm, o)
    for h in heads:
        p, mm, o = sgu_cost(T_, H, h)
        rep.add(f"sgu[h={h}]", p, mm, o)
    # one expert per device, each a single SGU over H/N hidden dims
    n = smoe_experts
    p, mm, o = sgu_cost(T_, H // n, 1)
    rep.add(f"smoe_deterministic[per expert, N={n}]", p, mm, o)
    return rep


def _tmoe(rep, name, cfg: ModelConfig):
    T_, H, F, N, k = cfg.seq_len, cfg.embed_dim, cfg.ffn_dim, cfg.n_experts, cfg.top_k
    pp, pm, po = ffn_cost(T_, H, F)
    router_p = H * N if cfg.token_router != "hash" else 0
    router_m = 2 * T_ * H * N if router_p else 0
    router_o = (5 * T_ * N if cfg.token_router == "softmax_topk" else
                T_ if cfg.token_router == "balanced_assignment" else 0)
    rep.add(name, N * pp + router_p, k * pm + router_m, k * po + router_o + k * T_ * H)


def count_costs(cfg: ModelConfig) -> CostReport:
    """Exact parameter counts and forward FLOPs for one sequence."""
    cfg.validate()
    T_, H, F, N, V = cfg.seq_len, cfg.embed_dim, cfg.ffn_dim, cfg.n_experts, cfg.vocab_size
    rep = CostReport()
    rep.add("embedding", V * H)
    if cfg.arch in ("transformer", "transformer_moe"):
        rep.add("pos_embedding", T_ * H, 0, T_ * H)
    ln_p, _, ln_o = layernorm_cost(T_, H)
    for i, kind in enumerate(block_spec(cfg)):
        pre = f"blocks.{i}"
        if kind == "gmlp":
            rep.add(f"{pre}.ln1", ln_p, 0, ln_o)
            p, mm, o = sgu_cost(T_, H, cfg.n_heads)
            rep.add(f"{pre}.sgu", p, mm, o + T_ * H)
            rep.add(f"{pre}.ln2", ln_p, 0, ln_o)
            p, mm, o = ffn_cost(T_, H, F)
            rep.add(f"{pre}.ffn", p, mm, o + T_ * H)
        elif kind in ("transformer", "tmoe"):
            rep.add(f"{pre}.ln1", ln_p, 0, ln_o)
            p, mm, o = attention_cost(T_, H, cfg.n_heads)
            rep.add(f"{pre}.attention", p, mm, o + T_ * H)
            rep.add(f"{pre}.ln2", ln_p, 0, ln_o)
            if kind == "transformer":
                p, mm, o = ffn_cost(T_, H, F)
                rep.add(f"{pre}.ffn", p, mm, o + T_ * H)
            else:
                _tmoe(rep, f"{pre}.tmoe", cfg)
        elif kind == "smlp":
            rep.add(f"{pre}.ln1", ln_p, 0, ln_o)
            rk = cfg.router_kind
            if rk == "deterministic_chunk":
                p = N * (T_ * T_ + T_)
                rep.add(f"{pre}.smoe", p, 2 * T_ * T_ * H, T_ * H + T_ * H)
            else:
                span = T_ - cfg.prefix if rk == "partial_prediction" else T_
                rin = cfg.prefix if rk == "partial_prediction" else T_
                p = N * (span * span + span) + rin * N
                mm = 2 * H * rin * N + 2 * span * span * H
                rep.add(f"{pre}.smoe", p, mm, 5 * H * N + span * H + span * H + T_ * H)
            rep.add(f"{pre}.ln2", ln_p, 0, ln_o)
            _tmoe(rep, f"{pre}.tmoe", cfg)
        elif kind == "gmlp_moe":
            # expected cost under an even split: T/N tokens per expert
            ell = -(-T_ // N)
            ffp, ffm, ffo = ffn_cost(T_, H, F)
            p = N * (2 * ln_p + (T_ * T_ + T_) + ffp)
            router_p = H * N if cfg.token_router != "hash" else 0
            mm = N * 2 * ell * ell * H + ffm + (2 * T_ * H * N if router_p else 0)
            other = 2 * ln_o + T_ * H + ffo + 4 * T_ * H
            rep.add(f"{pre}.gmlp_moe", p + router_p, mm, other)
        else:  # pragma: no cover
            raise ConfigError(kind)
    rep.add("ln_f", ln_p, 0, ln_o)
    rep.add("lm_head (tied)", 0, 2 * T_ * H * V, 0)
    return rep


# ---------------------------------------------------------------------------
# causality probe

LEAK_THRESHOLD = 1e-9


@dataclass
class LeakReport:
    t: int
    u: int
    max_delta: float
    verdict: str


def _perturbed(tokens: np.ndarray, u: int, vocab: int) -> np.ndarray:
    alt = tokens.copy()
    alt[u] = (alt[u] + 1) % vocab
    return alt


def _logits(model: Model, tokens: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return forward_lm(model, tokens, training=False).logits.data


def probe_causality(model: Model, tokens, t: int, u: int) -> LeakReport:
    """Replace token ``u`` and measure the largest logit change at positions <= t."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if not 0 <= t < u < tokens.shape[-1]:
        raise ValueError(f"need 0 <= t < u < T, got t={t}, u={u}")
    base = _logits(model, tokens)
    alt = _logits(model, _perturbed(tokens, u, model.cfg.vocab_size))
    d = float(np.abs(alt[:t + 1] - base[:t + 1]).max())
    return LeakReport(t, u, d, "causal" if d <= LEAK_THRESHOLD else "leak")


def probe_all_pairs(model: Model, tokens) -> list[LeakReport]:
    """Every (t, u) pair with t < u, using one perturbed forward per u."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[-1]
    base = _logits(model, tokens)
    reports = []
    for u in range(1, n):
        diff = np.abs(_logits(model, _perturbed(tokens, u, model.cfg.vocab_size)) - base).max(axis=-1)
        running = np.maximum.accumulate(diff[:u])
        for t in range(u):
            d = float(running[t])
            reports.append(LeakReport(t, u, d, "causal" if d <= LEAK_THRESHOLD else "leak"))
    return reports


def summarize_leaks(reports: list[LeakReport]) -> dict:
    worst = max(reports, key=lambda r: r.max_delta)
    return {"pairs": len(reports), "leaking_pairs": sum(r.verdict == "leak" for r in reports),
            "max_delta": worst.max_delta, "worst_t": worst.t, "worst_u": worst.u,
            "verdict": "leak" if worst.verdict == "leak" else "causal"}


def randomize_parameters(model: Model, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Overwrite every parameter with generic random values (causal masks kept)."""
    for p in model.parameters():
        p.data[...] = rng.normal(0.0, scale, p.shape)
    model.apply_constraints()


# ---------------------------------------------------------------------------
# load balance


@dataclass
class BalanceMetrics:
    loads: list[int]
    max_load: int
    min_load: int
    imbalance_ratio: float


def balance_metrics(plan: R.RoutingPlan, n_experts: int | None = None) -> BalanceMetrics:
    n = n_experts or plan.n_experts
    if plan.n_items == 0:
        raise ValueError("empty routing plan")
    loads = np.bincount(plan.expert.reshape(-1), minlength=n)
    ideal = plan.expert.size / n
    return BalanceMetrics(loads.tolist(), int(loads.max()), int(loads.min()), float(loads.max() / ideal))

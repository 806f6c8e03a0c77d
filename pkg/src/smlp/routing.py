"""Gating functions for token-routed and hidden-dimension-routed experts.

Token routers (``softmax_topk``, ``balanced_assignment``, ``hash``) decide
which expert FFN processes each token. Hidden-dimension routers
(``deterministic_chunk``, ``partial_prediction``, ``naive_smoe``) decide
which expert SGU processes each hidden vector, i.e. each column of the
``T x H`` representation read across the sequence.

Every router returns a :class:`RoutingPlan`. Expert choice is a discrete,
non-differentiable decision; the gate values are tensors and carry
gradient back to the router weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import ConfigError, DivisibilityError, ShapeError
from .tensor import Tensor

TOKEN_ROUTERS = ("softmax_topk", "balanced_assignment", "hash")
HIDDEN_ROUTERS = ("deterministic_chunk", "partial_prediction", "naive_smoe")
ROUTER_KINDS = TOKEN_ROUTERS + HIDDEN_ROUTERS


@dataclass(eq=False)
class RouterParams:
    kind: str
    n_experts: int
    k: int = 1
    w: Tensor | None = None
    hash_seed: int = 0
    group: int | None = None  # balanced assignment solved per block of this many items

    def __post_init__(self):
        if self.kind not in ROUTER_KINDS:
            raise ConfigError(f"unknown router kind {self.kind!r}")
        if self.n_experts < 1:
            raise ConfigError("need at least one expert")
        if not 1 <= self.k <= self.n_experts:
            raise ConfigError(f"top-k width {self.k} outside [1, {self.n_experts}]")
        if self.kind == "deterministic_chunk" and self.w is not None:
            raise ConfigError("deterministic_chunk routing has no learned weights")


@dataclass(eq=False)
class RoutingPlan:
    """Expert choices ``expert`` (M x k) with gate values ``gates`` (M x k)."""

    expert: np.ndarray
    gates: Tensor
    n_experts: int
    probs: Tensor | None = None
    aux_loss: Tensor | None = None

    @property
    def n_items(self) -> int:
        return self.expert.shape[0]

    @property
    def assignments(self) -> list[list[tuple[int, float]]]:
        g = self.gates.data
        return [[(int(e), float(p)) for e, p in zip(er, gr)] for er, gr in zip(self.expert, g)]

    def loads(self) -> np.ndarray:
        return np.bincount(self.expert.reshape(-1), minlength=self.n_experts)

    def items_for(self, e: int) -> tuple[np.ndarray, np.ndarray]:
        """(item indices, slot indices) routed to expert ``e``, item order ascending."""
        return np.nonzero(self.expert == e)


def init_router(rng: np.random.Generator, kind: str, n_experts: int, in_dim: int | None,
                k: int = 1, hash_seed: int = 0, std: float = 0.02) -> RouterParams:
    w = None
    if kind in ("softmax_topk", "balanced_assignment", "partial_prediction", "naive_smoe"):
        w = Tensor(rng.normal(0.0, std, (in_dim, n_experts)), requires_grad=True)
    return RouterParams(kind, n_experts, k, w, hash_seed)


# ---------------------------------------------------------------------------
# softmax gating


def _topk_plan(logits: Tensor, k: int, n: int) -> RoutingPlan:
    if k > n:
        raise ConfigError(f"top-k width {k} exceeds {n} experts")
    probs = T.softmax(logits, axis=-1)
    # stable sort: equal probabilities resolve toward the lower expert index
    idx = np.argsort(-probs.data, axis=-1, kind="stable")[:, :k]
    return RoutingPlan(idx, T.take_along(probs, idx, axis=-1), n, probs=probs)


def _check_w(p: RouterParams, items: Tensor) -> None:
    if p.w is None:
        raise ConfigError(f"{p.kind} router needs weights")
    if items.ndim != 2 or items.shape[1] != p.w.shape[0]:
        raise ShapeError(f"{p.kind} router: items {items.shape} vs weights {p.w.shape}")


def softmax_topk_route(p: RouterParams, items: Tensor) -> RoutingPlan:
    _check_w(p, items)
    plan = _topk_plan(T.matmul(items, p.w), p.k, p.n_experts)
    plan.aux_loss = switch_balance_loss(plan, plan.probs)
    return plan


def switch_balance_loss(plan: RoutingPlan, full_probs: Tensor) -> Tensor:
    """``N * sum_i f_i * P_i``; equals 1 under perfect balance."""
    n = plan.n_experts
    frac = np.bincount(plan.expert[:, 0], minlength=n) / plan.n_items
    mass = T.mean(full_probs, axis=0)
    return T.mul(T.sum(T.mul(mass, frac)), float(n))


# ---------------------------------------------------------------------------
# balanced assignment


def balanced_assignment(affinity: np.ndarray) -> np.ndarray:
    """Expert per item maximising total affinity with loads in {floor, ceil}(M/N).

    Solved exactly as a square assignment problem: each expert owns
    ``floor(M/N)`` mandatory slots plus, when ``M % N`` is nonzero, one
    optional slot; ``N - M % N`` dummy items may only fill optional slots.
    """
    M, N = affinity.shape
    if M == 0:
        return np.zeros(0, dtype=np.int64)
    fl, r = divmod(M, N)
    per = fl + (1 if r else 0)
    slot_expert = np.repeat(np.arange(N), per)
    mandatory = np.tile(np.arange(per) < fl, N)
    cost = -affinity[:, slot_expert]
    if r:
        dummy = np.where(mandatory, np.inf, 0.0)
        cost = np.vstack([cost, np.tile(dummy, (N - r, 1))])
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(M, dtype=np.int64)
    keep = rows < M
    out[rows[keep]] = slot_expert[cols[keep]]
    return out


def greedy_balanced_assignment(affinity: np.ndarray) -> np.ndarray:
    """Single pass over (item, expert) pairs by descending affinity.

    Kept as a cheap reference; its total can fall well short of the optimum.
    """
    M, N = affinity.shape
    fl, r = divmod(M, N)
    load = np.zeros(N, dtype=np.int64)
    out = np.full(M, -1, dtype=np.int64)
    n_full = 0
    for flat in np.argsort(-affinity, axis=None, kind="stable"):
        i, e = divmod(int(flat), N)
        if out[i] >= 0:
            continue
        if load[e] < fl or (load[e] == fl and n_full < r):
            n_full += load[e] == fl
            load[e] += 1
            out[i] = e
    return out


def balanced_assignment_route(p: RouterParams, items: Tensor, training: bool = True) -> RoutingPlan:
    """Balanced routing while training; per-item argmax at inference.

    Gates are ``sigmoid(affinity)`` of the chosen pair.
    """
    _check_w(p, items)
    aff = T.matmul(items, p.w)
    if training:
        g = p.group or aff.shape[0]
        if aff.shape[0] % g:
            raise ShapeError(f"{aff.shape[0]} items do not split into groups of {g}")
        choice = np.concatenate([balanced_assignment(aff.data[i:i + g])
                                 for i in range(0, aff.shape[0], g)])
    else:
        choice = np.argmax(aff.data, axis=1)
    idx = choice[:, None]
    return RoutingPlan(idx, T.sigmoid(T.take_along(aff, idx, axis=1)), p.n_experts)


# ---------------------------------------------------------------------------
# hash routing

_MASK64 = (1 << 64) - 1


def splitmix64(x):
    """SplitMix64 finaliser on uint64 values (wraps modulo 2**64)."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def hash64(token_ids, seed: int) -> np.ndarray:
    """``splitmix64(id XOR splitmix64(seed))``."""
    ids = np.asarray(token_ids, dtype=np.int64).astype(np.uint64)
    return splitmix64(ids ^ splitmix64(np.uint64(seed & _MASK64)))


def hash_route(p: RouterParams, token_ids) -> RoutingPlan:
    ids = np.asarray(token_ids).reshape(-1)
    expert = (hash64(ids, p.hash_seed) % np.uint64(p.n_experts)).astype(np.int64)
    return RoutingPlan(expert[:, None], Tensor._wrap(np.ones((ids.size, 1))), p.n_experts)


# ---------------------------------------------------------------------------
# hidden-dimension routing


def deterministic_chunk_route(hidden: int, n_experts: int) -> RoutingPlan:
    """Hidden dims ``[i*H/N, (i+1)*H/N)`` go to expert ``i`` with gate 1."""
    if n_experts < 1 or hidden % n_experts:
        raise DivisibilityError(f"hidden dim {hidden} not divisible by {n_experts} experts")
    expert = np.arange(hidden) // (hidden // n_experts)
    return RoutingPlan(expert[:, None], Tensor._wrap(np.ones((hidden, 1))), n_experts)


def partial_prediction_route(p: RouterParams, v1: Tensor) -> RoutingPlan:
    """Route each hidden vector using only its first ``floor(0.2 T)`` positions.

    ``v1`` is ``(items, prefix_len)``: one row per hidden vector.
    """
    _check_w(p, v1)
    return _topk_plan(T.matmul(v1, p.w), p.k, p.n_experts)


def naive_smoe_route(p: RouterParams, v: Tensor) -> RoutingPlan:
    """Route each hidden vector from the whole sequence, future included.

    Leaks future tokens into past outputs; kept as a negative control.
    """
    _check_w(p, v)
    return _topk_plan(T.matmul(v, p.w), p.k, p.n_experts)


def prefix_len(seq_len: int, fraction: float = 0.2) -> int:
    return max(1, int(np.floor(fraction * seq_len + 1e-9)))

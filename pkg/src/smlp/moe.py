"""Sparse layers: token-routed FFN experts (tMoE), hidden-routed SGU experts
(sMoE), and the naive token-routed gMLP layer used as a negative control.

Each function returns the layer's contribution; residual connections are
added by the enclosing block. Experts run in index order and results are
scattered back through fixed index maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import routing as R
from . import tensor as T
from .errors import CapacityError, ConfigError, ShapeError
from .nn import FFNParams, LayerNormParams, SGUParams
from .tensor import Tensor


@dataclass(eq=False)
class GMLPExpert:
    """A full gMLP layer living on one expert."""

    ln1: LayerNormParams
    sgu: SGUParams
    ln2: LayerNormParams
    ffn: FFNParams


@dataclass(eq=False)
class ExpertPool:
    experts: list = field(default_factory=list)

    def __post_init__(self):
        if not self.experts:
            raise ConfigError("an expert pool needs at least one expert")

    @property
    def n(self) -> int:
        return len(self.experts)


def route_tokens(router: R.RouterParams, items: Tensor, token_ids=None,
                 training: bool = False) -> R.RoutingPlan:
    if router.kind == "softmax_topk":
        return R.softmax_topk_route(router, items)
    if router.kind == "balanced_assignment":
        return R.balanced_assignment_route(router, items, training=training)
    if router.kind == "hash":
        if token_ids is None:
            raise ConfigError("hash routing needs token ids")
        return R.hash_route(router, token_ids)
    raise ConfigError(f"{router.kind!r} is not a token router")


def dispatch_combine(plan: R.RoutingPlan, x: Tensor, fns) -> Tensor:
    """Send rows of ``x`` (M x D) to experts, gate, and scatter back.

    ``fns[e]`` maps the rows routed to expert ``e`` to outputs of the same
    row count. Row order inside each expert follows the original order.
    """
    if plan.n_items != x.shape[0]:
        raise ShapeError(f"plan covers {plan.n_items} items, batch has {x.shape[0]}")
    parts = []
    for e, fn in enumerate(fns):
        rows, slots = plan.items_for(e)
        if rows.size == 0:
            continue
        if rows.size == 1:
            # BLAS sends single-row products down a different kernel; keep
            # every row on the same path so results never depend on load
            y = T.slice_axis(fn(T.take(x, np.repeat(rows, 2), axis=0)), 0, 1, axis=0)
        else:
            y = fn(T.take(x, rows, axis=0))
        g = T.reshape(T.take_along(T.take(plan.gates, rows, axis=0), slots[:, None], axis=1),
                      (rows.size, 1))
        parts.append((T.mul(y, g), rows))
    return T.combine(parts, x.shape[0], axis=0)


def tmoe_forward(pool: ExpertPool, router: R.RouterParams, x: Tensor, token_ids=None,
                 training: bool = False) -> tuple[Tensor, R.RoutingPlan]:
    """Token-routed FFN experts: ``sum_{i in top-k} p_i(x) E_i(x)`` per token."""
    if router.n_experts != pool.n:
        raise ConfigError(f"router has {router.n_experts} experts, pool has {pool.n}")
    lead, dim = x.shape[:-1], x.shape[-1]
    flat = T.reshape(x, (-1, dim))
    ids = None if token_ids is None else np.asarray(token_ids).reshape(-1)
    plan = route_tokens(router, flat, ids, training)
    fns = [lambda z, p=p: nn.ffn_forward(p, z) for p in pool.experts]
    y = dispatch_combine(plan, flat, fns)
    return T.reshape(y, lead + (dim,)), plan


def _hidden_rows(x: Tensor) -> Tensor:
    """(B, T, H) -> (B*H, T): one row per hidden vector."""
    b, n, h = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1)), (b * h, n))


def _from_hidden_rows(v: Tensor, b: int, h: int) -> Tensor:
    n = v.shape[1]
    return T.transpose(T.reshape(v, (b, h, n)), (0, 2, 1))


def _sgu_rows(p: SGUParams, v: Tensor) -> Tensor:
    """Apply an SGU to hidden vectors stored as rows: ``V W_s^T + b``."""
    if v.shape[1] != p.seq_len:
        raise ShapeError(f"SGU expects {p.seq_len} positions, got {v.shape[1]}")
    return T.add(T.matmul(v, T.transpose(p.w)), p.b)


def smoe_forward(pool: ExpertPool, router: R.RouterParams, x: Tensor,
                 prefix: int | None = None) -> tuple[Tensor, R.RoutingPlan]:
    """Hidden-dimension routed SGU experts over ``x`` of shape (B, T, H) or (T, H).

    * ``deterministic_chunk``: contiguous hidden chunks, one expert SGU each.
    * ``partial_prediction``: routing reads the first ``prefix`` positions;
      experts transform the remaining positions; prefix outputs are zero.
    * ``naive_smoe``: routing reads every position (leaks the future).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    b, n, h = x.shape
    if router.n_experts != pool.n:
        raise ConfigError(f"router has {router.n_experts} experts, pool has {pool.n}")
    kind = router.kind
    if kind == "deterministic_chunk":
        plan = R.deterministic_chunk_route(h, pool.n)
        out = nn.multi_head_sgu(pool.experts, x)
    elif kind == "naive_smoe":
        v = _hidden_rows(x)
        plan = R.naive_smoe_route(router, v)
        fns = [lambda z, p=p: _sgu_rows(p, z) for p in pool.experts]
        out = _from_hidden_rows(dispatch_combine(plan, v, fns), b, h)
    elif kind == "partial_prediction":
        if prefix is None:
            prefix = R.prefix_len(n)
        if not 1 <= prefix < n:
            raise ShapeError(f"prefix {prefix} must lie in [1, {n})")
        v = _hidden_rows(x)
        plan = R.partial_prediction_route(router, T.slice_axis(v, 0, prefix, axis=1))
        fns = [lambda z, p=p: _sgu_rows(p, z) for p in pool.experts]
        tail = dispatch_combine(plan, T.slice_axis(v, prefix, n, axis=1), fns)
        head = Tensor._wrap(np.zeros((b * h, prefix)))
        out = _from_hidden_rows(T.concat([head, tail], axis=1), b, h)
    else:
        raise ConfigError(f"{kind!r} is not a hidden-dimension router")
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out, plan


def _sgu_leading(p: SGUParams, x: Tensor, n: int) -> Tensor:
    """SGU restricted to its first ``n`` positions (the leading ``n x n`` block)."""
    if n == p.seq_len:
        return nn.sgu_forward(p, x)
    w = T.slice_axis(T.slice_axis(p.w, 0, n, axis=0), 0, n, axis=1)
    return T.add(T.matmul(w, x), T.reshape(T.slice_axis(p.b, 0, n, axis=0), (n, 1)))


def _gmlp_expert_batch(ex: GMLPExpert, z: Tensor, gate: Tensor) -> Tensor:
    """gMLP layer on packed subsequences ``z`` (B x L x H), gated by ``gate`` (B x L x 1).

    Subsequence position j uses SGU row j; trailing padding only feeds
    positions after it through the causal mask.
    """
    s = _sgu_leading(ex.sgu, nn.layernorm(ex.ln1, z), z.shape[1])
    f = nn.ffn_forward(ex.ffn, nn.layernorm(ex.ln2, T.add(z, s)))
    return T.add(T.add(z, T.mul(s, gate)), T.mul(f, gate))


def naive_gmlp_token_moe_forward(pool: ExpertPool, router: R.RouterParams, x: Tensor,
                                 token_ids=None, training: bool = False) -> tuple[Tensor, R.RoutingPlan]:
    """Token-routed gMLP layers: each expert mixes only the tokens it received.

    Returns the full layer output (residuals included). Top-1 routing only.
    Each expert packs its tokens per sequence into a zero-padded block. At
    inference the block spans the full sequence so array shapes never depend
    on routing; in training it shrinks to the largest per-sequence load.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
        if token_ids is not None:
            token_ids = np.asarray(token_ids)[None]
    if router.k != 1:
        raise ConfigError("the token-routed gMLP layer supports top-1 routing only")
    b, n, h = x.shape
    if any(ex.sgu.seq_len < n for ex in pool.experts):
        raise CapacityError(f"sequence of {n} tokens exceeds expert capacity")
    flat = T.reshape(x, (b * n, h))
    ids = None if token_ids is None else np.asarray(token_ids).reshape(-1)
    plan = route_tokens(router, flat, ids, training)
    choice = plan.expert[:, 0].reshape(b, n)
    # slot of each token inside its (sequence, expert) subsequence
    slot = np.zeros((b, n), dtype=np.int64)
    for e in range(pool.n):
        mine = choice == e
        slot[mine] = (np.cumsum(mine, axis=1) - 1)[mine]
    width = n if not training else int(max(np.bincount(c, minlength=pool.n).max() for c in choice))
    parts = []
    for e, ex in enumerate(pool.experts):
        rows = np.flatnonzero(choice.reshape(-1) == e)
        if rows.size == 0:
            continue
        dest = (rows // n) * width + slot.reshape(-1)[rows]
        z = T.reshape(T.combine([(T.take(flat, rows, axis=0), dest)], b * width, axis=0), (b, width, h))
        g = T.reshape(T.combine([(T.take(plan.gates, rows, axis=0), dest)], b * width, axis=0),
                      (b, width, 1))
        y = T.reshape(_gmlp_expert_batch(ex, z, g), (b * width, h))
        parts.append((T.take(y, dest, axis=0), rows))
    out = T.reshape(T.combine(parts, b * n, axis=0), (b, n, h))
    if squeeze:
        out = T.reshape(out, (n, h))
    return out, plan

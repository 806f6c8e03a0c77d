"""Model assembly: configs, block placement, and the language-model forward."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import moe
from . import nn
from . import routing as R
from . import tensor as T
from .errors import ConfigError, ShapeError
from .moe import ExpertPool, GMLPExpert
from .nn import AttentionParams, FFNParams, LayerNormParams, SGUParams
from .tensor import Tensor

ARCHS = ("smlp", "gmlp", "transformer", "transformer_moe", "gmlp_token_moe")
PLACEMENTS = ("after_dense", "combined")
BALANCE_GROUPS = ("batch", "sequence")


@dataclass
class ModelConfig:
    vocab_size: int = 64
    seq_len: int = 32
    embed_dim: int = 32
    ffn_dim: int = 64
    n_dense: int = 2
    n_sparse: int = 1
    n_experts: int = 2
    n_heads: int = 1
    arch: str = "smlp"
    router_kind: str = "deterministic_chunk"  # hidden-dimension router of sMoE
    token_router: str = "balanced_assignment"  # router of tMoE / token-routed layers
    top_k: int = 1
    partial_fraction: float = 0.2
    balance_coef: float = 0.01
    hash_seed: int = 0
    dropout: float = 0.0
    placement: str = "after_dense"
    balance_group: str = "batch"  # scope of the balanced-assignment constraint while training
    init_std: float = 0.02
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        for name in ("vocab_size", "seq_len", "embed_dim", "ffn_dim", "n_experts", "n_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_dense < 0 or self.n_sparse < 0:
            raise ConfigError("layer counts must be nonnegative")
        if self.n_dense + self.n_sparse == 0:
            raise ConfigError("model has no blocks")
        if self.arch in ("gmlp", "transformer") and self.n_sparse:
            raise ConfigError(f"dense arch {self.arch!r} cannot have sparse blocks")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.router_kind not in R.HIDDEN_ROUTERS:
            raise ConfigError(f"router_kind must be one of {R.HIDDEN_ROUTERS}")
        if self.token_router not in R.TOKEN_ROUTERS:
            raise ConfigError(f"token_router must be one of {R.TOKEN_ROUTERS}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k {self.top_k} outside [1, {self.n_experts}]")
        if self.arch == "gmlp_token_moe" and self.top_k != 1:
            raise ConfigError("gmlp_token_moe supports top_k = 1 only")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}")
        if self.balance_group not in BALANCE_GROUPS:
            raise ConfigError(f"balance_group must be one of {BALANCE_GROUPS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.arch == "smlp" and self.n_sparse:
            if self.router_kind == "deterministic_chunk" and self.embed_dim % self.n_experts:
                raise ConfigError(
                    f"deterministic routing needs embed_dim ({self.embed_dim}) divisible by "
                    f"n_experts ({self.n_experts})")
            if self.router_kind == "partial_prediction":
                p = R.prefix_len(self.seq_len, self.partial_fraction)
                if p >= self.seq_len:
                    raise ConfigError("partial prediction leaves no positions to predict")
        block_spec(self)
        return self

    @property
    def uses_partial(self) -> bool:
        return self.arch == "smlp" and self.n_sparse > 0 and self.router_kind == "partial_prediction"

    @property
    def prefix(self) -> int:
        return R.prefix_len(self.seq_len, self.partial_fraction)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def placement(n_dense: int, n_sparse: int) -> list[int]:
    """Dense-layer indices after which sparse blocks go: floor(j (N1+N2) / (N2+1))."""
    if n_dense < 0 or n_sparse < 0:
        raise ConfigError("layer counts must be nonnegative")
    total = n_dense + n_sparse
    idx = [j * total // (n_sparse + 1) for j in range(1, n_sparse + 1)]
    for j, i in enumerate(idx):
        if i < 1 or i > n_dense:
            raise ConfigError(
                f"sparse block {j + 1} would follow dense layer {i}, outside [1, {n_dense}] "
                f"(N1={n_dense}, N2={n_sparse})")
        if j and i <= idx[j - 1]:
            raise ConfigError(f"placement indices not strictly increasing: {idx}")
    return idx


def combined_placement(n_dense: int, n_sparse: int) -> list[int]:
    """0-based slots of sparse blocks in the full stack of N1+N2 blocks."""
    total = n_dense + n_sparse
    idx = [j * total // (n_sparse + 1) for j in range(1, n_sparse + 1)]
    if any(b <= a for a, b in zip(idx, idx[1:])) or (idx and idx[-1] >= total):
        raise ConfigError(f"cannot spread {n_sparse} sparse blocks over {total} slots")
    return idx


def block_spec(cfg: ModelConfig) -> list[str]:
    dense = "transformer" if cfg.arch in ("transformer", "transformer_moe") else "gmlp"
    sparse = {"smlp": "smlp", "transformer_moe": "tmoe", "gmlp_token_moe": "gmlp_moe"}.get(cfg.arch)
    if cfg.placement == "after_dense":
        after = set(placement(cfg.n_dense, cfg.n_sparse))
        kinds = []
        for i in range(1, cfg.n_dense + 1):
            kinds.append(dense)
            if i in after:
                kinds.append(sparse)
        if cfg.n_dense == 0:
            raise ConfigError("after_dense placement needs at least one dense layer")
        return kinds
    slots = set(combined_placement(cfg.n_dense, cfg.n_sparse))
    return [sparse if i in slots else dense for i in range(cfg.n_dense + cfg.n_sparse)]


# ---------------------------------------------------------------------------
# blocks


@dataclass
class Ctx:
    training: bool = False
    token_ids: np.ndarray | None = None
    rng: np.random.Generator | None = None
    dropout: float = 0.0
    plans: list = field(default_factory=list)
    aux: list = field(default_factory=list)

    def drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.dropout, self.rng) if self.training else x


@dataclass(eq=False)
class GMLPBlock:
    ln1: LayerNormParams
    heads: list[SGUParams]
    ln2: LayerNormParams
    ffn: FFNParams

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        h = T.add(x, ctx.drop(nn.multi_head_sgu(self.heads, nn.layernorm(self.ln1, x))))
        return T.add(h, ctx.drop(nn.ffn_forward(self.ffn, nn.layernorm(self.ln2, h))))


@dataclass(eq=False)
class TransformerBlock:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    ffn: FFNParams

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        h = T.add(x, ctx.drop(nn.self_attention(self.attn, nn.layernorm(self.ln1, x), causal=True)))
        return T.add(h, ctx.drop(nn.ffn_forward(self.ffn, nn.layernorm(self.ln2, h))))


def _tmoe_sublayer(ln, pool, router, x, ctx) -> Tensor:
    y, plan = moe.tmoe_forward(pool, router, nn.layernorm(ln, x), ctx.token_ids, ctx.training)
    ctx.plans.append(("tmoe", plan))
    if plan.aux_loss is not None:
        ctx.aux.append(plan.aux_loss)
    return T.add(x, ctx.drop(y))


@dataclass(eq=False)
class SparseMLPBlock:
    """sMoE token mixing followed by tMoE feed-forward."""

    ln1: LayerNormParams
    smoe_pool: ExpertPool
    smoe_router: R.RouterParams
    ln2: LayerNormParams
    tmoe_pool: ExpertPool
    tmoe_router: R.RouterParams
    prefix: int | None = None

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        y, plan = moe.smoe_forward(self.smoe_pool, self.smoe_router, nn.layernorm(self.ln1, x),
                                   prefix=self.prefix)
        ctx.plans.append(("smoe", plan))
        h = T.add(x, ctx.drop(y))
        return _tmoe_sublayer(self.ln2, self.tmoe_pool, self.tmoe_router, h, ctx)


@dataclass(eq=False)
class SparseTransformerBlock:
    """Dense attention followed by tMoE feed-forward."""

    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    tmoe_pool: ExpertPool
    tmoe_router: R.RouterParams

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        h = T.add(x, ctx.drop(nn.self_attention(self.attn, nn.layernorm(self.ln1, x), causal=True)))
        return _tmoe_sublayer(self.ln2, self.tmoe_pool, self.tmoe_router, h, ctx)


@dataclass(eq=False)
class TokenRoutedGMLPBlock:
    pool: ExpertPool
    router: R.RouterParams

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        y, plan = moe.naive_gmlp_token_moe_forward(self.pool, self.router, x, ctx.token_ids,
                                                   ctx.training)
        ctx.plans.append(("tmoe", plan))
        if plan.aux_loss is not None:
            ctx.aux.append(plan.aux_loss)
        return y


# ---------------------------------------------------------------------------
# model


@dataclass(eq=False)
class Model:
    cfg: ModelConfig
    emb: Tensor
    pos: Tensor | None
    blocks: list
    ln_f: LayerNormParams

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        _walk(self.emb, "emb", out)
        if self.pos is not None:
            _walk(self.pos, "pos", out)
        for i, b in enumerate(self.blocks):
            _walk(b, f"blocks.{i}", out)
        _walk(self.ln_f, "ln_f", out)
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_params(self) -> int:
        return int(np.sum([t.size for t in self.parameters()]))

    def sgus(self) -> list[SGUParams]:
        found: list[SGUParams] = []
        _collect(self.blocks, SGUParams, found)
        return found

    def apply_constraints(self) -> None:
        """Re-zero the future-facing entries of every causal SGU."""
        for s in self.sgus():
            s.apply_mask()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        if set(named) != set(state):
            raise ConfigError("parameter names do not match the model")
        for k, t in named.items():
            if t.shape != state[k].shape:
                raise ShapeError(f"{k}: expected {t.shape}, got {state[k].shape}")
            t.data[...] = state[k]


def _walk(obj, prefix: str, out: list) -> None:
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            out.append((prefix, obj))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            _walk(getattr(obj, f.name), f"{prefix}.{f.name}", out)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _walk(v, f"{prefix}.{i}", out)


def _collect(obj, cls, out: list) -> None:
    if isinstance(obj, cls):
        out.append(obj)
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            _collect(getattr(obj, f.name), cls, out)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _collect(v, cls, out)


def _token_router(rng, cfg: ModelConfig) -> R.RouterParams:
    r = R.init_router(rng, cfg.token_router, cfg.n_experts, cfg.embed_dim, k=cfg.top_k,
                      hash_seed=cfg.hash_seed, std=cfg.init_std)
    if cfg.balance_group == "sequence":
        r.group = cfg.seq_len
    return r


def _build_block(kind: str, rng: np.random.Generator, cfg: ModelConfig):
    H, F, Tn, N, std = cfg.embed_dim, cfg.ffn_dim, cfg.seq_len, cfg.n_experts, cfg.init_std
    ln = nn.init_layernorm
    if kind == "gmlp":
        heads = [nn.init_sgu(rng, Tn) for _ in range(cfg.n_heads)]
        return GMLPBlock(ln(H), heads, ln(H), nn.init_ffn(rng, H, F, std))
    if kind == "transformer":
        return TransformerBlock(ln(H), nn.init_attention(rng, H, cfg.n_heads, std), ln(H),
                                nn.init_ffn(rng, H, F, std))
    if kind == "smlp":
        prefix = None
        span = Tn
        if cfg.router_kind == "partial_prediction":
            prefix = cfg.prefix
            span = Tn - prefix
        smoe_pool = ExpertPool([nn.init_sgu(rng, span) for _ in range(N)])
        in_dim = {"partial_prediction": prefix, "naive_smoe": Tn}.get(cfg.router_kind)
        smoe_router = R.init_router(rng, cfg.router_kind, N, in_dim, k=1, std=std)
        tmoe_pool = ExpertPool([nn.init_ffn(rng, H, F, std) for _ in range(N)])
        return SparseMLPBlock(ln(H), smoe_pool, smoe_router, ln(H), tmoe_pool,
                              _token_router(rng, cfg), prefix)
    if kind == "tmoe":
        attn = nn.init_attention(rng, H, cfg.n_heads, std)
        tmoe_pool = ExpertPool([nn.init_ffn(rng, H, F, std) for _ in range(N)])
        return SparseTransformerBlock(ln(H), attn, ln(H), tmoe_pool, _token_router(rng, cfg))
    if kind == "gmlp_moe":
        experts = [GMLPExpert(ln(H), nn.init_sgu(rng, Tn), ln(H), nn.init_ffn(rng, H, F, std))
                   for _ in range(N)]
        return TokenRoutedGMLPBlock(ExpertPool(experts), _token_router(rng, cfg))
    raise ConfigError(f"unknown block kind {kind!r}")


def build_model(cfg: ModelConfig) -> Model:
    """Embedding, block stack, final layernorm; output projection tied to the embedding."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    emb = Tensor(rng.normal(0.0, cfg.init_std, (cfg.vocab_size, cfg.embed_dim)), requires_grad=True)
    pos = None
    if cfg.arch in ("transformer", "transformer_moe"):
        pos = Tensor(rng.normal(0.0, cfg.init_std, (cfg.seq_len, cfg.embed_dim)), requires_grad=True)
    blocks = [_build_block(kind, rng, cfg) for kind in block_spec(cfg)]
    return Model(cfg, emb, pos, blocks, nn.init_layernorm(cfg.embed_dim))


class LMOutput(NamedTuple):
    logits: Tensor
    mask: np.ndarray
    aux_loss: Tensor | None
    plans: list


def loss_mask(cfg: ModelConfig, seq_len: int) -> np.ndarray:
    mask = np.ones(seq_len, dtype=bool)
    if cfg.uses_partial:
        mask[:cfg.prefix] = False
    return mask


def forward_lm(model: Model, tokens, training: bool = False,
               rng: np.random.Generator | None = None) -> LMOutput:
    """Next-token logits for ``tokens`` of shape (T,) or (B, T).

    ``mask`` marks the positions whose predictions count toward the loss.
    """
    cfg = model.cfg
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    if ids.ndim != 2 or ids.shape[1] != cfg.seq_len:
        raise ShapeError(f"expected {cfg.seq_len} tokens per sequence, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ShapeError(f"token id out of range [0, {cfg.vocab_size})")
    ctx = Ctx(training=training, token_ids=ids, rng=rng, dropout=cfg.dropout)
    x = T.embedding(model.emb, ids)
    if model.pos is not None:
        x = T.add(x, model.pos)
    x = ctx.drop(x)
    for blk in model.blocks:
        x = blk.forward(x, ctx)
    x = nn.layernorm(model.ln_f, x)
    logits = T.matmul(T.reshape(x, (-1, cfg.embed_dim)), T.transpose(model.emb))
    logits = T.reshape(logits, ids.shape + (cfg.vocab_size,))
    mask = np.broadcast_to(loss_mask(cfg, cfg.seq_len), ids.shape)
    aux = None
    if ctx.aux:
        aux = ctx.aux[0]
        for a in ctx.aux[1:]:
            aux = T.add(aux, a)
    if single:
        logits = T.reshape(logits, logits.shape[1:])
        mask = mask[0]
    return LMOutput(logits, np.array(mask), aux, ctx.plans)


def lm_loss(model: Model, inputs, targets, training: bool = False,
            rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, LMOutput]:
    """(total loss, masked cross-entropy, forward output)."""
    out = forward_lm(model, inputs, training=training, rng=rng)
    ce = T.cross_entropy(out.logits, targets, out.mask)
    total = ce
    if out.aux_loss is not None and model.cfg.balance_coef:
        total = T.add(ce, T.mul(out.aux_loss, model.cfg.balance_coef))
    return total, ce, out

import math

import numpy as np
import pytest

from smlp import tensor as T
from smlp.analysis import count_costs
from smlp.errors import ConfigError, ShapeError
from smlp.model import (ARCHS, ModelConfig, block_spec, build_model, combined_placement, forward_lm,
                        lm_loss, loss_mask, placement)

from conftest import tiny_cfg

VARIANTS = [
    dict(arch="gmlp", n_sparse=0),
    dict(arch="transformer", n_sparse=0, n_heads=2),
    dict(arch="smlp"),
    dict(arch="smlp", router_kind="partial_prediction"),
    dict(arch="smlp", router_kind="naive_smoe"),
    dict(arch="smlp", token_router="hash"),
    dict(arch="smlp", token_router="softmax_topk", top_k=2),
    dict(arch="transformer_moe", token_router="softmax_topk", top_k=2),
    dict(arch="gmlp_token_moe"),
    dict(arch="smlp", n_heads=2, n_experts=4),
]


@pytest.mark.parametrize("n1,n2,expected", [(24, 1, [12]), (22, 2, [8, 16]), (4, 2, [2, 4]),
                                            (2, 1, [1]), (10, 4, None)])
def test_placement_formula(n1, n2, expected):
    if expected is None:
        with pytest.raises(ConfigError):
            placement(n1, n2)
        return
    assert placement(n1, n2) == expected
    assert expected == [j * (n1 + n2) // (n2 + 1) for j in range(1, n2 + 1)]


def test_placement_out_of_range_and_combined():
    with pytest.raises(ConfigError):
        placement(28, 12)
    slots = combined_placement(28, 12)
    assert len(slots) == 12 and len(set(slots)) == 12 and max(slots) < 40


def test_block_spec_layout():
    assert block_spec(tiny_cfg(n_dense=4, n_sparse=2)) == ["gmlp", "gmlp", "smlp", "gmlp", "gmlp", "smlp"]
    cfg = tiny_cfg(arch="transformer_moe", n_dense=2, n_sparse=1)
    assert block_spec(cfg) == ["transformer", "tmoe", "transformer"]


@pytest.mark.parametrize("kw", VARIANTS, ids=lambda d: "-".join(map(str, d.values())))
def test_forward_shapes_and_param_count(kw):
    cfg = tiny_cfg(**kw)
    m = build_model(cfg)
    out = forward_lm(m, np.zeros((3, cfg.seq_len), int))
    assert out.logits.shape == (3, cfg.seq_len, cfg.vocab_size)
    assert m.n_params() == count_costs(cfg).total_params


@pytest.mark.parametrize("kw", VARIANTS[:4], ids=lambda d: "-".join(map(str, d.values())))
def test_fresh_model_loss_is_log_vocab(kw):
    cfg = tiny_cfg(**kw)
    m = build_model(cfg)
    ids = np.random.default_rng(0).integers(0, cfg.vocab_size, (4, cfg.seq_len + 1))
    _, ce, _ = lm_loss(m, ids[:, :-1], ids[:, 1:])
    assert abs(ce.item() - math.log(cfg.vocab_size)) < 0.05


def test_single_sequence_matches_batch_row():
    m = build_model(tiny_cfg())
    ids = np.random.default_rng(1).integers(0, 11, (2, 8))
    a = forward_lm(m, ids).logits.data
    b = forward_lm(m, ids[1]).logits.data
    np.testing.assert_array_equal(a[1], b)


def test_loss_mask_partial():
    cfg = tiny_cfg(seq_len=16, router_kind="partial_prediction")
    mask = loss_mask(cfg, 16)
    assert mask.sum() == 16 - 3 and not mask[:3].any()
    assert loss_mask(tiny_cfg(), 8).all()


def test_tied_head_gradient_reaches_embedding():
    m = build_model(tiny_cfg())
    ids = np.random.default_rng(2).integers(0, 11, (2, 9))
    with T.Tape():
        total, _, _ = lm_loss(m, ids[:, :-1], ids[:, 1:], training=True)
        T.backward(total)
    assert m.emb.grad is not None and np.abs(m.emb.grad).max() > 0
    names = [k for k, _ in m.named_parameters()]
    assert len(names) == len(set(names))


def test_config_validation_errors():
    bad = [dict(arch="bogus"), dict(arch="gmlp"), dict(embed_dim=15, n_experts=2),
           dict(top_k=3), dict(router_kind="hash"), dict(token_router="deterministic_chunk"),
           dict(seq_len=1, router_kind="partial_prediction"), dict(dropout=1.0),
           dict(balance_group="world")]
    for kw in bad:
        with pytest.raises(ConfigError):
            tiny_cfg(**kw).validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"nonsense": 1})


def test_config_json_roundtrip():
    cfg = tiny_cfg(arch="transformer_moe", token_router="hash")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_rejects_wrong_length_and_ids():
    m = build_model(tiny_cfg())
    with pytest.raises(ShapeError):
        forward_lm(m, np.zeros(7, int))
    with pytest.raises(ShapeError):
        forward_lm(m, np.full(8, 11))


def test_build_is_deterministic():
    a, b = build_model(tiny_cfg(seed=5)), build_model(tiny_cfg(seed=5))
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(ta.data, tb.data)


def test_all_archs_listed():
    assert set(ARCHS) == {v["arch"] for v in VARIANTS}

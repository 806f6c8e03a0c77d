import math

import numpy as np
import pytest

from smlp import tensor as T
from smlp.data import PAD, UNK, Corpus, Vocab, batch_for_step, synthetic_text, windows
from smlp.errors import ConfigError, TrainingDivergenceError
from smlp.model import build_model, lm_loss
from smlp.train import (TrainConfig, TrainState, adam_update, clip_grad_norm, evaluate_loss,
                        evaluate_ppl, format_metrics, inverse_sqrt_lr, train, train_step)

from conftest import tiny_cfg


def test_vocab_roundtrip():
    text = "hello, world\nüñí"
    v = Vocab.from_text(text)
    assert v.decode(v.encode(text)) == text
    assert v.chars == sorted(set(text)) and len(v) == len(set(text)) + 2
    assert v.encode("?")[0] == UNK and v.encode("h")[0] > UNK > PAD
    assert Vocab.from_codes(v.to_codes()).chars == v.chars


def test_corpus_split_disjoint():
    c = Corpus.from_text("abcdefghij" * 10, valid_fraction=0.2)
    assert len(c.train) == 80 and len(c.valid) == 20
    assert len(c.train) + len(c.valid) == len(c.tokens)
    with pytest.raises(ConfigError):
        Corpus.from_text("")


def test_windows_layout():
    w = windows(np.arange(20), 4)
    assert w.shape == (4, 5)
    np.testing.assert_array_equal(w[1], [4, 5, 6, 7, 8])
    assert windows(np.arange(4), 4).shape == (0, 5)


def test_batches_are_pure_and_cover_each_epoch():
    w = windows(np.arange(101), 4)
    assert np.array_equal(batch_for_step(w, 3, 5, seed=1), batch_for_step(w, 3, 5, seed=1))
    seen = np.concatenate([batch_for_step(w, s, 5, seed=1)[:, 0] for s in range(1, 6)])
    assert sorted(seen) == list(range(0, 100, 4))
    assert not np.array_equal(batch_for_step(w, 1, 5, seed=1), batch_for_step(w, 1, 5, seed=2))


def test_synthetic_text_is_seeded():
    assert synthetic_text(500, 3) == synthetic_text(500, 3) != synthetic_text(500, 4)
    assert len(synthetic_text(1234)) == 1234


def test_lr_schedule():
    cfg = TrainConfig()
    assert inverse_sqrt_lr(4000, cfg) == pytest.approx(5e-4, rel=1e-15)
    assert inverse_sqrt_lr(16000, cfg) == pytest.approx(2.5e-4, rel=1e-15)
    assert inverse_sqrt_lr(0, cfg) == pytest.approx(1e-7)
    assert inverse_sqrt_lr(2000, cfg) == pytest.approx(1e-7 + 0.5 * (5e-4 - 1e-7))


def test_adam_matches_scalar_reference():
    b1, b2, eps, lr, wd = 0.9, 0.98, 1e-8, 1e-2, 0.1
    p = np.array([0.7])
    m, v = np.zeros(1), np.zeros(1)
    ps, ms, vs = 0.7, 0.0, 0.0
    rng = np.random.default_rng(0)
    for t in range(1, 60):
        g = float(rng.normal())
        adam_update(p, np.array([g]), m, v, t, lr, (b1, b2), eps, wd)
        ms = b1 * ms + (1 - b1) * g
        vs = b2 * vs + (1 - b2) * g * g
        ps = ps - wd * lr * ps
        ps = ps - lr * math.sqrt(1 - b2**t) / (1 - b1**t) * ms / (math.sqrt(vs) + eps)
        assert abs(p[0] - ps) <= 1e-12


def test_clip_grad_norm():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert math.sqrt(g[0][0] ** 2 + g[1][0] ** 2) == pytest.approx(1.0, abs=1e-6)


def _corpus(n=4000, seed=0):
    return Corpus.from_text(synthetic_text(n, seed))


def test_first_step_loss_is_log_vocab_and_smoke_run_improves():
    c = _corpus()
    model = build_model(tiny_cfg(vocab_size=len(c.vocab), seq_len=16))
    tcfg = TrainConfig(steps=200, batch_size=8, lr=3e-3, warmup_updates=20, log_interval=0)
    state, losses = train(model, c, tcfg)
    assert abs(losses[0] - math.log(len(c.vocab))) < 0.05
    assert losses[-1] < losses[0] and state.step == 200


def test_train_step_reapplies_causal_mask_and_reports_balance():
    c = _corpus()
    model = build_model(tiny_cfg(vocab_size=len(c.vocab)))
    state = TrainState.fresh(model)
    batch = batch_for_step(windows(c.train, 8), 1, 4, 0)
    m = train_step(model, state, batch, TrainConfig(lr=1.0, warmup_updates=0))
    for s in model.sgus():
        assert np.all(np.triu(s.w.data, 1) == 0)
    assert m["imbalance_ratio"] >= 1.0 and m["step"] == 1


def test_divergence_raises_with_step():
    c = _corpus()
    model = build_model(tiny_cfg(vocab_size=len(c.vocab)))
    model.emb.data[0, 0] = np.nan
    state = TrainState.fresh(model)
    batch = batch_for_step(windows(c.train, 8), 1, 4, 0)
    with pytest.raises(TrainingDivergenceError) as e:
        train_step(model, state, batch, TrainConfig())
    assert e.value.step == 1


def _param_grads(model, inputs, targets):
    params = model.parameters()
    T.zero_grad(params)
    with T.Tape():
        total, _, _ = lm_loss(model, inputs, targets, training=True)
        T.backward(total)
    return [p.grad.copy() if p.grad is not None else None for p in params]


def test_partial_prediction_masked_targets_get_no_gradient():
    cfg = tiny_cfg(seq_len=16, router_kind="partial_prediction")
    model = build_model(cfg)
    ids = np.random.default_rng(0).integers(0, 11, (2, 17))
    logits = T.Tensor(np.random.default_rng(1).normal(size=(2, 16, 11)), requires_grad=True)
    mask = np.broadcast_to(np.arange(16) >= 3, (2, 16))
    T.backward(T.cross_entropy(logits, ids[:, 1:], mask))
    assert np.all(logits.grad[:, :3] == 0.0) and np.all(logits.grad[:, 3:].any(-1))
    base = _param_grads(model, ids[:, :-1], ids[:, 1:])
    targets = ids[:, 1:].copy()
    targets[:, :3] = (targets[:, :3] + 5) % 11
    for g0, g1 in zip(base, _param_grads(model, ids[:, :-1], targets)):
        assert (g0 is None and g1 is None) or np.array_equal(g0, g1)


def test_evaluate_ppl_identity_and_uniform():
    c = _corpus()
    model = build_model(tiny_cfg(vocab_size=len(c.vocab)))
    loss = evaluate_loss(model, c.valid)
    assert evaluate_ppl(model, c.valid) == pytest.approx(math.exp(loss), rel=1e-15)
    model.emb.data[...] = 0.0
    assert evaluate_ppl(model, c.valid) == pytest.approx(len(c.vocab), rel=1e-9)
    with pytest.raises(ConfigError):
        evaluate_ppl(model, c.valid[:5])


def test_memorizes_short_cycle():
    c = Corpus.from_text("abcd" * 600)
    model = build_model(tiny_cfg(vocab_size=len(c.vocab), seq_len=8, n_sparse=0, arch="gmlp"))
    train(model, c, TrainConfig(steps=300, batch_size=8, lr=1e-2, warmup_updates=20,
                                weight_decay=0.0, log_interval=0))
    assert evaluate_ppl(model, c.valid) < 1.05


def test_metrics_log(tmp_path):
    c = _corpus()
    model = build_model(tiny_cfg(vocab_size=len(c.vocab)))
    train(model, c, TrainConfig(steps=6, batch_size=2, log_interval=3), out_dir=tmp_path)
    lines = (tmp_path / "metrics.log").read_text().splitlines()
    assert len(lines) == 2
    keys = [kv.split("=")[0] for kv in lines[0].split()]
    assert keys == ["step", "loss", "ppl", "lr", "imbalance_ratio", "wall_ms"]
    assert (tmp_path / "checkpoint.smlp").exists()
    assert format_metrics({"a": 1, "b": 0.5}) == "a=1 b=0.5"


def test_train_config_roundtrip():
    t = TrainConfig(betas=(0.8, 0.9))
    assert TrainConfig.from_dict(t.to_dict()) == t
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})

import struct

import numpy as np
import pytest

from smlp.checkpoint import VERSION, decode_records, encode_records, load_checkpoint, save_checkpoint
from smlp.data import Corpus, synthetic_text
from smlp.errors import CheckpointError
from smlp.model import build_model
from smlp.train import TrainConfig, TrainState, train

from conftest import tiny_cfg


@pytest.fixture
def trained(tmp_path):
    c = Corpus.from_text(synthetic_text(3000, 1))
    model = build_model(tiny_cfg(vocab_size=len(c.vocab)))
    tcfg = TrainConfig(steps=5, batch_size=4, log_interval=0, seed=3)
    state, _ = train(model, c, tcfg)
    path = tmp_path / "a.smlp"
    save_checkpoint(path, model, state, c.vocab, tcfg)
    return c, model, state, tcfg, path


def test_header_layout(trained):
    *_, path = trained
    buf = path.read_bytes()
    assert buf[:4] == b"SMLP"
    version, count = struct.unpack_from("<II", buf, 4)
    assert version == VERSION and count == len(decode_records(buf))


def test_encode_decode_records():
    recs = [("x", np.arange(6.0).reshape(2, 3)), ("scalar", np.array(2.5)), ("e", np.zeros(0))]
    back = decode_records(encode_records(recs))
    for (n0, a0), (n1, a1) in zip(recs, back):
        assert n0 == n1 and a0.shape == a1.shape and np.array_equal(a0, a1)


def test_roundtrip_restores_everything(trained, tmp_path):
    c, model, state, tcfg, path = trained
    m2, s2, v2, t2 = load_checkpoint(path)
    for (n, a), (n2, b) in zip(model.named_parameters(), m2.named_parameters()):
        assert n == n2 and np.array_equal(a.data, b.data)
    assert s2.step == state.step and s2.seed == state.seed
    for k in state.m:
        assert np.array_equal(state.m[k], s2.m[k]) and np.array_equal(state.v[k], s2.v[k])
    assert v2.chars == c.vocab.chars and t2 == tcfg and m2.cfg == model.cfg


def test_save_load_save_byte_identical(trained, tmp_path):
    *_, path = trained
    m2, s2, v2, t2 = load_checkpoint(path)
    again = tmp_path / "b.smlp"
    save_checkpoint(again, m2, s2, v2, t2)
    assert again.read_bytes() == path.read_bytes()


def test_resume_is_bitwise(trained, tmp_path):
    c, _, _, _, _ = trained
    tcfg = TrainConfig(steps=12, batch_size=4, log_interval=0, seed=3)
    full = build_model(tiny_cfg(vocab_size=len(c.vocab)))
    _, curve = train(full, c, tcfg)

    part = build_model(tiny_cfg(vocab_size=len(c.vocab)))
    st, head = train(part, c, tcfg, until=7)
    save_checkpoint(tmp_path / "mid.smlp", part, st, c.vocab, tcfg)
    m2, s2, _, t2 = load_checkpoint(tmp_path / "mid.smlp")
    _, tail = train(m2, c, t2, state=s2)
    assert head + tail == curve
    for (_, a), (_, b) in zip(full.named_parameters(), m2.named_parameters()):
        assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("where", ["payload", "crc"])
def test_corruption_detected(trained, where):
    *_, path = trained
    buf = bytearray(path.read_bytes())
    buf[len(buf) // 2 if where == "payload" else -1] ^= 0x01
    path.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_truncation_and_version(trained):
    *_, path = trained
    buf = path.read_bytes()
    path.write_bytes(buf[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(buf[:4] + struct.pack("<I", VERSION + 1) + buf[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + buf[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.smlp")


def test_model_only_checkpoint(tmp_path):
    model = build_model(tiny_cfg(arch="transformer_moe", token_router="hash"))
    save_checkpoint(tmp_path / "m.smlp", model)
    m2, state, vocab, tcfg = load_checkpoint(tmp_path / "m.smlp")
    assert state is None and vocab is None and tcfg is None
    assert m2.n_params() == model.n_params()

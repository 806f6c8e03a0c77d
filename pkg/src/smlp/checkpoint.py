"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SMLP"  u32 version  u32 record_count
    record*: u32 name_len, name (UTF-8), u32 rank, u64 extent * rank,
             f64 payload * prod(extents)
    u32 crc32 over every record byte

Records are written in a fixed order, so saving the same state twice gives
identical files. Text metadata (config JSON, vocabulary) is stored as
records of byte / code-point values.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .data import Vocab
from .errors import CheckpointError
from .model import Model, ModelConfig, build_model
from .train import TrainConfig, TrainState

MAGIC = b"SMLP"
VERSION = 1


def _text_record(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _record_text(a: np.ndarray) -> str:
    return bytes(a.astype(np.uint8).tolist()).decode("utf-8")


def encode_records(records: list[tuple[str, np.ndarray]]) -> bytes:
    body = bytearray()
    for name, arr in records:
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        body += struct.pack("<I", len(nb)) + nb
        body += struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    head = MAGIC + struct.pack("<II", VERSION, len(records))
    return bytes(head + body + struct.pack("<I", zlib.crc32(body)))


def decode_records(buf: bytes) -> list[tuple[str, np.ndarray]]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    body = buf[12:-4]
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted or truncated")
    out = []
    off = 0
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            if off + 8 * size > len(body):
                raise CheckpointError("truncated payload")
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
            out.append((name, arr))
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"malformed record: {e}") from None
    if off != len(body):
        raise CheckpointError("trailing bytes after last record")
    return out


def save_checkpoint(path: str | Path, model: Model, state: TrainState | None = None,
                    vocab: Vocab | None = None, train_cfg: TrainConfig | None = None) -> None:
    recs: list[tuple[str, np.ndarray]] = [("meta/config", _text_record(model.cfg.to_json()))]
    if train_cfg is not None:
        recs.append(("meta/train_config", _text_record(json.dumps(train_cfg.to_dict(), sort_keys=True))))
    if vocab is not None:
        recs.append(("meta/vocab", np.array(vocab.to_codes(), dtype=np.float64).reshape(-1)
                     if vocab.chars else np.zeros(0)))
    named = model.named_parameters()
    recs += [(f"param/{k}", t.data) for k, t in named]
    if state is not None:
        recs.append(("state/step", np.array([state.step], dtype=np.float64)))
        recs.append(("state/seed", np.array([state.seed], dtype=np.float64)))
        recs += [(f"adam_m/{k}", state.m[k]) for k, _ in named]
        recs += [(f"adam_v/{k}", state.v[k]) for k, _ in named]
    data = encode_records(recs)
    Path(path).write_bytes(data)


def load_checkpoint(path: str | Path):
    """Returns (model, state or None, vocab or None, train config or None)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    recs = dict(decode_records(buf))
    if "meta/config" not in recs:
        raise CheckpointError("checkpoint lacks a model config")
    cfg = ModelConfig.from_dict(json.loads(_record_text(recs["meta/config"])))
    model = build_model(cfg)
    params = {k[len("param/"):]: v for k, v in recs.items() if k.startswith("param/")}
    model.load_state(params)
    vocab = Vocab.from_codes(recs["meta/vocab"]) if "meta/vocab" in recs else None
    tcfg = None
    if "meta/train_config" in recs:
        tcfg = TrainConfig.from_dict(json.loads(_record_text(recs["meta/train_config"])))
    state = None
    if "state/step" in recs:
        names = [k for k, _ in model.named_parameters()]
        state = TrainState(int(recs["state/step"][0]),
                           {k: recs[f"adam_m/{k}"].copy() for k in names},
                           {k: recs[f"adam_v/{k}"].copy() for k in names},
                           int(recs["state/seed"][0]))
    return model, state, vocab, tcfg

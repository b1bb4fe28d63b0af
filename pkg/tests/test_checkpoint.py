import json
import struct

import numpy as np
import pytest

from memcomm import checkpoint as ckpt
from memcomm import codec as C


@pytest.fixture
def params():
    cfg = C.CodecConfig(vocab_size=12, n_answers=3, width=8, symbols=4, encoder_steps=1, decoder_steps=1,
                        heads=2, memory=3, importance_width=4, importance_heads=2)
    P = C.init_params(cfg, 0)
    P.round_to_single()
    return P, cfg


def test_roundtrip_is_bitwise(params, tmp_path):
    P, cfg = params
    digest = ckpt.save_checkpoint(P, {"codec": cfg.to_dict()}, tmp_path / "a.ckpt")
    Q, echo = ckpt.load_checkpoint(tmp_path / "a.ckpt")
    assert Q.names() == P.names()
    assert all(np.array_equal(P[n], Q[n]) and P.tag(n) == Q.tag(n) for n in P.names())
    assert echo == {"codec": cfg.to_dict()}
    assert digest == ckpt.file_hash(tmp_path / "a.ckpt")


def test_save_rounds_to_single_precision(tmp_path):
    from memcomm.numerics import ParameterSet
    P = ParameterSet()
    P.add("w", np.array([0.1, 1 / 3]), "jsc_enc")
    ckpt.save_checkpoint(P, None, tmp_path / "w.ckpt")
    Q, _ = ckpt.load_checkpoint(tmp_path / "w.ckpt")
    assert np.array_equal(Q["w"], np.array([0.1, 1 / 3], dtype=np.float32).astype(np.float64))


def test_truncated_file_is_corrupt(params, tmp_path):
    P, _ = params
    path = tmp_path / "t.ckpt"
    ckpt.save_checkpoint(P, {}, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(ckpt.CheckpointError, match="hash"):
        ckpt.load_checkpoint(path)
    flipped = bytearray(raw)
    flipped[-1] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.load_checkpoint(path)


def test_version_mismatch(params, tmp_path):
    P, _ = params
    raw = ckpt.checkpoint_bytes(P, {})
    (n,) = struct.unpack_from("<I", raw, 8)
    manifest = json.loads(raw[12:12 + n])
    manifest["version"] = 99
    head = json.dumps(manifest).encode()
    (tmp_path / "v.ckpt").write_bytes(raw[:8] + struct.pack("<I", len(head)) + head + raw[12 + n:])
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.load_checkpoint(tmp_path / "v.ckpt")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ckpt.load_checkpoint(tmp_path / "none.ckpt")

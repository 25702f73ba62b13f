import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sliderlab.adapters import GSTLORA, STLORA, init_adapter
from sliderlab.archive import MAGIC, ArchiveError, decode_archive, encode_archive, read_archive, write_archive
from sliderlab.checkpoint import CheckpointError, checkpoint_meta, load_checkpoint, save_checkpoint
from sliderlab.mmdit import EditorModel, ModelConfig


def test_layout_bytes():
    buf = encode_archive({"a": np.array([1.0, 2.0])}, {"k": 1})
    assert buf[:5] == MAGIC
    (hlen,) = struct.unpack("<I", buf[5:9])
    assert buf[9 + hlen:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_roundtrip_and_determinism(tmp_path):
    t = {"w": np.arange(6.0).reshape(2, 3), "s": np.array(3.5), "e": np.zeros((0, 2))}
    write_archive(tmp_path / "a.sled", t, {"x": [1, 2]})
    got, meta = read_archive(tmp_path / "a.sled")
    assert meta == {"x": [1, 2]}
    for k in t:
        assert got[k].shape == t[k].shape and np.array_equal(got[k], t[k])
    assert encode_archive(t, {"x": [1, 2]}) == (tmp_path / "a.sled").read_bytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 3)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_roundtrip_property(a):
    got, _ = decode_archive(encode_archive({"a": a, "b": a[::-1]}))
    assert np.array_equal(got["a"], a) and np.array_equal(got["b"], a[::-1])


def test_errors():
    good = encode_archive({"a": np.ones(4)})
    with pytest.raises(ArchiveError):
        decode_archive(b"XXXX" + good[4:])
    with pytest.raises(ArchiveError):
        decode_archive(b"SLED2" + good[5:])
    with pytest.raises(ArchiveError):
        decode_archive(good[:-8])
    with pytest.raises(ArchiveError):
        encode_archive({"": np.ones(1)})


def test_overlap_and_duplicates_rejected():
    import json
    for entries in ([{"name": "a", "shape": [2], "offset": 0}, {"name": "b", "shape": [2], "offset": 8}],
                    [{"name": "a", "shape": [1], "offset": 0}, {"name": "a", "shape": [1], "offset": 8}]):
        header = json.dumps({"version": 1, "entries": entries, "meta": {}}).encode()
        buf = MAGIC + struct.pack("<I", len(header)) + header + bytes(32)
        with pytest.raises(ArchiveError):
            decode_archive(buf)


def test_no_overwrite_without_force(tmp_path):
    write_archive(tmp_path / "a.sled", {"a": np.ones(1)})
    with pytest.raises(FileExistsError):
        write_archive(tmp_path / "a.sled", {"a": np.ones(1)}, force=False)


def test_model_checkpoint_roundtrip(tmp_path, world):
    cfg = ModelConfig(d=8, L=2, heads=2, vocab=world.spec.vocab_size, seed=3)
    m = EditorModel(cfg)
    save_checkpoint(m, tmp_path / "m.sled", extra={"note": "x"})
    m2 = load_checkpoint(tmp_path / "m.sled", expect="model")
    assert m2.config == cfg
    for k, v in m.state_dict().items():
        assert np.array_equal(v, m2.state_dict()[k])
    rng = np.random.default_rng(0)
    z, x = rng.standard_normal((2, 1, 64, 3))
    ids = np.zeros((1, cfg.T), dtype=np.int64)
    assert np.array_equal(m.forward(z, x, ids, 0.3).data, m2.forward(z, x, ids, 0.3).data)
    assert checkpoint_meta(tmp_path / "m.sled")["extra"] == {"note": "x"}


def test_adapter_checkpoint(tmp_path):
    cfg = ModelConfig()
    a = init_adapter(cfg, STLORA, seed=1)
    save_checkpoint(a, tmp_path / "a.sled", config=cfg)
    tensors, meta = read_archive(tmp_path / "a.sled")
    assert len(tensors) == 2 * 4 * 6 and meta["mode"] == STLORA and meta["rank"] == 16
    b = load_checkpoint(tmp_path / "a.sled", expect="adapter")
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), b.parameters()))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.sled", expect="model")
    with pytest.raises(ValueError):
        save_checkpoint(init_adapter(cfg, GSTLORA), tmp_path / "b.sled")


def test_unknown_tensor_names(tmp_path):
    cfg = ModelConfig(d=8, L=1, heads=2)
    state = EditorModel(cfg).state_dict()
    state["bogus"] = np.ones(1)
    write_archive(tmp_path / "m.sled", state, {"kind": "model", "config": cfg.to_dict()})
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.sled")

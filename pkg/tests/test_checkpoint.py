import json
import struct

import numpy as np
import pytest

from icoformer.cache import cached_attention_tables, entry_path, tables_provider
from icoformer.checkpoint import (MAGIC, CheckpointError, load_arrays, load_checkpoint, read_checkpoint_config,
                                  save_arrays, save_checkpoint)
from icoformer.model import ModelConfig, SphereUNet
from icoformer.sphere import icosphere

CFG = ModelConfig(rank=4, num_stages=2)


@pytest.fixture(scope="module")
def model():
    return SphereUNet(CFG, seed=3)


def test_array_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5),
              "i": np.arange(7, dtype=np.int64), "m": rng.random((2, 2)) > 0.5,
              "empty": np.zeros((0, 3), np.float32), "nan": np.array([np.nan, -0.0, np.inf], np.float32)}
    save_arrays(tmp_path / "x.sufm", arrays, {"note": "hi"})
    back, meta = load_arrays(tmp_path / "x.sufm")
    assert meta == {"note": "hi"} and list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def test_big_endian_input_stored_little_endian(tmp_path):
    a = np.arange(4, dtype=">f4")
    save_arrays(tmp_path / "x.sufm", {"a": a})
    back, _ = load_arrays(tmp_path / "x.sufm")
    assert back["a"].dtype.str == "<f4"
    np.testing.assert_array_equal(back["a"], a)


def test_rejects_bad_files(tmp_path):
    p = tmp_path / "x.sufm"
    p.write_bytes(b"NOTIT" + b"\0" * 20)
    with pytest.raises(CheckpointError):
        load_arrays(p)
    save_arrays(p, {"a": np.ones(3, np.float32)})
    good = p.read_bytes()
    p.write_bytes(good + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_arrays(p)
    p.write_bytes(good[:-2])
    with pytest.raises(CheckpointError):
        load_arrays(p)
    manifest = json.dumps({"tensors": [{"name": "a", "dtype": "<f4", "shape": [1], "offset": 0, "nbytes": 4}] * 2,
                           "meta": {}}).encode()
    p.write_bytes(MAGIC + struct.pack("<I", len(manifest)) + manifest + b"\0" * 8)
    with pytest.raises(CheckpointError, match="duplicate"):
        load_arrays(p)
    with pytest.raises(CheckpointError):
        save_arrays(p, {"c": np.ones(2, np.complex64)})


def test_checkpoint_roundtrip_bit_exact(tmp_path, model):
    save_checkpoint(model, tmp_path / "m.sufm")
    back = load_checkpoint(tmp_path / "m.sufm")
    assert back.cfg == CFG
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    x = np.random.default_rng(0).random((model.num_input_nodes, 3))
    np.testing.assert_array_equal(model.predict(x), back.predict(x))
    assert read_checkpoint_config(tmp_path / "m.sufm") == CFG


def test_checkpoint_loads_at_other_rank(tmp_path, model):
    save_checkpoint(model, tmp_path / "m.sufm")
    m5 = load_checkpoint(tmp_path / "m.sufm", CFG.with_rank(5))
    assert m5.cfg.rank == 5
    out = m5.predict(np.random.default_rng(0).random((m5.num_input_nodes, 3)))
    assert out.shape == (10242, 1) and np.all(np.isfinite(out))


def test_checkpoint_config_mismatch(tmp_path, model):
    save_checkpoint(model, tmp_path / "m.sufm")
    with pytest.raises(CheckpointError, match="out_channels"):
        load_checkpoint(tmp_path / "m.sufm", ModelConfig(rank=4, num_stages=2, out_channels=6))


def test_checkpoint_renamed_parameter(tmp_path, model):
    arrays = {k: v.astype("<f4") for k, v in model.state_dict().items()}
    first = next(iter(arrays))
    arrays["renamed." + first] = arrays.pop(first)
    save_arrays(tmp_path / "m.sufm", arrays, {"kind": "checkpoint", "config": CFG.to_dict()})
    with pytest.raises(CheckpointError, match="renamed"):
        load_checkpoint(tmp_path / "m.sufm")
    save_arrays(tmp_path / "t.sufm", {"a": np.ones(1, np.float32)}, {"kind": "tables"})
    with pytest.raises(CheckpointError, match="not a model"):
        load_checkpoint(tmp_path / "t.sufm")


def test_table_cache(tmp_path, caplog):
    g = icosphere(3)
    first = cached_attention_tables(g, "hex", 2, cache_dir=tmp_path)
    path = entry_path(tmp_path, 3, "hex", 2)
    assert path.exists()
    second = cached_attention_tables(g, "hex", 2, cache_dir=tmp_path)
    np.testing.assert_array_equal(first.neighbors.indices, second.neighbors.indices)
    np.testing.assert_array_equal(first.relpos.normalized, second.relpos.normalized)
    # corrupt one byte of the blob: the hash check forces a rebuild
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    path.write_bytes(bytes(data))
    with caplog.at_level("WARNING"):
        third = cached_attention_tables(g, "hex", 2, cache_dir=tmp_path)
    assert "rebuilding" in caplog.text
    np.testing.assert_array_equal(third.relpos.raw, first.relpos.raw)
    _, meta = load_arrays(path)
    assert meta["rank"] == 3 and len(meta["sha256"]) == 64


def test_cache_env_var_and_model(tmp_path, monkeypatch):
    monkeypatch.setenv("SUFM_CACHE_DIR", str(tmp_path))
    m = SphereUNet(CFG, seed=3, tables_provider=tables_provider())
    assert len(list(tmp_path.glob("*.sufm"))) == len(m.levels)
    x = np.random.default_rng(0).random((m.num_input_nodes, 3))
    np.testing.assert_array_equal(m.predict(x), SphereUNet(CFG, seed=3).predict(x))

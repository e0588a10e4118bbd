import numpy as np
import pytest

from readrec.config import build_config, load_config
from readrec.errors import ArtifactError, ConfigError
from readrec.fileio import atomic_write_bytes, digest_arrays, pack_container, unpack_container

MAGIC = b"TESTMAG\x00"


def test_defaults():
    cfg = build_config()
    assert cfg.retrieval.k == 10 and cfg.retrieval.lam == 1.0
    assert cfg.fusion.rho == 0.01 and cfg.eval.seeds == [0, 1, 2]
    assert cfg.dataset.min_count == 5 and cfg.dataset.max_seq_len == 50


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="depth"):
        build_config({"backbone": {"depth": 3}})


def test_dotted_overrides_and_validation():
    cfg = build_config({}, {"fusion.rho": 0.1, "retrieval.attention": "cosine"})
    assert cfg.fusion.rho == 0.1 and cfg.retrieval.attention == "cosine"
    with pytest.raises(ConfigError):
        build_config({}, {"fusion.rho": 0.0})
    with pytest.raises(ConfigError):
        build_config({}, {"eval.seeds": [1, 1]})
    with pytest.raises(ConfigError, match="divisible"):
        build_config({"backbone": {"dim": 10, "n_heads": 3}})


def test_relative_paths_resolve_against_file(tmp_path):
    (tmp_path / "c.yaml").write_text("dataset:\n  path: data/log.tsv\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.dataset.path == str(tmp_path / "data" / "log.tsv")
    assert cfg.artifact_dir == str(tmp_path / "artifacts")


def test_yaml_roundtrip(tmp_path):
    cfg = build_config({"retrieval": {"k": 3}})
    (tmp_path / "r.yaml").write_text(cfg.to_yaml())
    assert load_config(tmp_path / "r.yaml").retrieval.k == 3


def test_bad_yaml(tmp_path):
    (tmp_path / "x.yaml").write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "x.yaml")
    (tmp_path / "y.yaml").write_text("- 1\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(tmp_path / "y.yaml")


def test_container_roundtrip():
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, -2], dtype=np.int64)}
    header, back = unpack_container(pack_container(MAGIC, {"x": 1}, arrays), MAGIC)
    assert header == {"x": 1}
    for name in arrays:
        assert back[name].dtype == arrays[name].dtype and np.array_equal(back[name], arrays[name])


def test_container_corruption_detected():
    blob = pack_container(MAGIC, {}, {"a": np.ones(4)})
    with pytest.raises(ArtifactError, match="truncated|checksum"):
        unpack_container(blob[:-3], MAGIC)
    flipped = bytearray(blob)
    flipped[20] ^= 1
    with pytest.raises(ArtifactError, match="checksum"):
        unpack_container(bytes(flipped), MAGIC)
    with pytest.raises(ArtifactError, match="magic"):
        unpack_container(blob, b"OTHERMG\x00")


def test_digest_depends_on_dtype_and_shape():
    a = np.zeros(4, dtype=np.float32)
    assert digest_arrays({"a": a}) != digest_arrays({"a": a.astype(np.float64)})
    assert digest_arrays({"a": a}) != digest_arrays({"a": a.reshape(2, 2)})
    assert digest_arrays({"a": a, "b": a}) == digest_arrays({"b": a, "a": a})


def test_atomic_write_leaves_no_temp_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "out.bin"
    atomic_write_bytes(target, b"old")

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr("os.replace", boom)
    with pytest.raises(OSError):
        atomic_write_bytes(target, b"new")
    assert target.read_bytes() == b"old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]

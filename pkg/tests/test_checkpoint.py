"""Checkpoint persistence: round trips, manifests, corruption handling."""

import json

import numpy as np
import pytest

from imfa.checkpoint import load_checkpoint, save_checkpoint
from imfa.errors import DataError, DatasetIOError
from imfa.params import Params


def sample_params():
    params = Params()
    rng = np.random.default_rng(0)
    params.add("backbone.embed.w", rng.standard_normal((4, 3)).astype(np.float32))
    params.add("head.cls.b", rng.standard_normal(5).astype(np.float32))
    params.add("scalar", np.float32(2.5).reshape(()))
    return params


def test_round_trip_exact(tmp_path):
    stem = str(tmp_path / "ck")
    params = sample_params()
    save_checkpoint(stem, params, {"d": 16, "variant": "imfa"})
    back, config, manifest = load_checkpoint(stem)
    assert config == {"d": 16, "variant": "imfa"}
    assert list(back.names()) == list(params.names())
    for name in params.names():
        assert back[name].tobytes() == params[name].tobytes()
        assert back[name].shape == params[name].shape


def test_save_twice_byte_identical(tmp_path):
    s1, s2 = str(tmp_path / "a"), str(tmp_path / "b")
    params = sample_params()
    save_checkpoint(s1, params, {"d": 16})
    save_checkpoint(s2, params, {"d": 16})
    for ext in (".bin", ".json"):
        with open(s1 + ext, "rb") as f1, open(s2 + ext, "rb") as f2:
            assert f1.read() == f2.read()


def test_manifest_lists_every_parameter(tmp_path):
    stem = str(tmp_path / "ck")
    save_checkpoint(stem, sample_params(), {})
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    names = [e["name"] for e in manifest["params"]]
    assert names == ["backbone.embed.w", "head.cls.b", "scalar"]


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetIOError):
        load_checkpoint(str(tmp_path / "absent"))


def test_bad_magic(tmp_path):
    stem = str(tmp_path / "ck")
    with open(stem + ".json", "w") as fh:
        json.dump({"magic": "other", "params": []}, fh)
    with open(stem + ".bin", "wb") as fh:
        fh.write(b"")
    with pytest.raises(DataError):
        load_checkpoint(stem)


def test_truncated_blob(tmp_path):
    stem = str(tmp_path / "ck")
    save_checkpoint(stem, sample_params(), {})
    with open(stem + ".bin", "rb") as fh:
        raw = fh.read()
    with open(stem + ".bin", "wb") as fh:
        fh.write(raw[:-4])
    with pytest.raises(DataError) as e:
        load_checkpoint(stem)
    assert "truncated" in str(e.value)


def test_malformed_manifest_json(tmp_path):
    stem = str(tmp_path / "ck")
    with open(stem + ".json", "w") as fh:
        fh.write("{broken")
    with pytest.raises(DataError):
        load_checkpoint(stem)

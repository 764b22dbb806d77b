import json

import numpy as np
import pytest
import torch

from equinv.backbone import Backbone
from equinv.checkpoint import (
    FORMAT_VERSION, encoder_state_arrays, encoder_state_from_arrays, load_checkpoint, load_into,
    save_checkpoint, save_module,
)
from equinv.errors import CorruptCheckpoint, InvalidArgument, UnsupportedVersion
from equinv.invariant import EncoderState


def test_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b.c": np.float32([np.inf, -0.0, 1e-38]),
              "scalar": np.float32(2.5)}
    save_checkpoint(arrays, tmp_path / "ck", config={"x": 1}, meta={"tau": 0.5})
    back, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["format_version"] == FORMAT_VERSION and manifest["meta"]["tau"] == 0.5
    for k, v in arrays.items():
        assert back[k].shape == np.shape(v)
        assert back[k].tobytes() == np.asarray(v).tobytes()


def test_module_roundtrip(tmp_path):
    torch.manual_seed(0)
    bb = Backbone("small")
    save_module(bb, tmp_path / "ck", prefix="query.")
    arrays, _ = load_checkpoint(tmp_path / "ck")
    torch.manual_seed(1)
    other = load_into(Backbone("small"), arrays, "query.")
    for (k, a), b in zip(bb.state_dict().items(), other.state_dict().values()):
        assert torch.equal(a, b), k


def test_encoder_state_roundtrip(tmp_path):
    torch.manual_seed(0)
    q, k = Backbone("small"), Backbone("small")
    st = EncoderState.from_modules(q, k, torch.randn(8, 128), 0.99, 0.07)
    save_checkpoint(encoder_state_arrays(st), tmp_path / "ck")
    arrays, _ = load_checkpoint(tmp_path / "ck")
    st2 = encoder_state_from_arrays(arrays, 0.99, 0.07)
    assert torch.equal(st2.queue, st.queue)
    for name, v in st.key_params.items():
        assert torch.equal(st2.key_params[name], v.float())


def test_load_into_missing_key(tmp_path):
    with pytest.raises(InvalidArgument):
        load_into(Backbone("small"), {}, "query.")


def test_truncated_blob(tmp_path):
    root = save_checkpoint({"w": np.ones((4, 4), np.float32)}, tmp_path / "ck")
    blob = root / "arrays" / "w.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(root)


def test_missing_or_garbled_manifest(tmp_path):
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path)


def test_future_version(tmp_path):
    root = save_checkpoint({"w": np.zeros(2, np.float32)}, tmp_path / "ck")
    man = json.loads((root / "manifest.json").read_text())
    man["format_version"] = "99"
    (root / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(UnsupportedVersion):
        load_checkpoint(root)

import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vqmdvae.checkpoint import load_checkpoint, make_checkpoint, parameter_hash, save_checkpoint
from vqmdvae.container import MAGIC, decode_tensor, encode_tensor
from vqmdvae.errors import (ContainerError, ManifestMismatchError, MissingTensorError, TruncatedTensorError,
                            UnrecognizedContainerError)
from vqmdvae.mdvae import MDVAE, ModelConfig


@given(arrays(np.float32, st.lists(st.integers(0, 5), min_size=0, max_size=4).map(tuple),
              elements=st.floats(width=32, allow_nan=False)))
@settings(max_examples=60, deadline=None)
def test_tensor_round_trip_bit_exact(arr):
    blob = encode_tensor(arr)
    back = decode_tensor(blob)
    assert back.shape == arr.shape
    assert back.tobytes() == np.asarray(arr, order="C").tobytes()


def test_container_layout():
    blob = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert blob[:4] == MAGIC
    assert struct.unpack("<III", blob[4:16]) == (2, 2, 3)
    assert np.frombuffer(blob[16:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_container_errors():
    blob = encode_tensor(np.ones((3, 3), np.float32))
    with pytest.raises(UnrecognizedContainerError):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(TruncatedTensorError):
        decode_tensor(blob[:-4])
    with pytest.raises(TypeError):
        encode_tensor(np.ones(3, dtype=np.float64))


def _ckpt():
    torch.manual_seed(0)
    m = MDVAE(ModelConfig.tiny())
    return m, make_checkpoint("mdvae", m.cfg.to_dict(), m, step=7, metrics=[{"step": 7, "total": 1.5}])


def test_checkpoint_round_trip(tmp_path):
    m, ck = _ckpt()
    save_checkpoint(ck, tmp_path / "a")
    back = load_checkpoint(tmp_path / "a")
    assert back.manifest["step"] == 7 and back.model_type == "mdvae"
    for k, v in ck.tensors.items():
        assert back.tensors[k].tobytes() == v.tobytes()
    m2 = MDVAE(ModelConfig.from_dict(back.config))
    m2.load_state_dict(back.state_dict())
    assert parameter_hash(m2) == parameter_hash(m)
    # save -> load -> save gives byte-identical files
    save_checkpoint(back, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_tensor_named(tmp_path):
    _, ck = _ckpt()
    save_checkpoint(ck, tmp_path)
    victim = sorted(ck.tensors)[0]
    (tmp_path / "tensors" / f"{victim}.ten").unlink()
    with pytest.raises(MissingTensorError, match=victim):
        load_checkpoint(tmp_path)


def test_bad_magic_and_mismatch(tmp_path):
    _, ck = _ckpt()
    save_checkpoint(ck, tmp_path)
    name = sorted(ck.tensors)[0]
    f = tmp_path / "tensors" / f"{name}.ten"
    good = f.read_bytes()
    f.write_bytes(b"ABCD" + good[4:])
    with pytest.raises(UnrecognizedContainerError):
        load_checkpoint(tmp_path)
    f.write_bytes(good)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["tensors"][name]["shape"] = [999]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ManifestMismatchError):
        load_checkpoint(tmp_path)
    with pytest.raises(ContainerError):
        load_checkpoint(tmp_path / "nowhere")


def test_no_temp_files_left(tmp_path):
    _, ck = _ckpt()
    save_checkpoint(ck, tmp_path)
    assert not [p for p in tmp_path.rglob("*") if p.name.endswith(".tmp")]

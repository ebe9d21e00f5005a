import json

import numpy as np
import pytest

from pancdet.checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, read_manifest, save_checkpoint
from pancdet.model import Detector, init_params


@pytest.fixture
def model(tiny_cfg):
    return Detector(tiny_cfg, init_params(tiny_cfg, 4))


def test_round_trip_bit_exact(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "m.ckpt", iteration=12)
    back, manifest = load_checkpoint(path)
    assert back.cfg == model.cfg
    assert list(back.params) == list(model.params)
    for k, p in model.params.items():
        assert back.params[k].data.tobytes() == p.data.tobytes()
    assert manifest["iteration"] == 12


def test_save_load_save_identical_bytes(tmp_path, model):
    first = save_checkpoint(model, tmp_path / "a.ckpt", 3)
    back, _ = load_checkpoint(first)
    second = save_checkpoint(back, tmp_path / "b.ckpt", 3)
    assert first.read_bytes() == second.read_bytes()


def test_truncated_file_rejected(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "t.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw[:20])
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(path)


def test_flipped_payload_byte_rejected(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "f.ckpt")
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_topology_mismatch_reports_both_hashes(tmp_path, model, tiny_cfg):
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    other = tiny_cfg.replace(head_hidden=32)
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(path, other)
    msg = str(info.value)
    assert tiny_cfg.topology_hash() in msg and other.topology_hash() in msg


def test_non_topology_change_loads(tmp_path, model, tiny_cfg):
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    load_checkpoint(path, tiny_cfg.replace(iterations=99, seed=5))


def test_manifest_contents(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "m.ckpt", 7)
    manifest, payload = read_manifest(path)
    assert manifest["iteration"] == 7
    assert manifest["topology_hash"] == model.cfg.topology_hash()
    assert manifest["payload_bytes"] == len(payload) == sum(p.data.nbytes for p in model.params.values())
    first_line = path.read_bytes().split(b"\n", 1)[0]
    assert json.loads(first_line)["format"] == manifest["format"]


def test_bytes_depend_only_on_weights(model, tiny_cfg):
    twin = Detector(tiny_cfg, init_params(tiny_cfg, 4))
    assert checkpoint_bytes(model, 1) == checkpoint_bytes(twin, 1)
    twin.params["head.score.out.b"].data[0] += 1e-300
    assert checkpoint_bytes(model, 1) != checkpoint_bytes(twin, 1)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(CheckpointError, match="not a"):
        load_checkpoint(p)


def test_loaded_model_predicts_identically(tmp_path, model, rng):
    image = rng.uniform(size=(64, 64))
    back, _ = load_checkpoint(save_checkpoint(model, tmp_path / "m.ckpt"))
    a = model.detect(image)
    b = back.detect(image)
    assert [(d.box, d.score) for d in a] == [(d.box, d.score) for d in b]
    assert np.all(np.isfinite([d.score for d in a]))

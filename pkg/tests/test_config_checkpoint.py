import numpy as np
import pytest

from hlora_lab import checkpoint
from hlora_lab.checkpoint import CheckpointError
from hlora_lab.config import CONFIG_FORMAT, ConfigError, RunConfig, dump_config, from_dict, load_config
from hlora_lab.model import UnifiedModel


def test_defaults_materialized_and_roundtrip(tmp_path):
    rc = from_dict({"seed": 3, "model": {"vision": {"patch_size": 4}}, "plan": {"steps": {"1c": 5}}})
    assert rc.seed == 3 and rc.model.vision.patch_size == 4
    assert rc.model.vision.d_vis == RunConfig().model.vision.d_vis
    assert rc.plan.steps["3g"] == RunConfig().plan.steps["3g"] and rc.plan.steps["1c"] == 5
    text = dump_config(rc)
    assert text.startswith(f"format: {CONFIG_FORMAT}")
    path = tmp_path / "c.yaml"
    path.write_text(text)
    again = load_config(path)
    assert again == rc and dump_config(again) == text


@pytest.mark.parametrize(
    "bad",
    [
        {"nope": 1},
        {"model": {"vision": {"patchsize": 3}}},
        {"plan": {"steps": {"4": 10}}},
        {"format": "other/9"},
        {"model": {"heads": 5}},
        {"model": "x"},
    ],
)
def test_bad_configs_rejected(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_hash_tracks_model_only():
    a = RunConfig()
    b = from_dict({"seed": 9, "plan": {"batch_size": 4}})
    c = from_dict({"model": {"d_model": 32}})
    assert a.model_hash() == b.model_hash() != c.model_hash()


def test_checkpoint_byte_identical(tmp_path, model, rng):
    state = model.state_dict()
    blob = checkpoint.dumps(state, "abc", ["1c", "1g"])
    loaded, h, stages = checkpoint.loads(blob)
    assert h == "abc" and stages == ["1c", "1g"]
    assert checkpoint.dumps(loaded, h, stages) == blob
    assert blob.startswith(b"HLORA-CKPT 1\n")
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, loaded, h, stages)
    other = UnifiedModel(model.cfg, model.codec, 0, pretrained=False)
    other.load_state_dict(checkpoint.load(path, "abc")[0])
    assert checkpoint.dumps(other.state_dict(), h, stages) == blob


def test_checkpoint_validation(tmp_path):
    state = {"a": np.arange(6, dtype=np.float64).reshape(2, 3), "s": np.array(2.5)}
    blob = checkpoint.dumps(state, "h", [])
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob[:-4])
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob + b"\0\0\0\0")
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob.replace(b"HLORA-CKPT 1", b"HLORA-CKPT 7"))
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob.replace(b"a 2,3 0 6", b"a 2,2 0 6"))
    with pytest.raises(CheckpointError):
        checkpoint.dumps({"bad name": np.zeros(1)}, "h", [])
    path = tmp_path / "c.ckpt"
    path.write_bytes(blob)
    with pytest.raises(CheckpointError, match="--force"):
        checkpoint.load(path, "other")
    assert checkpoint.load(path, "other", force=True)[1] == "h"
    assert checkpoint.loads(blob)[0]["s"].shape == ()

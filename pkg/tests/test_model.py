import json

import numpy as np
import pytest

from iotfp.embedding import TrainingConfig
from iotfp.harness import BurstSchedule, generate_synthetic_background, generate_synthetic_device
from iotfp.model import (DeviceFingerprintModel, ModelFileError, ModelParams, StageError,
                         train_device_model)
from iotfp.trace import Trace

S = 1_000_000


def test_save_load_round_trip(small_scenario, tmp_path):
    model = small_scenario.models["plug-a"]
    model.save(tmp_path / "m.json")
    again = DeviceFingerprintModel.load(tmp_path / "m.json")
    again.save(tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    assert again.key_packets == model.key_packets
    assert again.qtree.to_nodes() == model.qtree.to_nodes()
    np.testing.assert_array_equal(again.quantized_lookup(), model.quantized_lookup())


def test_model_invariants(small_scenario):
    for model in small_scenario.models.values():
        assert model.tree.n_leaves <= 500 and model.qtree.n_leaves <= 500
        assert model.tree.n_features == len(model.key_packets) == model.qtree.n_features
        assert model.shortfall == (len(model.key_packets) < 16)
        assert all(p in model.matrix for p in model.key_packets)


def test_summary_lines(small_scenario):
    s = small_scenario.summaries["cam-b"]
    lines = s.lines()
    assert lines[0].startswith("device=cam-b vocab=")
    assert [l.split(":")[0].strip() for l in lines[1:]] == ["train", "val", "test"]
    assert sum(len(p) for p in s.split) == s.n_windows


def test_corrupted_model_file(tmp_path, small_scenario):
    path = tmp_path / "m.json"
    path.write_text("{not json")
    with pytest.raises(ModelFileError):
        DeviceFingerprintModel.load(path)
    doc = small_scenario.models["plug-a"].to_dict()
    del doc["matrix"]
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelFileError):
        DeviceFingerprintModel.load(path)
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ModelFileError):
        DeviceFingerprintModel.load(path)


def test_training_is_byte_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    dev = generate_synthetic_device([BurstSchedule((300, 1800), 5 * S)], 300 * S, rng, "d")
    bg = generate_synthetic_background(50.0, 300 * S, rng)
    mixed = Trace.from_unsorted(list(dev) + list(bg))
    params = ModelParams(embedding=TrainingConfig(epochs=3))
    for name in ("a", "b"):
        model, _ = train_device_model("d", dev, bg, mixed, params)
        model.save(tmp_path / f"{name}.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_stage_error_names_the_stage():
    rng = np.random.default_rng(0)
    # aperiodic device: no key packets survive
    ts = np.sort(rng.integers(0, 300 * S, size=200))
    from conftest import rec
    dev = Trace([rec(int(t), 300, label="d") for t in ts])
    bg = generate_synthetic_background(20.0, 300 * S, rng)
    with pytest.raises(StageError) as info:
        train_device_model("d", dev, bg, Trace.from_unsorted(list(dev) + list(bg)),
                           ModelParams(embedding=TrainingConfig(epochs=1)))
    assert info.value.stage == "key_packets"
    with pytest.raises(StageError) as info:
        train_device_model("d", Trace(), bg, bg)
    assert info.value.stage == "embedding"

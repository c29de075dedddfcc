import json
import math

import numpy as np
import pytest

from gatedwindow import storage
from gatedwindow.config import derive_seed, load_config, parse_config, preset, preset_dict
from gatedwindow.training import ConfigError, TaskConfig, generate_task, init_model


def test_presets_parse_and_round_trip():
    for name in ("desk", "full"):
        cfg = preset(name)
        again = parse_config(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg
    full = preset("full")
    assert (full.n_train, full.n_diagnostic, full.H, full.task.T) == (8000, 8000, 128, 1024)
    desk = preset("desk")
    assert desk.lags().tolist() == list(range(1, 33))


def test_unknown_fields_are_named():
    d = preset_dict("desk")
    d["train"]["learning_rte"] = 0.1
    with pytest.raises(ConfigError, match="train.learning_rte"):
        parse_config(d)
    d = preset_dict("desk")
    d["colour"] = "blue"
    with pytest.raises(ConfigError, match="colour"):
        parse_config(d)
    d = preset_dict("desk")
    del d["H"]
    with pytest.raises(ConfigError, match="H"):
        parse_config(d)


def test_max_lag_beyond_sequence_rejected():
    d = preset_dict("desk")
    d["lag_grid"]["max"] = 128
    with pytest.raises(ConfigError, match="lag_grid"):
        parse_config(d)
    d = preset_dict("desk")
    d["task"]["lags"] = [4, 8, 128]
    with pytest.raises(ConfigError):
        parse_config(d)


@pytest.mark.parametrize("field, value", [
    ("n_diagnostic", 50), ("budgets", [100, 10]), ("H", 2.5), ("order", "second"), ("cells", ["RNN"]),
])
def test_invalid_values_rejected(field, value):
    d = preset_dict("desk")
    d[field] = value
    with pytest.raises(ConfigError):
        parse_config(d)


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    good = tmp_path / "good.json"
    good.write_text(json.dumps(preset_dict("desk")))
    assert load_config(good) == preset("desk")


def test_seed_streams_are_named_and_stable():
    a = derive_seed(7, "data.train")
    assert a == derive_seed(7, "data.train")
    assert len({a, derive_seed(7, "data.diagnostic"), derive_seed(8, "data.train")}) == 3
    assert 0 <= a < 2 ** 64


def test_seed_override_rederives_task_direction():
    cfg = preset("desk")
    other = cfg.with_overrides(seed=5)
    assert other.seeds.master == 5 and other.task.u != cfg.task.u
    assert cfg.with_overrides(order="zeroth_only").order == "zeroth_only"


def test_dataset_round_trip(tmp_path):
    data = generate_task(TaskConfig(D=3, T=9, lags=(2,), coefficients=(1.0,)), 4, 0)
    path = tmp_path / "d.gwds"
    storage.write_dataset(path, data)
    back = storage.read_dataset(path)
    assert np.array_equal(back.inputs, data.inputs) and np.array_equal(back.targets, data.targets)
    assert np.array_equal(back.mask, data.mask)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(storage.FormatError):
        storage.read_dataset(path)


@pytest.mark.parametrize("kind", ["ConstGate", "LSTM"])
def test_checkpoint_round_trip(tmp_path, kind):
    m = init_model(kind, 3, 4, 2)
    path = tmp_path / "m.gwck"
    storage.write_checkpoint(path, m)
    back = storage.read_checkpoint(path)
    assert back.kind == m.kind and np.array_equal(back.flatten(), m.flatten())
    bad = tmp_path / "bad.gwck"
    bad.write_bytes(b"nope")
    with pytest.raises(storage.FormatError):
        storage.read_checkpoint(bad)


def test_csv_is_lossless(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.standard_normal(50) * 10.0 ** rng.integers(-300, 300, 50)
    path = tmp_path / "t.csv"
    storage.write_csv(path, ["i", "x"], [(i, v) for i, v in enumerate(vals)] + [(50, math.inf), (51, True)])
    rows = storage.read_csv(path)
    assert [float(r["x"]) for r in rows[:50]] == vals.tolist()
    assert rows[50]["x"] == "inf" and rows[51]["x"] == "1"


def test_json_nonfinite_and_manifest(tmp_path):
    storage.write_json(tmp_path / "a.json", {"x": math.inf, "y": np.float64(0.1), "z": np.arange(2)})
    doc = storage.read_json(tmp_path / "a.json")
    assert storage.as_float(doc["x"]) == math.inf and doc["y"] == 0.1 and doc["z"] == [0, 1]
    (tmp_path / "f.bin").write_bytes(b"abc")
    storage.write_manifest(tmp_path / "m1.json", {"f": tmp_path / "f.bin"})
    storage.write_manifest(tmp_path / "m2.json", {"f": tmp_path / "f.bin"})
    assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    assert storage.read_json(tmp_path / "m1.json")["files"]["f"]["sha256"].startswith("ba7816bf")

import struct

import numpy as np
import pytest

from fenode.data import Normalizer, TrajectoryDataset
from fenode.encoder import Coefficients, init_model, predict_delta
from fenode.errors import ConfigError, CorruptFileError, VersionMismatchError
from fenode.io import (load_dataset, load_model, model_from_bytes, model_to_bytes, read_csv, save_dataset,
                       save_model, write_csv)
from fenode.systems import ConstantFamilyField, GenConfig, generate_datasets, make_family
from fenode.training import Arch, TrainConfig, train_residuals


def _model(mode="fe_node_residuals", k=3, seed=0):
    norm = Normalizer([0.1, -0.2], [1.5, 0.7], [0.3], [2.0], input_gain=[2.0, 0.5])
    m = init_model(mode, 2, 1, k, (6, 5), norm, seed=seed, volume=123.0)
    m.config = {"arch": {"k": k, "mode": mode}, "note": "x"}
    return m


@pytest.mark.parametrize("mode", ["fe_node", "fe_node_residuals", "fe_direct", "node_baseline"])
def test_model_round_trip_is_bit_exact(tmp_path, mode):
    m = _model(mode, k=1 if mode == "node_baseline" else 3)
    p1 = save_model(m, tmp_path / "a.fenode")
    back = load_model(p1)
    assert np.array_equal(back.basis, m.basis)
    assert (back.avg is None) == (m.avg is None)
    if m.avg is not None:
        assert np.array_equal(back.avg, m.avg)
    assert np.array_equal(back.normalizer.input_gain, m.normalizer.input_gain)
    assert back.mode == m.mode and back.k == m.k and back.volume == m.volume and back.config == m.config
    p2 = save_model(back, tmp_path / "b.fenode")
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_model_predicts_identically(tmp_path):
    m = _model()
    back = load_model(save_model(m, tmp_path / "m.fenode"))
    rng = np.random.default_rng(0)
    x, u, dt = rng.normal(size=(100, 2)), rng.normal(size=(100, 1)), rng.uniform(0.01, 0.1, 100)
    c = Coefficients(rng.normal(size=3))
    assert np.array_equal(predict_delta(m, c, x, u, dt), predict_delta(back, c, x, u, dt))


def test_corrupt_files_rejected(tmp_path):
    blob = model_to_bytes(_model())
    with pytest.raises(CorruptFileError):
        model_from_bytes(b"NOTMODEL" + blob[8:])
    for cut in (4, 30, len(blob) - 8):
        with pytest.raises(CorruptFileError):
            model_from_bytes(blob[:cut])
    with pytest.raises(CorruptFileError):
        model_from_bytes(blob + b"\0")
    bumped = blob[:8] + struct.pack("<I", 99) + blob[12:]
    with pytest.raises(VersionMismatchError) as info:
        model_from_bytes(bumped)
    assert info.value.found == 99
    path = tmp_path / "bad.fenode"
    path.write_bytes(blob[:20])
    with pytest.raises(CorruptFileError):
        load_model(path)


def test_dataset_file_is_not_a_model(tmp_path):
    d = generate_datasets(make_family("van_der_pol"), GenConfig(n_datasets=1, steps=20))[0]
    path = save_dataset(d, tmp_path / "d.bin")
    with pytest.raises(CorruptFileError):
        load_model(path)


def test_fixed_average_model_not_saved(tmp_path):
    sets = generate_datasets(make_family("constant_field"), GenConfig(n_datasets=2, steps=10, dt=0.1,
                                                                      param_values=[0.5, -0.5]))
    m = train_residuals(sets, TrainConfig(steps=1, functions_per_update=2, batch_size=5), Arch(k=2, hidden=(4,)),
                        fixed_avg=ConstantFamilyField(0.0))
    with pytest.raises(ConfigError):
        save_model(m, tmp_path / "x.fenode")


@pytest.mark.parametrize("suffix", [".bin", ".csv"])
def test_dataset_round_trip(tmp_path, suffix):
    d = generate_datasets(make_family("quad2d"), GenConfig(n_datasets=1, steps=30, dt=0.05, policy="pd_waypoint",
                                                           dt_jitter=0.2))[0]
    back = load_dataset(save_dataset(d, tmp_path / f"d{suffix}"))
    for name in ("states", "controls", "next_states", "dts"):
        assert np.array_equal(getattr(back, name), getattr(d, name))
    assert back.hidden == d.hidden and back.family == d.family


def test_dataset_without_controls_round_trip(tmp_path):
    d = generate_datasets(make_family("van_der_pol"), GenConfig(n_datasets=1, steps=15))[0]
    for suffix in (".bin", ".csv"):
        back = load_dataset(save_dataset(d, tmp_path / f"d{suffix}"))
        assert back.controls.shape == (14, 0) and np.array_equal(back.states, d.states)


def test_empty_dataset_round_trip(tmp_path):
    d = TrajectoryDataset(np.zeros((0, 2)), np.zeros((0, 0)), np.zeros((0, 2)), np.zeros(0))
    back = load_dataset(save_dataset(d, tmp_path / "e.bin"))
    assert len(back) == 0


def test_csv_provenance_and_float_repr(tmp_path):
    path = write_csv(tmp_path / "r.csv", ["a", "b", "ok"], [{"a": 0.1 + 0.2, "b": 3, "ok": True}], "abc123")
    h, rows = read_csv(path)
    assert h == "abc123"
    assert float(rows[0]["a"]) == 0.1 + 0.2 and rows[0]["b"] == "3" and rows[0]["ok"] == "true"
    (tmp_path / "bare.csv").write_text("a,b\n1,2\n")
    with pytest.raises(CorruptFileError):
        read_csv(tmp_path / "bare.csv")

import json
import os

import numpy as np
import pytest

from errors import ConfigError, PreconditionError
from duhamel import Trajectory
from modes_mz import mz_synthesize
from storage import (
    dumps,
    load_mz_csv,
    load_profile,
    load_spectrum,
    load_trajectory,
    read_columns,
    save_mz_csv,
    save_profile,
    save_spectrum,
    save_trajectory,
    write_columns,
    write_rows,
)


def test_profile_round_trip(sheet, tmp_path):
    path = str(tmp_path / "sheet.csv")
    save_profile(sheet.curve, path)
    assert os.path.exists(str(tmp_path / "sheet.json"))
    loaded = load_profile(path, force_reload=True)
    for name in ("sigma", "p", "q", "theta", "kappa", "H", "xdotN"):
        assert np.allclose(getattr(loaded, name), getattr(sheet.curve, name), rtol=1e-12, atol=0)
    assert loaded.header() == sheet.curve.header()


def test_profile_cache(plane, tmp_path):
    path = str(tmp_path / "plane.csv")
    save_profile(plane, path)
    first = load_profile(path)
    assert load_profile(path) is first
    assert load_profile(path, force_reload=True) is not first


def test_missing_profile(tmp_path):
    with pytest.raises(ConfigError):
        load_profile(str(tmp_path / "nope.csv"))


def test_spectrum_round_trip(plane_spec, tmp_path):
    path = str(tmp_path / "plane.json")
    save_spectrum(plane_spec, path)
    for i in range(plane_spec.modes):
        assert os.path.exists(str(tmp_path / f"plane_mode_{i + 1:02d}.csv"))
    loaded = load_spectrum(path)
    assert loaded.modes == plane_spec.modes
    assert np.allclose(loaded.lambdas, plane_spec.lambdas, rtol=1e-10)
    mode = read_columns(str(tmp_path / "plane_mode_01.csv"))["phi"]
    assert np.array_equal(mode, plane_spec.phi(0))


def test_trajectory_round_trip(plane_spec, tmp_path):
    times = np.array([-1.0, -0.5, 0.0])
    frames = np.exp(times)[:, None] * plane_spec.phi(0)[None, :]
    traj = Trajectory(plane_spec.curve, times, frames, "flow", metadata={"steps": 3})
    save_trajectory(traj, str(tmp_path / "traj"))
    loaded = load_trajectory(str(tmp_path / "traj"))
    assert loaded.provenance == "flow"
    assert loaded.coefficients is None
    assert loaded.metadata == {"steps": 3}
    assert np.array_equal(loaded.times, times)
    assert np.array_equal(loaded.frames, frames)


def test_dumps_is_sorted_and_native():
    text = dumps({"b": np.float64(0.1), "a": np.arange(3), "c": np.bool_(True)})
    assert text == dumps({"c": True, "a": [0, 1, 2], "b": 0.1})
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    assert json.loads(text) == {"a": [0, 1, 2], "b": 0.1, "c": True}


def test_columns_keep_full_precision(tmp_path):
    path = str(tmp_path / "cols.csv")
    values = np.array([1.0 / 3.0, np.pi, 1e-300])
    write_columns(path, {"v": values})
    assert np.array_equal(read_columns(path)["v"], values)


def test_write_rows_uses_repr(tmp_path):
    path = str(tmp_path / "rows.csv")
    write_rows(path, [{"check": "plane", "seconds": 0.1}])
    with open(path, encoding="utf-8") as f:
        assert f.read().splitlines() == ["check,seconds", "plane,0.1"]


def test_mz_csv_round_trip(tmp_path):
    original = mz_synthesize(3, s_min=-1.0)
    path = str(tmp_path / "xyz.csv")
    save_mz_csv(original, path)
    loaded = load_mz_csv(path, original.eps)
    assert np.array_equal(loaded.times, original.times)
    assert np.array_equal(loaded.z, original.z)


def test_mz_csv_accepts_t_column(tmp_path):
    path = str(tmp_path / "xyz.csv")
    write_columns(path, {"t": [0.0, 1.0], "x": [1.0, 1.0], "y": [0.0, 0.0], "z": [0.0, 0.0]})
    assert load_mz_csv(path, 0.01).times.tolist() == [0.0, 1.0]


def test_mz_csv_missing_column(tmp_path):
    path = str(tmp_path / "xy.csv")
    write_columns(path, {"s": [0.0, 1.0], "x": [1.0, 1.0], "y": [0.0, 0.0]})
    with pytest.raises(PreconditionError):
        load_mz_csv(path, 0.01)
    with pytest.raises(ConfigError):
        load_mz_csv(str(tmp_path / "missing.csv"), 0.01)

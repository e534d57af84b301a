import numpy as np
import pytest

from errors import PreconditionError
from duhamel import Trajectory, mode_data, solve_linear
from modes_mz import (
    MZTrajectory,
    ModeTrajectory,
    check_mode_system,
    dominance_dichotomy,
    fit_decay_rate,
    mode_trajectory,
    mz_check,
    mz_empirical_threshold,
    mz_property_suite,
    mz_synthesize,
)


def constant(value, size):
    return np.full(size, float(value))


# ============================================================
# LEMA EDO
# ============================================================

def test_mz_constant_first_branch():
    s = np.linspace(-10.0, 0.0, 101)
    verdict = mz_check(MZTrajectory(s, constant(1, 101), constant(0, 101), constant(0, 101), 0.01))
    assert verdict.hypotheses_ok
    assert verdict.y_bound_ok
    assert verdict.branch == "first"
    assert verdict.s_star == 0.0


def test_mz_growing_z_second_branch():
    s = np.linspace(-1.0, 0.0, 1001)
    verdict = mz_check(MZTrajectory(s, constant(1e-3, 1001), constant(0, 1001), np.exp(s), 0.01))
    assert verdict.hypotheses_ok
    assert verdict.branch == "second"
    assert verdict.c == pytest.approx(1e-3 / (0.01 * np.exp(-1.0)), rel=1e-6)


def test_mz_rejects_bad_y():
    s = np.linspace(-10.0, 0.0, 101)
    verdict = mz_check(MZTrajectory(s, constant(1, 101), constant(1, 101), constant(0, 101), 0.01))
    assert not verdict.hypotheses_ok
    assert verdict.y_bound_ok is None
    assert verdict.branch == "none"
    assert {"y", "liminf"} <= set(verdict.failed)


@pytest.mark.parametrize("x, y, z", [
    ([1.0, -1.0], [0.0, 0.0], [0.0, 0.0]),
    ([0.0, 0.0], [0.0, 0.0], [0.0, 0.0]),
    ([1.0, 1.0, 1.0], [0.0, 0.0], [0.0, 0.0]),
])
def test_mz_input_validation(x, y, z):
    with pytest.raises(PreconditionError):
        MZTrajectory(np.arange(len(y), dtype=float), x, y, z, 0.01)


def test_mz_synthesis_is_deterministic():
    a, b = mz_synthesize(42), mz_synthesize(42)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.z, b.z)
    assert a.y[0] == 0.0


def test_mz_property_on_synthetic_runs():
    summary = mz_property_suite(range(500), 0.01)
    assert summary["hypotheses_ok"] == 500
    assert summary["y_bound_ok"] == 500
    assert summary["branches"]["none"] == 0
    assert summary["branches"]["first"] > 0 and summary["branches"]["second"] > 0


def test_mz_threshold_above_proven_range():
    result = mz_empirical_threshold(range(5))
    eps0 = result["eps0_empirical"]
    assert eps0 is None or eps0 > 0.18


# ============================================================
# MASAS MODALES
# ============================================================

def test_single_unstable_mode_is_all_minus(neck_spec):
    a = np.zeros(neck_spec.index)
    a[0] = 1e-3
    times = np.linspace(-4.0, 0.0, 401)
    traj = solve_linear(neck_spec, mode_data(neck_spec, a, 1.0), times)
    mt = mode_trajectory(traj, neck_spec)
    assert np.allclose(mt.V_minus, 1e-3 * np.exp(-neck_spec.lambdas[0] * times), rtol=1e-10)
    assert not np.any(mt.V_plus)
    assert not np.any(mt.V_zero)
    assert check_mode_system(mt).passed


def test_stable_modes_land_in_plus_bucket(plane_spec):
    times = np.linspace(-2.0, 0.0, 41)
    coeffs = np.zeros((41, plane_spec.modes))
    coeffs[:, 2] = np.exp(-plane_spec.lambdas[2] * times)
    frames = coeffs @ np.array([plane_spec.phi(i) for i in range(plane_spec.modes)])
    mt = mode_trajectory(Trajectory(plane_spec.curve, times, frames, "duhamel", coeffs), plane_spec)
    assert np.allclose(mt.V_plus, coeffs[:, 2])
    assert not np.any(mt.V_minus)
    assert mt.buckets()["plus"].all()


def test_zero_trajectory_cannot_be_fitted(plane_spec):
    times = np.linspace(-1.0, 0.0, 21)
    traj = Trajectory(plane_spec.curve, times, np.zeros((21, plane_spec.curve.size)))
    mt = mode_trajectory(traj, plane_spec)
    assert not np.any(mt.V_total)
    with pytest.raises(PreconditionError):
        fit_decay_rate(mt)


def test_grid_mismatch_is_rejected(plane_spec, neck_spec, ancient):
    with pytest.raises(PreconditionError):
        mode_trajectory(ancient, plane_spec)


def synthetic_modes(V_plus, times):
    V_minus = 1e-10 * np.exp(0.8 * (times + 20.0))
    total = np.sqrt(V_plus ** 2 + V_minus ** 2)
    return ModeTrajectory(times, V_plus, np.zeros_like(times), V_minus, total, 2.7 * total, 0.0,
                          np.array([-0.8, 1.2, 2.2]), 1e-6)


def test_roundoff_in_stable_modes_is_tolerated():
    # masas estables al nivel del redondeo con δ V ~ 1e-20
    times = np.linspace(-20.0, -10.0, 201)
    noise = 3e-16 * np.random.default_rng(0).random(times.size)
    report = check_mode_system(synthetic_modes(noise, times))
    assert report.passed
    assert report.C_empirical == 0.0


def test_growing_stable_mass_still_fails():
    times = np.linspace(-20.0, -10.0, 201)
    report = check_mode_system(synthetic_modes(1e-12 * np.exp(times + 20.0), times))
    assert not report.passed
    assert report.plus.failure_times
    assert report.minus.passed


def test_ancient_flow_mode_system(neck_spec, ancient):
    mt = mode_trajectory(ancient, neck_spec)
    report = check_mode_system(mt, s_max=-3.0)
    assert report.passed
    assert report.C_empirical <= 10.0


def test_unstable_modes_dominate_backward(neck_spec, ancient):
    mt = mode_trajectory(ancient, neck_spec)
    early = mt.times <= -5.0
    assert np.all(mt.V_total[early] <= 1.01 * mt.V_minus[early])
    assert np.all(mt.V_zero[early] <= 1e-6 * mt.V_total[early])


def test_decay_rate_matches_leading_eigenvalue(neck_spec, ancient):
    fit = fit_decay_rate(mode_trajectory(ancient, neck_spec))
    assert fit.exponent == pytest.approx(-neck_spec.lambdas[0], rel=0.05)
    assert fit.frames >= 10


def test_corrupted_frame_is_localized(neck_spec, ancient):
    frames = np.array(ancient.frames)
    k = ancient.index_of(0.5 * (ancient.times[0] - 3.0))
    frames[k] *= 2.0
    corrupted = Trajectory(ancient.curve, ancient.times, frames, "ancient")
    report = check_mode_system(mode_trajectory(corrupted, neck_spec), s_max=-3.0)
    assert not report.passed
    lo, hi = ancient.times[k - 1], ancient.times[k + 1]
    failures = report.plus.failure_times + report.neutral.failure_times + report.minus.failure_times
    assert failures
    assert all(lo <= s <= hi for s in failures)


def test_dominance_dichotomy_runs(neck_spec, ancient):
    verdict, info = dominance_dichotomy(mode_trajectory(ancient, neck_spec))
    assert verdict.branch in ("first", "second", "none")
    assert info["gap"] > 0
    assert info["eps"] > 0

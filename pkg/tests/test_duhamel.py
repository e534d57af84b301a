import numpy as np
import pytest

from errors import PreconditionError, StiffnessError
from geometry import weighted_norm
from duhamel import (
    ModeData,
    Trajectory,
    mode_data,
    phi_matrix,
    project_modes,
    solve_linear,
    tau_minus,
    verify_linear_residual,
)

RHO = 0.7


def forcing(spec, j, times, rho=RHO):
    """h(s) = e^{ρs} φ_j en cada marco."""
    return np.exp(rho * times)[:, None] * spec.phi(j)[None, :]


def test_forward_closed_form(plane_spec):
    j = 1
    times = np.linspace(-6.0, 0.0, 3001)
    data = mode_data(plane_spec, (), RHO)
    traj = solve_linear(plane_spec, data, times, forcing(plane_spec, j, times))
    expected = np.exp(RHO * times) / (plane_spec.lambdas[j] + RHO)
    assert np.allclose(traj.coefficients[:, j], expected, rtol=1e-6)
    others = np.delete(traj.coefficients, j, axis=1)
    assert np.max(np.abs(others)) < 1e-10


def test_linear_residual_passes(plane_spec):
    times = np.linspace(-6.0, 0.0, 3001)
    h = forcing(plane_spec, 1, times)
    traj = solve_linear(plane_spec, mode_data(plane_spec, (), RHO), times, h)
    report = verify_linear_residual(traj, plane_spec.operator, h)
    assert report.passed


def test_zero_data_gives_zero(plane_spec):
    times = np.linspace(-2.0, 0.0, 41)
    traj = solve_linear(plane_spec, mode_data(plane_spec, (), 1.0), times)
    assert not np.any(traj.frames)
    assert traj.provenance == "duhamel"


def test_unstable_modes_integrate_backward(neck_spec):
    times = np.linspace(-6.0, 0.0, 3001)
    lam1 = neck_spec.lambdas[0]
    rho = 1.0 - lam1                 # λ1 + ρ = 1
    data = mode_data(neck_spec, np.zeros(neck_spec.index), rho)
    traj = solve_linear(neck_spec, data, times, forcing(neck_spec, 0, times, rho))
    expected = np.exp(rho * times) - np.exp(-lam1 * times)
    early = times <= -1.0
    assert np.allclose(traj.coefficients[early, 0], expected[early], rtol=1e-5)
    assert traj.coefficients[-1, 0] == pytest.approx(0.0, abs=1e-14)


def test_tau_minus_is_pure_growth(neck_spec):
    a = np.zeros(neck_spec.index)
    a[0] = 1e-3
    times = np.linspace(-4.0, 0.0, 81)
    traj = solve_linear(neck_spec, mode_data(neck_spec, a, 1.0), times)
    expected = a[0] * np.exp(-neck_spec.lambdas[0] * times)
    assert np.allclose(traj.coefficients[:, 0], expected, rtol=1e-12)
    tau = tau_minus(neck_spec, a, -2.0)
    k = traj.index_of(-2.0)
    assert weighted_norm(neck_spec.curve, tau.values - traj.frames[k]) < 1e-12 * weighted_norm(
        neck_spec.curve, tau.values)


def test_tau_minus_preconditions(plane_spec, neck_spec):
    with pytest.raises(PreconditionError):
        tau_minus(plane_spec, (), -1.0)
    a = np.zeros(neck_spec.index)
    with pytest.raises(PreconditionError):
        tau_minus(neck_spec, a, 0.5)
    with pytest.raises(PreconditionError):
        tau_minus(neck_spec, np.zeros(neck_spec.index + 1), -1.0)


def test_empty_delta_window(neck_spec):
    data = ModeData(tuple(np.zeros(neck_spec.index)), 0.5, 0.6)
    with pytest.raises(PreconditionError):
        data.validate(neck_spec)


def test_grid_must_end_at_zero(neck_spec):
    data = mode_data(neck_spec, np.zeros(neck_spec.index), 1.0)
    with pytest.raises(PreconditionError):
        solve_linear(neck_spec, data, np.linspace(-2.0, -1.0, 11))


def test_coarse_grid_is_stiff(plane_spec):
    times = np.array([-10.0, -5.0, 0.0])
    with pytest.raises(StiffnessError):
        solve_linear(plane_spec, mode_data(plane_spec, (), 1.0), times)


def test_project_modes_recovers_eigenfunction(plane_spec):
    coeffs, rest = project_modes(plane_spec.phi(3), plane_spec)
    expected = np.zeros(plane_spec.modes)
    expected[3] = 1.0
    assert np.allclose(coeffs, expected, atol=1e-12)
    assert rest < 1e-12


def test_phi_matrix_rows(plane_spec):
    rows = phi_matrix(plane_spec)
    assert rows.shape == (plane_spec.modes, plane_spec.curve.size)
    assert np.allclose(rows[2], plane_spec.phi(2))


def test_trajectory_validates_shapes(plane):
    with pytest.raises(PreconditionError):
        Trajectory(plane, [0.0, 1.0], np.zeros((2, plane.size + 1)))
    with pytest.raises(PreconditionError):
        Trajectory(plane, [1.0, 0.0], np.zeros((2, plane.size)))
    with pytest.raises(PreconditionError):
        Trajectory(plane, [0.0, 1.0], np.zeros((2, plane.size)), provenance="guess")
    traj = Trajectory(plane, [0.0, 1.0, 2.0], np.zeros((3, plane.size)))
    assert len(traj.slice(1)) == 2


def test_solution_is_linear_in_forcing(plane_spec):
    times = np.linspace(-4.0, 0.0, 401)
    curve = plane_spec.curve
    rng = np.random.default_rng(3)
    envelope = np.exp(-curve.radius ** 2 / 8)
    envelope[~curve.active] = 0.0
    h1 = np.exp(RHO * times)[:, None] * (rng.standard_normal(curve.size) * envelope)[None, :]
    h2 = forcing(plane_spec, 2, times)
    data = mode_data(plane_spec, (), RHO)
    c1 = solve_linear(plane_spec, data, times, h1).coefficients
    c2 = solve_linear(plane_spec, data, times, h2).coefficients
    combined = solve_linear(plane_spec, data, times, h1 - 2.5 * h2).coefficients
    assert np.allclose(combined, c1 - 2.5 * c2, rtol=0, atol=1e-12 * np.max(np.abs(c1 - 2.5 * c2)))

import numpy as np
import pytest

import ancient as ancient_module
from errors import ContractionError, PreconditionError
from geometry import weighted_norm
from flow import one_sided, pde_residual
from ancient import (
    AncientParams,
    backward_rate,
    closeness_check,
    construct_ancient,
    distinctness_check,
    evaluate_Q,
    nonlinearity,
    translation_match,
)


def amplitude(spec, value):
    a = np.zeros(spec.index)
    a[0] = value
    return tuple(a)


def test_Q_vanishes_at_zero(neck_spec):
    q = evaluate_Q(neck_spec.curve, np.zeros(neck_spec.curve.size), neck_spec.operator)
    assert not np.any(q.values)
    assert not np.any(nonlinearity(neck_spec.operator, np.zeros(neck_spec.curve.size)))


def test_Q_is_quadratic(neck_spec):
    phi = neck_spec.phi(0)
    ratios = []
    for t in (1e-2, 5e-3, 2.5e-3):
        q = evaluate_Q(neck_spec.curve, t * phi, neck_spec.operator)
        ratios.append(weighted_norm(neck_spec.curve, q.values) / t ** 2)
    assert ratios[1] == pytest.approx(ratios[0], rel=0.05)
    assert ratios[2] == pytest.approx(ratios[1], rel=0.05)


def test_stable_expander_has_no_family(plane_spec):
    with pytest.raises(PreconditionError):
        construct_ancient(plane_spec, AncientParams(()))


@pytest.mark.parametrize("overrides", [
    {"delta0": 0.0},
    {"delta0": 1e6},
    {"eps": 1e-4},
    {"ds": -0.1},
    {"max_iter": 0},
])
def test_params_are_validated(neck_spec, overrides):
    params = AncientParams(amplitude(neck_spec, 1e-3), **overrides)
    with pytest.raises(PreconditionError):
        params.resolved(neck_spec)


def test_wrong_number_of_amplitudes(neck_spec):
    with pytest.raises(PreconditionError):
        AncientParams((1e-3,) * (neck_spec.index + 1)).resolved(neck_spec)


def test_default_horizon(neck_spec):
    params = AncientParams(amplitude(neck_spec, 1e-3)).resolved(neck_spec)
    expected = min(60.0, np.log(1e-3 / 1e-10) / -neck_spec.lambdas[0])
    assert params.S_back == pytest.approx(expected)
    assert params.delta0 == pytest.approx(-0.5 * neck_spec.lambdas[neck_spec.index - 1])
    grid = params.time_grid()
    assert grid[0] == pytest.approx(-params.S_back)
    assert grid[-1] == 0.0


def test_zero_amplitude_is_static(neck_spec):
    params = AncientParams(amplitude(neck_spec, 0.0))
    traj = construct_ancient(neck_spec, params)
    assert not np.any(traj.frames)
    assert traj.metadata["iterations"] == 1
    assert closeness_check(traj, neck_spec, params).beta_empirical == 0.0


def test_fixed_point_converges(ancient):
    meta = ancient.metadata
    assert ancient.provenance == "ancient"
    assert meta["fixed_point_residual"] < 1e-12
    assert meta["pi_minus_error"] < 1e-8
    assert all(f < 0.5 for f in meta["contraction_factors"][1:])


def test_ancient_flow_is_one_sided(ancient):
    assert all(one_sided(f, 1) for f in ancient.frames)


def test_ancient_flow_solves_the_pde(ancient):
    assert pde_residual(ancient).passed


def test_closeness_stable_under_halving(neck_spec, ancient, ancient_params):
    small_params = AncientParams(amplitude(neck_spec, 5e-4))
    small = construct_ancient(neck_spec, small_params)
    beta = closeness_check(ancient, neck_spec, ancient_params)
    beta_small = closeness_check(small, neck_spec, small_params)
    assert beta.passed and beta_small.passed
    assert beta_small.beta_empirical == pytest.approx(beta.beta_empirical, rel=0.2)


def test_distinct_amplitudes_give_distinct_flows(neck_spec, ancient):
    other = construct_ancient(neck_spec, AncientParams(amplitude(neck_spec, 5e-4)))
    report = distinctness_check(ancient, other)
    assert report["passed"]
    assert report["distance"] >= report["bound"] > 0


def test_one_sided_flows_are_time_translates(neck_spec, ancient):
    other = construct_ancient(neck_spec, AncientParams(amplitude(neck_spec, 5e-4)))
    match = translation_match(ancient, other, neck_spec)
    assert match["shift"] < 0
    assert match["shift"] == pytest.approx(match["expected_shift"], rel=0.05)
    assert match["relative_distance"] < 1e-2


def test_translation_needs_ordered_amplitudes(neck_spec, ancient):
    with pytest.raises(PreconditionError):
        translation_match(ancient, ancient, neck_spec)


def test_backward_growth_rate(neck_spec, ancient):
    assert backward_rate(ancient) == pytest.approx(-neck_spec.lambdas[0], rel=0.05)


def test_opposite_amplitude_flips_the_flow(neck_spec, ancient, ancient_params):
    mirrored = construct_ancient(neck_spec, AncientParams(tuple(-x for x in ancient_params.a)))
    assert np.array_equal(mirrored.times, ancient.times)
    assert all(one_sided(f, -1) for f in mirrored.frames)
    curve = neck_spec.curve
    # la parte par es O(‖a‖²)
    for plus, minus in zip(ancient.frames, mirrored.frames):
        assert weighted_norm(curve, plus + minus) <= 0.05 * weighted_norm(curve, plus)


def test_lost_mode_data_is_an_error(neck_spec, ancient_params, monkeypatch):
    monkeypatch.setattr(ancient_module, "project_modes", lambda v, spec: (np.ones(spec.modes), 0.0))
    with pytest.raises(ContractionError) as exc:
        construct_ancient(neck_spec, AncientParams(ancient_params.a, S_back=1.0))
    assert exc.value.details["mismatch"] > 1e-8

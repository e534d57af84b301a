import math

import numpy as np
import pytest

from errors import PreconditionError
from geometry import weighted_norm
from duhamel import Trajectory
from flow import (
    FlowState,
    cone_distance,
    evolve,
    morse_flow_line,
    one_sided,
    pde_residual,
    rk4_reference,
    step,
    unrescale,
)


def test_static_expander_stays_put(neck_spec):
    state = FlowState(neck_spec.operator, np.zeros(neck_spec.curve.size))
    after = step(state)
    assert not np.any(after.v)
    assert after.s > state.s
    assert after.ds >= state.ds


def test_state_is_immutable_and_dirichlet(plane_spec):
    v = np.ones(plane_spec.curve.size) * 1e-6
    state = FlowState(plane_spec.operator, v)
    assert state.v[-1] == 0.0
    assert not state.v.flags.writeable
    with pytest.raises(PreconditionError):
        FlowState(plane_spec.operator, v, ds=0.0)


def test_linear_regime_decays_at_eigenvalue(plane_spec):
    j = 1
    v0 = 1e-6 * plane_spec.phi(j)
    traj = evolve(FlowState(plane_spec.operator, v0), 0.5, 0.5, tol=1e-6)
    ratio = traj.norms()[-1] / traj.norms()[0]
    assert ratio == pytest.approx(math.exp(-0.5 * plane_spec.lambdas[j]), rel=1e-4)


def test_stepper_agrees_with_rk4(plane_spec):
    v0 = 1e-2 * plane_spec.phi(0)
    traj = evolve(FlowState(plane_spec.operator, v0), 0.01, 0.01)
    reference = rk4_reference(plane_spec.curve, v0, 0.01, 1e-4)
    assert weighted_norm(plane_spec.curve, traj.frames[-1] - reference) <= 1e-7


def test_evolve_records_requested_times(plane_spec):
    traj = evolve(FlowState(plane_spec.operator, 1e-4 * plane_spec.phi(0)), 0.3, 0.1, tol=1e-6)
    assert np.allclose(traj.times, [0.0, 0.1, 0.2, 0.3])
    assert traj.provenance == "flow"
    assert traj.metadata["steps"] >= 3
    report = pde_residual(traj, rtol=0.1)
    assert report.max_speed > 0
    assert report.to_dict()["passed"] is report.passed


def test_evolve_needs_future_end(plane_spec):
    state = FlowState(plane_spec.operator, np.zeros(plane_spec.curve.size), s=1.0)
    with pytest.raises(PreconditionError):
        evolve(state, 0.5, 0.1)
    with pytest.raises(PreconditionError):
        evolve(state, 2.0, 0.0)


def test_unrescale_scales_static_expander(sheet):
    curve = sheet.curve
    times = np.log([0.25, 1.0, 4.0])
    traj = Trajectory(curve, times, np.zeros((3, curve.size)), "flow")
    frames, meta = unrescale(traj, [0.25, 1.0, 4.0])
    assert meta["limit_t_to_0"] == "asymptotic cone"
    for frame, t in zip(frames, [0.25, 1.0, 4.0]):
        assert frame.t == pytest.approx(t)
        assert np.allclose(frame.q, math.sqrt(t) * curve.q, rtol=1e-12)
        assert np.allclose(frame.p, math.sqrt(t) * curve.p, rtol=1e-12)


def test_unrescale_requires_exact_frames(sheet):
    curve = sheet.curve
    traj = Trajectory(curve, [-1.0, 0.0], np.zeros((2, curve.size)), "flow")
    with pytest.raises(PreconditionError):
        unrescale(traj, [0.5])
    with pytest.raises(PreconditionError):
        unrescale(traj, [-1.0])


def test_unrescaled_frames_approach_cone(sheet):
    curve = sheet.curve
    times = np.array([-1.0, -0.5, 0.0])
    traj = Trajectory(curve, times, np.zeros((3, curve.size)), "flow")
    frames, _ = unrescale(traj)
    distances = [cone_distance(f, sheet.cone) for f in frames]
    assert distances[0] < distances[1] < distances[2]


def test_one_sided_ignores_unresolved_tail():
    v = np.array([1.0, 0.5, 1e-9, -1e-9, 0.0])
    assert one_sided(v, 1)
    assert not one_sided(v, -1)
    assert one_sided(np.zeros(4), -1)


def test_morse_flow_needs_unstable_expander(plane_spec):
    with pytest.raises(PreconditionError):
        morse_flow_line(plane_spec)


@pytest.mark.slow
def test_ancient_flow_matches_forward_integration(ancient):
    k = ancient.index_of(-10.0)
    state = FlowState.start(ancient.curve, ancient.frames[k], float(ancient.times[k]))
    forward = evolve(state, 0.0, 10.0)
    assert weighted_norm(ancient.curve, forward.frames[-1] - ancient.frames[-1]) <= 1e-5


@pytest.mark.slow
def test_morse_flow_line(neck_spec):
    result = morse_flow_line(neck_spec, sign=1, max_time=20.0, tol=1e-6)
    assert result.status in ("converged", "singular", "sign_lost", "max_time")
    assert result.trajectory.times[0] < 0 <= result.trajectory.times[-1]
    if result.status != "sign_lost":
        assert all(one_sided(f, 1) for f in result.trajectory.frames)
    if result.status == "converged":
        assert result.limit_residual <= 1e-5
        assert result.limit_lambda1 >= -1e-6

import csv
import math

import numpy as np
import pytest

from config import RESIDUAL_TOL
from errors import BracketError, PreconditionError, ShootingError
from geometry import ConeSpec, asymptotic_cone, fit_cone_end, radial_graph
from expander_solver import (
    ExpanderProfile,
    count_threshold,
    find_expanders,
    match_sheet,
    match_sheet_secant,
    neck_scan,
    neck_threshold_slope,
    residual_norm,
    residual_tolerance,
    rk4_sheet_slope,
    shoot_neck,
    shoot_sheet,
    sweep_cone_slope,
    terminal_slope,
)


def test_degenerate_cone_gives_plane():
    plane = match_sheet(ConeSpec(2, 0.0))
    assert plane.topology == "disconnected-sheet"
    assert plane.parameter == 0.0
    assert np.max(np.abs(plane.curve.p)) == 0.0
    assert plane.residual_norm == 0.0


def test_sheet_matches_slope(sheet):
    assert sheet.topology == "disconnected-sheet"
    assert sheet.residual_norm < sheet.tolerance
    assert RESIDUAL_TOL < sheet.tolerance < 1e-2
    assert sheet.cone.slope == pytest.approx(0.5, abs=1e-6)
    assert sheet.parameter > 0
    assert sheet.curve.start_kind == "axis"


def test_sheet_has_expander_asymptotics(sheet):
    fit = fit_cone_end(sheet.curve)
    # p ≈ m q + (n-1) m / q
    assert fit.correction == pytest.approx(0.5, rel=0.2)
    cone, _ = asymptotic_cone(sheet.curve)
    assert cone.orientation == "upper"


def test_rk4_agrees_with_adaptive_shooting(sheet):
    reference = terminal_slope(shoot_sheet(ConeSpec(2, 0.0), sheet.parameter))
    assert rk4_sheet_slope(2, sheet.parameter) == pytest.approx(reference, abs=1e-6)


def test_residual_converges_at_second_order(sheet):
    coarse = residual_norm(shoot_sheet(ConeSpec(2, 0.0), sheet.parameter, 0.02))
    fine = residual_norm(shoot_sheet(ConeSpec(2, 0.0), sheet.parameter, 0.01))
    assert fine < coarse
    assert math.log2(coarse / fine) == pytest.approx(2.0, abs=0.3)


def test_residual_rejects_non_expander():
    r = np.linspace(0.0, 1.9, 4001)
    sphere = radial_graph(r, np.sqrt(4.0 - r * r), ConeSpec(2, 0.0), h=0.01)
    # esfera de radio 2: H - ½ x·N = -2
    assert residual_norm(sphere) > 1.0
    assert residual_norm(sphere) > residual_tolerance(sphere)


def test_sheet_is_odd_in_height():
    up = shoot_sheet(ConeSpec(2, 0.0), 0.5)
    down = shoot_sheet(ConeSpec(2, 0.0), -0.5)
    assert np.array_equal(up.sigma, down.sigma)
    assert np.allclose(down.q, up.q, rtol=0, atol=1e-12)
    for name in ("p", "theta", "kappa"):
        assert np.allclose(getattr(down, name), -getattr(up, name), rtol=0, atol=1e-12)


def test_terminal_slope_increases_with_height():
    slopes = [terminal_slope(shoot_sheet(ConeSpec(2, 0.0), h0)) for h0 in np.linspace(0.1, 1.0, 6)]
    assert np.all(np.diff(slopes) > 0)


def test_secant_agrees_with_bisection(sheet):
    root = match_sheet_secant(ConeSpec(2, 0.5), sheet.parameter * 0.9, sheet.parameter * 1.1)
    assert root == pytest.approx(sheet.parameter, abs=1e-8)


def test_lower_orientation_reflects_height(sheet):
    lower = match_sheet(ConeSpec(2, 0.5, "lower"))
    assert lower.parameter == pytest.approx(-sheet.parameter, abs=1e-8)
    assert lower.cone.orientation == "lower"


def test_bracket_error_reports_range():
    with pytest.raises(BracketError) as exc:
        match_sheet(ConeSpec(2, 0.5), bracket=(0.0, 0.01))
    lo, hi = exc.value.details["slope_range"]
    assert lo <= hi < 0.5


def test_neck_needs_positive_radius():
    with pytest.raises(PreconditionError):
        shoot_neck(ConeSpec(2, 0.0), 0.0)


def test_neck_profile_starts_on_symmetry_plane():
    r0 = next(r for r, m in neck_scan(2) if math.isfinite(m))
    curve = shoot_neck(ConeSpec(2, 0.0), r0)
    assert curve.start_kind == "symmetric"
    assert curve.reflected
    assert curve.p[0] == 0.0
    assert curve.q[0] == r0


def test_expander_profile_rejects_large_residual(plane):
    with pytest.raises(ShootingError):
        ExpanderProfile(plane, ConeSpec(2, 0.0), "disconnected-sheet", 0.0, 1e-3)
    with pytest.raises(PreconditionError):
        ExpanderProfile(plane, ConeSpec(2, 0.0), "torus", 0.0, 0.0)


def test_count_threshold_on_table():
    rows = [{"slope": 0.1, "count": 3}, {"slope": 0.2, "count": 3},
            {"slope": 0.3, "count": 1}, {"slope": 0.4, "count": 1}]
    assert count_threshold(rows) == pytest.approx(0.25)
    assert count_threshold(rows[2:]) is None


@pytest.mark.slow
def test_nonuniqueness_below_threshold():
    r_star, m_star = neck_threshold_slope(2)
    assert r_star > 0 and m_star > 0
    below = find_expanders(ConeSpec(2, 0.5 * m_star))
    above = find_expanders(ConeSpec(2, 1.5 * m_star))
    assert len(below) >= 2
    assert {e.topology for e in below} == {"disconnected-sheet", "connected-neck"}
    assert len(above) == 1
    assert above[0].topology == "disconnected-sheet"
    assert all(e.residual_norm < e.tolerance for e in below + above)


@pytest.mark.slow
def test_sweep_writes_table(tmp_path):
    _, m_star = neck_threshold_slope(2)
    path = tmp_path / "sweep.csv"
    rows = sweep_cone_slope([0.5 * m_star, 1.5 * m_star], 2, threads=2, csv_path=str(path))
    assert [r["count"] >= 2 for r in rows] == [True, False]
    with open(path, newline="") as f:
        table = list(csv.DictReader(f))
    assert len(table) == 2
    assert table[0]["error"] == ""

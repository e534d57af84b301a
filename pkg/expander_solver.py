"""
expander_solver.py - Disparo de perfiles auto-expansores
========================================================
Resuelve la ecuación H = ½ x·N para perfiles de rotación integrando el
sistema en longitud de arco

    q' = cos θ,  p' = sin θ,  θ' = ½(p cos θ - q sin θ) - (n-1) sin θ / q

hacia afuera desde el eje (hojas, parámetro w(0) = h0) o desde el plano de
simetría (cuellos, parámetro q(0) = r0), y ajusta la pendiente asintótica a
la del cono pedido.

USO:
    from expander_solver import match_sheet, find_expanders
    sheet = match_sheet(ConeSpec(2, 0.5))
"""

import math
import logging
import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import bisect, minimize_scalar, newton

from config import GRID_H, R_MAX, ODE_RTOL, RESIDUAL_TOL, SLOPE_MATCH_TOL
from errors import BracketError, GeometryError, PreconditionError, ShootingError
from geometry import ConeSpec, ProfileCurve, expander_residual, fit_cone_end, profile_distance

logger = logging.getLogger(__name__)

ODE_ATOL = 1e-12
AXIS_START = 1e-4           # σ0 del desarrollo en serie junto al eje
ESCAPE_COS = 1e-3           # cos θ mínimo antes de declarar escape
AXIS_RETURN = 1e-3          # q mínimo de un cuello antes de declarar fallo topológico
SIGMA_BUDGET = 8.0          # longitud máxima de arco en unidades de R_max
ROOT_XTOL = 1e-10
DEDUP_DISTANCE = 1e-3
RESIDUAL_H2 = 1.0           # residuo admitido: tol + h²·(1 + max|θ'''|)

SHEET_BRACKET = (0.0, 5.0)
NECK_GRID = tuple(np.geomspace(0.05, 10.0, 40))


# ============================================================
# TIPOS
# ============================================================

@dataclass(frozen=True, eq=False)
class ExpanderProfile:
    """Auto-expansor validado: residuo bajo tolerancia y cono ajustado."""
    curve: ProfileCurve
    cone: ConeSpec
    topology: str               # "disconnected-sheet" | "connected-neck"
    parameter: float            # h0 o r0
    residual_norm: float
    correction: float = 0.0
    tolerance: float = RESIDUAL_TOL

    def __post_init__(self):
        if self.topology not in ("disconnected-sheet", "connected-neck"):
            raise PreconditionError("topología desconocida", topology=self.topology)
        if not self.residual_norm < self.tolerance:
            raise ShootingError("residuo del expansor sobre la tolerancia",
                                residual=self.residual_norm, tolerance=self.tolerance)

    @property
    def n(self) -> int:
        return self.curve.n

    def to_dict(self) -> Dict:
        return {
            "topology": self.topology,
            "parameter": self.parameter,
            "residual_norm": self.residual_norm,
            "correction": self.correction,
            "tolerance": self.tolerance,
            "cone": self.cone.to_dict(),
            **self.curve.header(),
        }


def discrete_residual(curve: ProfileCurve) -> np.ndarray:
    """
    H - ½ x·N con κ = θ' por diferencias centradas de segundo orden sobre
    los nodos, sin usar la curvatura que devuelve la EDO.
    """
    kappa = np.gradient(curve.theta, curve.sigma, edge_order=2)
    gap = kappa - curve.kappa
    gap[curve.q == 0] *= curve.n            # en el eje H = n κ
    return expander_residual(curve).values + gap


def residual_norm(curve: ProfileCurve) -> float:
    return float(np.max(np.abs(discrete_residual(curve))))


def residual_tolerance(curve: ProfileCurve) -> float:
    """Cota del error de truncación O(h²) del residuo discreto."""
    h = float(np.max(np.diff(curve.sigma)))
    third = np.gradient(np.gradient(curve.kappa, curve.sigma, edge_order=2), curve.sigma, edge_order=2)
    return RESIDUAL_TOL + RESIDUAL_H2 * h * h * (1.0 + float(np.max(np.abs(third))))


def as_expander(curve: ProfileCurve, topology: str, parameter: float) -> ExpanderProfile:
    fit = fit_cone_end(curve)
    return ExpanderProfile(curve, fit.cone, topology, float(parameter), residual_norm(curve),
                           fit.correction, residual_tolerance(curve))


# ============================================================
# INTEGRACIÓN
# ============================================================

def _profile_rhs(n: int):
    def rhs(sigma, y):
        q, p, theta = y
        s, c = math.sin(theta), math.cos(theta)
        return [c, s, 0.5 * (p * c - q * s) - (n - 1) * s / q]
    return rhs


def _terminal(fun, direction):
    fun.terminal = True
    fun.direction = direction
    return fun


def _integrate(n: int, y0, sigma0: float, r_max: float, events) -> Tuple[object, float]:
    """Integra con DOP853 hasta q = r_max; devuelve (solución, longitud)."""
    reach = _terminal(lambda s, y: y[0] - r_max, 1)
    sol = solve_ivp(_profile_rhs(n), (sigma0, SIGMA_BUDGET * r_max), y0, method="DOP853",
                    rtol=ODE_RTOL, atol=ODE_ATOL, dense_output=True, events=[reach, *events])
    if sol.status == -1:
        raise ShootingError("subdesbordamiento del paso de integración", message_ivp=sol.message,
                            sigma=float(sol.t[-1]))
    return sol, (float(sol.t_events[0][0]) if sol.t_events[0].size else math.nan)


def _arc_nodes(length: float, h: float) -> np.ndarray:
    return np.linspace(0.0, length, max(int(math.ceil(length / h)), 3) + 1)


def shoot_sheet(cone: ConeSpec, h0: float, h: float = GRID_H, r_max: float = R_MAX) -> ProfileCurve:
    """
    Hoja {x_{n+1} = w(|y|)} con w(0) = h0, w'(0) = 0 hasta q = r_max.

    Raises:
        ShootingError: escape (el perfil se vuelve vertical) o paso nulo
    """
    if not math.isfinite(h0):
        raise PreconditionError("h0 debe ser finito", h0=h0)
    n = cone.n
    kappa0 = h0 / (2.0 * n)
    s0 = AXIS_START
    y0 = [s0, h0 + 0.5 * kappa0 * s0 ** 2, kappa0 * s0]
    escape = _terminal(lambda s, y: math.cos(y[2]) - ESCAPE_COS, -1)
    sol, length = _integrate(n, y0, s0, r_max, [escape])
    if sol.t_events[1].size:
        radius = float(sol.y_events[1][0][0])
        raise ShootingError("la hoja escapa antes de R_max", escape_radius=radius, h0=h0)
    if not math.isfinite(length):
        raise ShootingError("longitud de arco agotada antes de R_max", h0=h0)

    sigma = _arc_nodes(length, h)
    q, p, theta = np.empty_like(sigma), np.empty_like(sigma), np.empty_like(sigma)
    q[0], p[0], theta[0] = 0.0, h0, 0.0
    q[1:], p[1:], theta[1:] = sol.sol(sigma[1:])
    q[-1] = r_max
    kappa = np.empty_like(sigma)
    kappa[0] = kappa0
    kappa[1:] = 0.5 * (p[1:] * np.cos(theta[1:]) - q[1:] * np.sin(theta[1:])) \
        - (n - 1) * np.sin(theta[1:]) / q[1:]
    return ProfileCurve(n, sigma, q, p, theta, kappa, "axis", "truncated", reflected=(h0 != 0.0))


def shoot_neck(cone: ConeSpec, r0: float, h: float = GRID_H, r_max: float = R_MAX) -> ProfileCurve:
    """
    Medio perfil de un expansor conexo desde el plano de simetría
    (q = r0, p = 0, θ = π/2). La hipersuperficie completa es su reflejo.

    Raises:
        ShootingError: el perfil vuelve al eje o cruza el plano de simetría
    """
    if not (math.isfinite(r0) and r0 > 0):
        raise PreconditionError("r0 debe ser positivo", r0=r0)
    if r0 >= r_max:
        raise PreconditionError("r0 debe ser menor que R_max", r0=r0, r_max=r_max)
    n = cone.n
    back_to_axis = _terminal(lambda s, y: y[0] - AXIS_RETURN, -1)
    crosses_plane = _terminal(lambda s, y: y[1] + 1e-9, -1)
    sol, length = _integrate(n, [r0, 0.0, 0.5 * math.pi], 0.0, r_max, [back_to_axis, crosses_plane])
    for k in (1, 2):
        if sol.t_events[k].size:
            q_t, p_t, _ = sol.y_events[k][0]
            raise ShootingError("fallo topológico del cuello", r0=r0,
                                turning_point={"sigma": float(sol.t_events[k][0]),
                                               "q": float(q_t), "p": float(p_t)})
    if not math.isfinite(length):
        raise ShootingError("longitud de arco agotada antes de R_max", r0=r0)

    sigma = _arc_nodes(length, h)
    q, p, theta = sol.sol(sigma)
    q[0], p[0], theta[0] = r0, 0.0, 0.5 * math.pi
    q[-1] = r_max
    kappa = 0.5 * (p * np.cos(theta) - q * np.sin(theta)) - (n - 1) * np.sin(theta) / q
    return ProfileCurve(n, sigma, q, p, theta, kappa, "symmetric", "truncated", reflected=True)


def rk4_sheet_slope(n: int, h0: float, r_max: float = R_MAX, dr: float = 0.005) -> float:
    """
    w'(r_max) con RK4 de paso fijo sobre la forma radial
    w'' = (1 + w'²)·[(w - r w')/2 - (n-1) w'/r].
    """
    kappa0 = h0 / (2.0 * n)

    def f(r, w, dw):
        return (1.0 + dw * dw) * (0.5 * (w - r * dw) - (n - 1) * dw / r)

    steps = int(round((r_max - dr) / dr))
    r, w, dw = dr, h0 + 0.5 * kappa0 * dr * dr, kappa0 * dr
    for _ in range(steps):
        k1w, k1d = dw, f(r, w, dw)
        k2w, k2d = dw + 0.5 * dr * k1d, f(r + 0.5 * dr, w + 0.5 * dr * k1w, dw + 0.5 * dr * k1d)
        k3w, k3d = dw + 0.5 * dr * k2d, f(r + 0.5 * dr, w + 0.5 * dr * k2w, dw + 0.5 * dr * k2d)
        k4w, k4d = dw + dr * k3d, f(r + dr, w + dr * k3w, dw + dr * k3d)
        w += dr * (k1w + 2 * k2w + 2 * k3w + k4w) / 6.0
        dw += dr * (k1d + 2 * k2d + 2 * k3d + k4d) / 6.0
        r += dr
    return dw


def terminal_slope(curve: ProfileCurve) -> float:
    return math.tan(float(curve.theta[-1]))


# ============================================================
# AJUSTE DE PENDIENTE
# ============================================================

@lru_cache(maxsize=4096)
def sheet_slope(n: int, h0: float, h: float = GRID_H, r_max: float = R_MAX) -> float:
    """Pendiente asintótica ajustada (con signo) de la hoja de altura h0."""
    curve = shoot_sheet(ConeSpec(n, 0.0), h0, h, r_max)
    fit = fit_cone_end(curve)
    return math.copysign(fit.cone.slope, 1.0 if fit.cone.orientation != "lower" else -1.0)


@lru_cache(maxsize=4096)
def neck_slope(n: int, r0: float, h: float = GRID_H, r_max: float = R_MAX) -> float:
    """Pendiente asintótica ajustada del cuello de radio r0."""
    return fit_cone_end(shoot_neck(ConeSpec(n, 0.0), r0, h, r_max)).cone.slope


def _polish(g, x: float, eta: float = 1e-6) -> float:
    """Un paso de Newton con derivada por diferencias centradas."""
    gx = g(x)
    slope = (g(x + eta) - g(x - eta)) / (2.0 * eta)
    if slope == 0 or not math.isfinite(slope):
        return x
    candidate = x - gx / slope
    return candidate if abs(g(candidate)) < abs(gx) else x


def match_sheet(cone: ConeSpec, bracket: Tuple[float, float] = SHEET_BRACKET,
                h: float = GRID_H, r_max: float = R_MAX) -> ExpanderProfile:
    """
    Busca h0 tal que la pendiente asintótica de la hoja sea cone.slope.

    Raises:
        BracketError: sin cambio de signo en el intervalo (informa el rango explorado)
    """
    n = cone.n
    if cone.degenerate:
        return as_expander(shoot_sheet(cone, 0.0, h, r_max), "disconnected-sheet", 0.0)

    def g(h0):
        return sheet_slope(n, float(h0), h, r_max) - cone.slope

    lo, hi = bracket
    grid = np.linspace(lo, hi, 9)
    values = np.array([g(x) for x in grid])
    change = np.flatnonzero(np.sign(values[:-1]) * np.sign(values[1:]) <= 0)
    if change.size == 0:
        slopes = values + cone.slope
        raise BracketError("no hay cambio de signo en el intervalo", bracket=[lo, hi],
                           slope_range=[float(slopes.min()), float(slopes.max())])
    k = int(change[0])
    root = bisect(g, grid[k], grid[k + 1], xtol=ROOT_XTOL) if values[k] != 0 else grid[k]
    root = _polish(g, root)
    if abs(g(root)) > SLOPE_MATCH_TOL:
        raise ShootingError("tolerancia de pendiente no alcanzada", h0=root, mismatch=g(root))

    h0 = -root if cone.orientation == "lower" else root
    logger.info("✅ Hoja ajustada: h0=%.10f pendiente=%.8f", h0, cone.slope)
    return as_expander(shoot_sheet(cone, h0, h, r_max), "disconnected-sheet", h0)


def match_sheet_secant(cone: ConeSpec, x0: float, x1: float,
                       h: float = GRID_H, r_max: float = R_MAX) -> float:
    """Raíz h0 por el método de la secante (verificación independiente)."""
    return float(newton(lambda x: sheet_slope(cone.n, float(x), h, r_max) - cone.slope,
                        x0, x1=x1, tol=1e-12, maxiter=100))


# ============================================================
# RAMA CONEXA
# ============================================================

@lru_cache(maxsize=64)
def neck_scan(n: int, h: float = GRID_H, r_max: float = R_MAX,
              grid: Tuple[float, ...] = NECK_GRID) -> Tuple[Tuple[float, float], ...]:
    """Pendiente del cuello sobre la malla de radios; NaN donde el disparo falla."""
    rows = []
    for r0 in grid:
        try:
            rows.append((float(r0), neck_slope(n, float(r0), h, r_max)))
        except (ShootingError, GeometryError) as exc:
            logger.debug("⚠️ Cuello r0=%.4f descartado: %s", r0, exc.message)
            rows.append((float(r0), math.nan))
    return tuple(rows)


def find_necks(cone: ConeSpec, h: float = GRID_H, r_max: float = R_MAX,
               grid: Optional[Sequence[float]] = None) -> List[ExpanderProfile]:
    n = cone.n
    scan = neck_scan(n, h, r_max, tuple(grid) if grid is not None else NECK_GRID)
    found = []
    for (ra, ma), (rb, mb) in zip(scan[:-1], scan[1:]):
        if not (math.isfinite(ma) and math.isfinite(mb)):
            continue
        if (ma - cone.slope) * (mb - cone.slope) > 0:
            continue
        root = bisect(lambda r: neck_slope(n, float(r), h, r_max) - cone.slope, ra, rb,
                      xtol=ROOT_XTOL)
        profile = as_expander(shoot_neck(cone, root, h, r_max), "connected-neck", root)
        if abs(profile.cone.slope - cone.slope) > SLOPE_MATCH_TOL:
            logger.warning("⚠️ Cuello r0=%.6f no ajusta la pendiente (%.3e)", root,
                           profile.cone.slope - cone.slope)
            continue
        found.append(profile)
    return found


def neck_threshold_slope(n: int, h: float = GRID_H, r_max: float = R_MAX) -> Tuple[float, float]:
    """(r0*, m*): máximo de la pendiente de la rama conexa."""
    scan = [(r, m) for r, m in neck_scan(n, h, r_max) if math.isfinite(m)]
    if len(scan) < 3:
        raise ShootingError("rama conexa insuficiente para localizar el umbral", points=len(scan))
    k = int(np.argmax([m for _, m in scan]))
    lo = scan[max(k - 1, 0)][0]
    hi = scan[min(k + 1, len(scan) - 1)][0]
    best = minimize_scalar(lambda r: -neck_slope(n, float(r), h, r_max), bounds=(lo, hi),
                           method="bounded", options={"xatol": 1e-8})
    return float(best.x), float(-best.fun)


# ============================================================
# BÚSQUEDA Y BARRIDO
# ============================================================

def find_expanders(cone: ConeSpec, bracket: Tuple[float, float] = SHEET_BRACKET,
                   neck_grid: Optional[Sequence[float]] = None,
                   h: float = GRID_H, r_max: float = R_MAX) -> List[ExpanderProfile]:
    """Todos los expansores distintos (hoja y cuellos) asintóticos al cono."""
    candidates: List[ExpanderProfile] = []
    try:
        candidates.append(match_sheet(cone, bracket, h, r_max))
    except BracketError as exc:
        logger.warning("⚠️ Sin hoja en %s: %s", bracket, exc.message)
    if not cone.degenerate:
        candidates.extend(find_necks(cone, h, r_max, neck_grid))

    distinct: List[ExpanderProfile] = []
    for profile in candidates:
        if all(profile.topology != other.topology
               or profile_distance(profile.curve, other.curve) > DEDUP_DISTANCE for other in distinct):
            distinct.append(profile)
    if not distinct:
        logger.warning("⚠️ Ningún expansor encontrado para pendiente %.6f", cone.slope)
    else:
        logger.info("✅ %d expansor(es) para pendiente %.6f", len(distinct), cone.slope)
    return distinct


SWEEP_COLUMNS = ["slope", "count", "sheet_h0", "neck_r0", "max_residual", "error"]


def _sweep_row(n: int, slope: float, h: float, r_max: float) -> Dict:
    row = {"slope": slope, "count": 0, "sheet_h0": "", "neck_r0": "", "max_residual": "", "error": ""}
    try:
        found = find_expanders(ConeSpec(n, slope), h=h, r_max=r_max)
    except Exception as exc:  # cada pendiente falla por separado
        row["error"] = getattr(exc, "message", str(exc))
        logger.error("❌ Pendiente %.6f: %s", slope, row["error"])
        return row
    row["count"] = len(found)
    sheets = [e.parameter for e in found if e.topology == "disconnected-sheet"]
    necks = [e.parameter for e in found if e.topology == "connected-neck"]
    row["sheet_h0"] = repr(sheets[0]) if sheets else ""
    row["neck_r0"] = ";".join(repr(r) for r in necks)
    row["max_residual"] = repr(max(e.residual_norm for e in found)) if found else ""
    return row


def sweep_cone_slope(slopes: Sequence[float], n: int, h: float = GRID_H, r_max: float = R_MAX,
                     threads: int = 1, csv_path: Optional[str] = None) -> List[Dict]:
    """
    Tabla de bifurcación: número de expansores por pendiente.
    Los fallos por pendiente quedan registrados en la columna `error`.
    """
    slopes = [float(m) for m in slopes]
    rows: List[Dict] = []
    if slopes:
        neck_scan(n, h, r_max)
        logger.info("🔄 Barrido de %d pendientes (n=%d, h=%.4f)", len(slopes), n, h)
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            rows = list(pool.map(lambda m: _sweep_row(n, m, h, r_max), slopes))
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, "slope": repr(row["slope"])})
    return rows


def count_threshold(rows: Sequence[Dict]) -> Optional[float]:
    """Primera pendiente (en orden creciente) donde el conteo cae por debajo de 2."""
    ordered = sorted(rows, key=lambda r: r["slope"])
    for prev, row in zip(ordered[:-1], ordered[1:]):
        if prev["count"] >= 2 and row["count"] < 2:
            return 0.5 * (prev["slope"] + row["slope"])
    return None

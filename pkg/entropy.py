"""
entropy.py - Entropía relativa de expansores y desigualdades asociadas
======================================================================
E*_rel[Σ_v, Σ] se evalúa por cuadratura de retroceso sobre Σ: el integrando
(J_v e^{(2v x·N + v²)/4} - 1) se forma antes de multiplicar por el peso.

DISCRETIZACIÓN:
    a_j = (n-1) log(1 - v sinθ/q) + log(1 - vκ) + (2 v x·N + v²)/4
    g   = v' / (1 - vκ)   (cociente de diferencias en los puntos medios)
    E   = f [ Σ m_j (e^{a_j} - 1) + Σ μ_{k+½} h_k e^{ā_k} (sqrt(1+g_k²) - 1) ]

N_Σ(v) es el gradiente W de esta E (menos su valor en v = 0), así que las
comprobaciones de gradiente y la identidad de disipación son exactas en
forma semidiscreta. En el continuo N_Σ(v) = -e^{a}·(residuo de Σ_v).
"""

import math
import logging
from dataclasses import dataclass, asdict
from functools import lru_cache
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import DEFAULT_SEED
from errors import EntropyError, GeometryError, PreconditionError
from geometry import (ProfileCurve, GraphFunction, as_values, expander_residual, graph_derivatives,
                      logspace_sum, normal_graph, smooth_cutoff, weighted_inner, weighted_norm,
                      weighted_sum)
from spectral import SpectralData, StabilityOperator, assemble_stability

logger = logging.getLogger(__name__)

CUTOFF_MARGIN = 4.0         # R_cut <= R_max - 4
CAUCHY_STEP = 2.0
CAUCHY_TOL = 1e-6
C_GAP_BOUND = 100.0
POINCARE_C1 = 0.25
POINCARE_MARGIN = 0.5
LOJ_SAFETY = 10.0


def _curve(base) -> ProfileCurve:
    return getattr(base, "curve", base)


# ============================================================
# TÉRMINOS DEL FUNCIONAL
# ============================================================

def _graph_terms(curve: ProfileCurve, values: np.ndarray) -> Dict[str, np.ndarray]:
    """Cantidades nodales y de punto medio del grafo normal de v."""
    one_k = 1.0 - values * curve.kappa
    one_r = 1.0 - values * curve.rot
    bad = np.flatnonzero((one_k <= 0) | (one_r <= 0))
    if bad.size:
        raise GeometryError("grafo no admisible (curvatura × v >= 1)", node=int(bad[0]))
    a = (curve.n - 1) * np.log1p(-values * curve.rot) + np.log1p(-values * curve.kappa) \
        + 0.25 * (2.0 * values * curve.xdotN + values * values)
    d = np.diff(values) / curve.h_mid
    v_bar = 0.5 * (values[1:] + values[:-1])
    k_bar = 0.5 * (curve.kappa[1:] + curve.kappa[:-1])
    den = 1.0 - v_bar * k_bar
    if np.any(den <= 0):
        raise GeometryError("grafo no admisible entre nodos", node=int(np.argmin(den)))
    g = d / den
    s = np.sqrt(1.0 + g * g)
    return {"a": a, "d": d, "den": den, "g": g, "s": s, "k_bar": k_bar,
            "a_bar": 0.5 * (a[1:] + a[:-1]), "one_k": one_k, "one_r": one_r}


def _raw_energy(curve: ProfileCurve, values: np.ndarray) -> float:
    t = _graph_terms(curve, values)
    node = np.expm1(t["a"])
    excess = t["g"] ** 2 / (1.0 + t["s"])           # sqrt(1+g²) - 1 sin cancelación
    with np.errstate(divide="ignore"):
        logs = np.concatenate([curve.log_mass + np.log(np.abs(node)),
                               curve.log_mu_mid + np.log(curve.h_mid) + t["a_bar"] + np.log(excess)])
    signs = np.concatenate([np.sign(node), np.sign(excess)])
    return curve.fold * logspace_sum(logs, signs)


def _raw_gradient(curve: ProfileCurve, values: np.ndarray) -> np.ndarray:
    """(∂E/∂v_j) / (f m_j) en todos los nodos."""
    t = _graph_terms(curve, values)
    n = curve.n
    da = -(n - 1) * curve.rot / t["one_r"] - curve.kappa / t["one_k"] + 0.5 * (curve.xdotN + values)
    grad = np.exp(t["a"]) * da

    h = curve.h_mid
    den, d, g, s, k_bar = t["den"], t["d"], t["g"], t["s"], t["k_bar"]
    shared = d * (0.5 * k_bar) / den ** 2
    dg_left = -1.0 / (h * den) + shared          # ∂g_k/∂v_k
    dg_right = 1.0 / (h * den) + shared          # ∂g_k/∂v_{k+1}
    excess = g * g / (1.0 + s)
    scale = np.exp(t["a_bar"])
    dc_left = scale * (0.5 * da[:-1] * excess + (g / s) * dg_left)
    dc_right = scale * (0.5 * da[1:] * excess + (g / s) * dg_right)

    log_cell = curve.log_mu_mid + np.log(h)
    grad[:-1] += np.exp(log_cell - curve.log_mass[:-1]) * dc_left
    grad[1:] += np.exp(log_cell - curve.log_mass[1:]) * dc_right
    return grad


@lru_cache(maxsize=32)
def _base_gradient(curve: ProfileCurve) -> np.ndarray:
    """Gradiente en v = 0: menos el residuo discreto del expansor base."""
    grad = _raw_gradient(curve, np.zeros(curve.size))
    grad.setflags(write=False)
    return grad


def graph_energy(base, v) -> float:
    """E* sin corte: energía discreta menos su parte lineal en v = 0."""
    curve = _curve(base)
    values = as_values(v, curve)
    if not np.any(values):
        return 0.0
    return _raw_energy(curve, values) - weighted_inner(curve, _base_gradient(curve), values)


def gradient_N(base, v) -> GraphFunction:
    """
    Operador de Euler-Lagrange N_Σ(v): gradiente W de E*.
    Cero en los nodos Dirichlet.
    """
    curve = _curve(base)
    values = as_values(v, curve)
    out = _raw_gradient(curve, values) - _base_gradient(curve)
    out[~curve.active] = 0.0
    return GraphFunction(curve, out)


def _node_speed(curve: ProfileCurve, values: np.ndarray, a: np.ndarray) -> np.ndarray:
    """sqrt(1 + g²)·e^{-a} nodal, con g = v'/(1 - vκ)."""
    d1, _ = graph_derivatives(curve, values)
    g = d1 / (1.0 - values * curve.kappa)
    return np.sqrt(1.0 + g * g) * np.exp(-a)


def graph_velocity(base, v) -> np.ndarray:
    """F(v) = ∂_s v del flujo reescalado de grafos: -N·sqrt(1+g²)·e^{-a}."""
    curve = _curve(base)
    values = as_values(v, curve)
    if not np.any(values):
        return np.zeros(curve.size)
    n_values = gradient_N(curve, values).values
    a = _graph_terms(curve, values)["a"]
    out = -n_values * _node_speed(curve, values, a)
    out[~curve.active] = 0.0
    return out


def dissipation(base, v) -> float:
    """D(v) = f Σ m N² sqrt(1+g²) e^{-a} = -dE*/ds a lo largo del flujo."""
    curve = _curve(base)
    values = as_values(v, curve)
    if not np.any(values):
        return 0.0
    n_values = gradient_N(curve, values).values
    a = _graph_terms(curve, values)["a"]
    return weighted_sum(curve, n_values ** 2 * _node_speed(curve, values, a))


def pullback_residual(base, v) -> np.ndarray:
    """Residuo geométrico H - ½x·N de Σ_v leído en los nodos de Σ."""
    curve = _curve(base)
    return np.asarray(expander_residual(normal_graph(curve, v)).values)


def c2_proxy(curve: ProfileCurve, v) -> float:
    """max(|v|, |v'|, |v''|) sobre los nodos."""
    values = as_values(v, curve)
    d1, d2 = graph_derivatives(curve, values)
    return float(max(np.max(np.abs(values)), np.max(np.abs(d1)), np.max(np.abs(d2))))


def gradient_energy(curve: ProfileCurve, v) -> float:
    """∫|∇v|² w por diferencias en los puntos medios."""
    values = as_values(v, curve)
    d = np.diff(values) / curve.h_mid
    with np.errstate(divide="ignore"):
        logs = curve.log_mu_mid + np.log(curve.h_mid) + 2.0 * np.log(np.abs(d))
    return curve.fold * logspace_sum(logs, np.where(d != 0, 1.0, 0.0))


# ============================================================
# ENTROPÍA RELATIVA
# ============================================================

def relative_entropy(base, v, R_cut: Optional[float] = None, cauchy: bool = True) -> float:
    """
    E*_rel[Σ_{χ_R v}, Σ].

    Raises:
        PreconditionError: R_cut > R_max - 4
        EntropyError: el valor cambia respecto a R_cut - 2 (v decae demasiado lento)
    """
    curve = _curve(base)
    values = as_values(v, curve)
    radius = curve.radius
    limit = float(radius.max()) - CUTOFF_MARGIN
    R = limit if R_cut is None else float(R_cut)
    if R > limit + 1e-12:
        raise PreconditionError("R_cut debe ser <= R_max - 4", R_cut=R, limit=limit)
    value = graph_energy(curve, smooth_cutoff(radius, R) * values)
    if cauchy and R - CAUCHY_STEP > 0:
        previous = graph_energy(curve, smooth_cutoff(radius, R - CAUCHY_STEP) * values)
        change = abs(value - previous)
        if change > CAUCHY_TOL * abs(value) and change > 0:
            raise EntropyError("E*_rel no converge al aumentar el radio de corte",
                               R_cut=R, value=value, change=change)
    return value


def quadratic_entropy(base, v, op: Optional[StabilityOperator] = None) -> float:
    """-½⟨v, L_Σ v⟩_W."""
    curve = _curve(base)
    op = op or assemble_stability(curve)
    values = as_values(v, curve)
    return -0.5 * weighted_inner(curve, values, op.apply(values))


def quadratic_entropy_split(base, v) -> float:
    """½∫(|∇v|² + (½ - |A|²) v²) w, la misma forma cuadrática integrada por partes."""
    curve = _curve(base)
    values = as_values(v, curve)
    return 0.5 * (gradient_energy(curve, values) + weighted_sum(curve, (0.5 - curve.A2) * values ** 2))


@dataclass
class EntropyReport:
    E_star: float
    E_quadratic: float
    expansion_gap: float
    grad_norm: float
    lojasiewicz_ratio: float
    R_cut: float
    norm_W: float
    norm_W1: float
    c2_proxy: float
    C_gap: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def expansion_check(base, v, R_cut: Optional[float] = None,
                    op: Optional[StabilityOperator] = None) -> EntropyReport:
    """E* frente a su predicción cuadrática; el hueco debe ser cúbico."""
    curve = _curve(base)
    values = as_values(v, curve)
    limit = float(curve.radius.max()) - CUTOFF_MARGIN
    R = limit if R_cut is None else float(R_cut)
    u = smooth_cutoff(curve.radius, R) * values
    u[~curve.active] = 0.0
    E = relative_entropy(curve, values, R)
    Eq = quadratic_entropy(curve, u, op)
    gap = abs(E - Eq)
    grad = weighted_norm(curve, gradient_N(curve, u))
    norm_w = weighted_norm(curve, u)
    norm_w1 = math.sqrt(max(gradient_energy(curve, u), 0.0) + norm_w ** 2)
    proxy = c2_proxy(curve, u)
    scale = proxy * norm_w1 ** 2
    report = EntropyReport(
        E_star=E, E_quadratic=Eq, expansion_gap=gap, grad_norm=grad,
        lojasiewicz_ratio=math.sqrt(abs(E)) / grad if grad > 0 else 0.0,
        R_cut=R, norm_W=norm_w, norm_W1=norm_w1, c2_proxy=proxy,
        C_gap=gap / scale if scale > 0 else 0.0,
        passed=bool(gap <= C_GAP_BOUND * scale),
    )
    return report


def expansion_scaling(base, v, amplitudes: Sequence[float], R_cut: Optional[float] = None) -> float:
    """Exponente ajustado de gap(t) para v escalado por t."""
    curve = _curve(base)
    op = assemble_stability(curve)
    values = as_values(v, curve)
    gaps = [expansion_check(curve, t * values, R_cut, op).expansion_gap for t in amplitudes]
    return float(np.polyfit(np.log(amplitudes), np.log(gaps), 1)[0])


@dataclass
class PoincareReport:
    C1: float
    C2: float
    lhs: float
    rhs: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def reverse_poincare_check(base, v, R_cut: Optional[float] = None) -> PoincareReport:
    """E* >= C1 ∫|∇v|² w - C2 ∫ v² w."""
    curve = _curve(base)
    values = as_values(v, curve)
    limit = float(curve.radius.max()) - CUTOFF_MARGIN
    R = limit if R_cut is None else float(R_cut)
    u = smooth_cutoff(curve.radius, R) * values
    C2 = max(0.5, float(curve.A2.max())) + POINCARE_MARGIN
    lhs = relative_entropy(curve, values, R)
    rhs = POINCARE_C1 * gradient_energy(curve, u) - C2 * weighted_inner(curve, u, u)
    return PoincareReport(POINCARE_C1, C2, lhs, rhs, bool(lhs >= rhs))


# ============================================================
# ŁOJASIEWICZ
# ============================================================

@dataclass
class LojasiewiczReport:
    ratio: float
    bound: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def lojasiewicz_bound(spec: SpectralData) -> float:
    smallest = float(np.min(np.abs(spec.lambdas)))
    return LOJ_SAFETY * max(1.0, 1.0 / math.sqrt(smallest))


def lojasiewicz_ratio(base, spec: SpectralData, v, R_cut: Optional[float] = None) -> LojasiewiczReport:
    """
    |E*|^{1/2} / ‖N_Σ(v)‖_W frente a la constante de hueco espectral.

    Raises:
        PreconditionError: el espectro tiene nulidad (cono no genérico)
    """
    if spec.nullity > 0:
        raise PreconditionError("la desigualdad requiere nulidad cero", nullity=spec.nullity)
    curve = _curve(base)
    values = as_values(v, curve)
    limit = float(curve.radius.max()) - CUTOFF_MARGIN
    R = limit if R_cut is None else float(R_cut)
    u = smooth_cutoff(curve.radius, R) * values
    E = relative_entropy(curve, values, R)
    grad = weighted_norm(curve, gradient_N(curve, u))
    ratio = math.sqrt(abs(E)) / grad if grad > 0 else 0.0
    bound = lojasiewicz_bound(spec)
    return LojasiewiczReport(ratio, bound, bool(ratio <= bound))


def lojasiewicz_suite(base, spec: SpectralData, count: int = 50, amplitude: float = 1e-3,
                      modes: int = 4, seed: int = DEFAULT_SEED) -> Dict:
    """Máximo del cociente sobre mezclas aleatorias de los primeros modos."""
    rng = np.random.default_rng(seed)
    modes = min(modes, spec.modes)
    phis = np.array([spec.phi(i) for i in range(modes)])
    ratios = []
    for _ in range(count):
        weights = rng.standard_normal(modes)
        weights /= np.linalg.norm(weights)
        ratios.append(lojasiewicz_ratio(base, spec, amplitude * (weights @ phis)).ratio)
    bound = lojasiewicz_bound(spec)
    return {"seed": seed, "count": count, "amplitude": amplitude, "max_ratio": float(max(ratios)),
            "bound": bound, "passed": bool(max(ratios) <= bound)}


# ============================================================
# MONOTONÍA
# ============================================================

@dataclass
class MonotonicityReport:
    energies: List[float]
    increments: List[float]
    predicted: List[float]
    max_increase_rate: float
    identity_error: float
    max_energy: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def monotonicity_check(traj, rate_tol: float = 1e-8, identity_tol: float = 1e-2) -> MonotonicityReport:
    """
    Compara E*(s_{k+1}) - E*(s_k) con -∫ D ds (trapecio). Sin corte: los
    marcos del flujo se anulan en la truncación.
    """
    times = np.asarray(traj.times, dtype=float)
    if times.size < 3:
        raise PreconditionError("se necesitan al menos 3 marcos", frames=int(times.size))
    curve = traj.curve
    energies = np.array([graph_energy(curve, frame) for frame in traj.frames])
    dissip = np.array([dissipation(curve, frame) for frame in traj.frames])
    dt = np.diff(times)
    increments = np.diff(energies)
    predicted = -0.5 * dt * (dissip[1:] + dissip[:-1])
    rate = float(np.max(increments / dt))
    total_pred = float(np.sum(predicted))
    total = float(energies[-1] - energies[0])
    if total_pred == 0.0:
        identity = abs(total)
    else:
        identity = abs(total - total_pred) / abs(total_pred)
    passed = rate <= rate_tol and identity <= identity_tol
    if not passed:
        logger.warning("⚠️ Monotonía: tasa máxima %.3e, error de identidad %.3e", rate, identity)
    return MonotonicityReport(energies.tolist(), increments.tolist(), predicted.tolist(),
                              rate, identity, float(energies.max()), bool(passed))


# ============================================================
# COMPARACIÓN DE DEFINICIONES
# ============================================================

def ball_entropy(base, v, R: float) -> float:
    """∫_{Σ_v ∩ B_R} w - ∫_{Σ ∩ B_R} w por retroceso con indicadores nodales."""
    curve = _curve(base)
    values = as_values(v, curve)
    a = _graph_terms(curve, values)["a"]
    d1, _ = graph_derivatives(curve, values)
    log_j = a + 0.5 * np.log1p((d1 / (1.0 - values * curve.kappa)) ** 2)
    r2 = curve.radius ** 2
    inside = r2 < R * R
    inside_v = r2 + 2.0 * values * curve.xdotN + values ** 2 < R * R
    density = np.where(inside & inside_v, np.expm1(log_j),
                       np.where(inside_v, np.exp(log_j), np.where(inside, -1.0, 0.0)))
    return weighted_sum(curve, density)


def compare_entropy_definitions(base, v, R_list: Sequence[float]) -> List[Dict]:
    """Tabla R → (E_rel con bolas, E*_rel con corte del grafo, diferencia)."""
    curve = _curve(base)
    values = as_values(v, curve)
    rows = []
    for R in R_list:
        ball = ball_entropy(curve, values, R)
        graph = graph_energy(curve, smooth_cutoff(curve.radius, R) * values)
        rows.append({"R": float(R), "ball": ball, "graph": graph, "gap": abs(ball - graph)})
    return rows

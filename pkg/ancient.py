"""
ancient.py - Flujos antiguos domesticados que salen de un expansor inestable
============================================================================
Construye la familia de I parámetros de soluciones antiguas del flujo
reescalado por iteración de punto fijo sobre el problema lineal:

    v_0     = τ_-(a)
    v_{k+1} = solve_linear(a, F(v_k) - L_Σ v_k)

El término no lineal se evalúa geométricamente (entropy.graph_velocity) en
cada marco y en cada iteración; nunca se congela.

USO:
    params = AncientParams(a=(1e-3,), delta0=0.25)
    traj = construct_ancient(spec, params)
    beta = closeness_check(traj, spec, params).beta_empirical
"""

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from errors import ContractionError, PreconditionError
from geometry import GraphFunction, as_values, weighted_norm
from entropy import gradient_N, graph_velocity
from spectral import SpectralData, StabilityOperator
from duhamel import Trajectory, mode_data, phi_matrix, project_modes, solve_linear

logger = logging.getLogger(__name__)

S_BACK_CAP = 60.0
SMALLNESS = 1e-10           # ‖τ_-(a)‖ por debajo de esto es el expansor estático
DEFAULT_DS = 0.05
CONTRACTION_LIMIT = 1.0     # factor a partir de la segunda iteración
PI_MINUS_TOL = 1e-8


# ============================================================
# PARÁMETROS
# ============================================================

@dataclass(frozen=True)
class AncientParams:
    """Datos de la construcción: a ∈ R^I, peso temporal δ0 y horizonte."""
    a: Tuple[float, ...]
    delta0: Optional[float] = None      # por defecto ½·(-λ_I)
    beta: float = 1e3                   # objetivo de la constante de cercanía
    S_back: Optional[float] = None
    ds: float = DEFAULT_DS
    tol: float = 1e-12
    max_iter: int = 30
    eps: float = 1e-2                   # ‖a‖ <= ε

    def resolved(self, spec: SpectralData) -> "AncientParams":
        """Valida contra el espectro y fija δ0 y S_back."""
        if spec.index == 0:
            raise PreconditionError("el expansor es estable (I = 0): no hay flujos antiguos no triviales")
        if len(self.a) != spec.index:
            raise PreconditionError("len(a) debe ser el índice I", expected=spec.index, got=len(self.a))
        lam_i = -float(spec.lambdas[spec.index - 1])
        delta0 = 0.5 * lam_i if self.delta0 is None else float(self.delta0)
        if not 0 < delta0 < lam_i:
            raise PreconditionError("δ0 debe estar en (0, -λ_I)", delta0=delta0, upper=lam_i)
        norm_a = float(np.linalg.norm(self.a))
        if norm_a > self.eps:
            raise PreconditionError("‖a‖ supera ε", norm=norm_a, eps=self.eps)
        if self.ds <= 0 or self.tol <= 0 or self.max_iter < 1:
            raise PreconditionError("ds, tol y max_iter deben ser positivos")
        s_back = self.S_back
        if s_back is None:
            if norm_a == 0.0:
                s_back = 1.0
            else:
                s_back = min(S_BACK_CAP, math.log(norm_a / SMALLNESS) / (-float(spec.lambdas[0])))
        if s_back <= 0:
            raise PreconditionError("S_back debe ser positivo", S_back=s_back)
        return AncientParams(tuple(float(x) for x in self.a), delta0, self.beta, float(s_back),
                             self.ds, self.tol, self.max_iter, self.eps)

    def time_grid(self) -> np.ndarray:
        count = int(math.ceil(self.S_back / self.ds)) + 1
        return np.linspace(-self.S_back, 0.0, count)

    def to_dict(self) -> Dict:
        return asdict(self)


# ============================================================
# TÉRMINO NO LINEAL
# ============================================================

def evaluate_Q(base, v, op: StabilityOperator) -> GraphFunction:
    """
    Q(v) = N_Σ(v) + L_Σ v, con N_Σ(v) = -e^{a}·(residuo de Σ_v) como
    gradiente W de E*. Se anula en v = 0 y es cuadrático a primer orden.
    """
    curve = getattr(base, "curve", base)
    values = as_values(v, curve)
    out = gradient_N(curve, values).values + op.apply(values)
    out[~curve.active] = 0.0
    return GraphFunction(curve, out)


def nonlinearity(op: StabilityOperator, v) -> np.ndarray:
    """h(v) = F(v) - L_Σ v: lo que el flujo añade al problema lineal."""
    values = as_values(v, op.curve)
    out = graph_velocity(op.curve, values) - op.apply(values)
    out[~op.curve.active] = 0.0
    return out


def _frame_nonlinearity(op: StabilityOperator, frames: np.ndarray, threads: int) -> np.ndarray:
    if threads <= 1:
        return np.array([nonlinearity(op, f) for f in frames])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.array(list(pool.map(lambda f: nonlinearity(op, f), frames)))


def _weighted_sup(curve, times: np.ndarray, frames: np.ndarray, delta0: float) -> float:
    norms = np.array([weighted_norm(curve, f) for f in frames])
    return float(np.max(np.exp(-delta0 * times) * norms))


# ============================================================
# CONSTRUCCIÓN
# ============================================================

def construct_ancient(spec: SpectralData, params: AncientParams, threads: int = 1) -> Trajectory:
    """
    Punto fijo v ↦ solve_linear(a, h(v)) en s ∈ [-S_back, 0].

    Se detiene cuando sup_s e^{-δ0 s}‖v_{k+1} - v_k‖_W < tol.

    Raises:
        PreconditionError: I = 0, δ0 fuera de rango o ‖a‖ > ε
        ContractionError: la iteración no contrae (ε demasiado grande) o el
            punto fijo pierde la condición Π_- v(0) = Σ a_i φ_i
        GeometryError: un iterado intermedio no es un grafo admisible
    """
    params = params.resolved(spec)
    op = spec.operator
    curve = spec.curve
    times = params.time_grid()
    # δ: decaimiento de h ~ v², dominado por el modo inestable más lento
    data = mode_data(spec, params.a, -2.0 * float(spec.lambdas[spec.index - 1]))

    current = solve_linear(spec, data, times, None, "ancient")
    factors: List[float] = []
    diffs: List[float] = []
    logger.info("🔄 Construcción antigua: ‖a‖=%.3e S_back=%.2f marcos=%d",
                float(np.linalg.norm(params.a)), params.S_back, times.size)

    for iteration in range(1, params.max_iter + 1):
        h = _frame_nonlinearity(op, current.frames, threads)
        nxt = solve_linear(spec, data, times, h, "ancient")
        diff = _weighted_sup(curve, times, nxt.frames - current.frames, params.delta0)
        if diffs and diffs[-1] > 0:
            factors.append(diff / diffs[-1])
        diffs.append(diff)
        current = nxt
        logger.info("🔄 Iteración %d: sup e^{-δ0 s}‖Δv‖ = %.3e", iteration, diff)
        if diff < params.tol:
            break
        if len(factors) >= 2 and factors[-1] >= CONTRACTION_LIMIT:
            raise ContractionError("la iteración de punto fijo no contrae",
                                   factors=factors, norm_a=float(np.linalg.norm(params.a)))
    else:
        raise ContractionError("sin convergencia tras max_iter iteraciones",
                               factors=factors, iterations=params.max_iter)

    current.metadata.update({
        "delta0": params.delta0,
        "iterations": len(diffs),
        "contraction_factors": factors,
        "fixed_point_residual": diffs[-1],
        "eps": params.eps,
    })
    coeffs, _ = project_modes(current.frames[-1], spec)
    mismatch = float(np.max(np.abs(coeffs[:spec.index] - np.asarray(params.a))))
    current.metadata["pi_minus_error"] = mismatch
    if mismatch > PI_MINUS_TOL:
        raise ContractionError("Π_- v(0) no reproduce los datos a", mismatch=mismatch,
                               tolerance=PI_MINUS_TOL)
    logger.info("✅ Flujo antiguo construido en %d iteraciones", len(diffs))
    return current


# ============================================================
# COMPROBACIONES
# ============================================================

@dataclass
class ClosenessReport:
    beta_empirical: float
    delta0: float
    iterations: int
    contraction_factors: List[float] = field(default_factory=list)
    passed: bool = True

    def to_dict(self):
        return asdict(self)


def tau_frames(spec: SpectralData, a: Sequence[float], times: np.ndarray) -> np.ndarray:
    """τ_-(a) evaluada en cada tiempo (marcos × nodos)."""
    weights = np.asarray(a, dtype=float)[None, :] * np.exp(-np.outer(times, spec.lambdas[:spec.index]))
    return weights @ phi_matrix(spec)[:spec.index]


def closeness_check(traj: Trajectory, spec: SpectralData, params: AncientParams) -> ClosenessReport:
    """β_emp = sup_s e^{-δ0 s}‖v - τ_-(a)‖_W / Σ a_i²; 0 por convenio si a = 0."""
    params = params.resolved(spec)
    a = np.asarray(params.a)
    iterations = int(traj.metadata.get("iterations", 0))
    factors = list(traj.metadata.get("contraction_factors", []))
    total = float(np.sum(a * a))
    if total == 0.0:
        return ClosenessReport(0.0, params.delta0, iterations, factors, True)
    gap = traj.frames - tau_frames(spec, a, traj.times)
    beta = _weighted_sup(traj.curve, traj.times, gap, params.delta0) / total
    passed = bool(np.isfinite(beta) and beta <= params.beta)
    return ClosenessReport(beta, params.delta0, iterations, factors, passed)


def distinctness_check(traj_a: Trajectory, traj_b: Trajectory) -> Dict:
    """‖v_a(0) - v_b(0)‖_W >= ½‖a - b‖ para dos miembros de la familia."""
    a = np.asarray(traj_a.metadata["a"], dtype=float)
    b = np.asarray(traj_b.metadata["a"], dtype=float)
    distance = weighted_norm(traj_a.curve, traj_a.frames[-1] - traj_b.frames[-1])
    bound = 0.5 * float(np.linalg.norm(a - b))
    return {"distance": distance, "bound": bound, "passed": bool(distance >= bound)}


def translation_match(traj_a: Trajectory, traj_b: Trajectory, spec: SpectralData) -> Dict:
    """
    Dos flujos unilaterales del mismo signo y amplitudes a > b coinciden
    salvo traslación temporal: v_a(s + shift) ≈ v_b(s) con
    shift ≈ log(b/a)/(-λ_1) < 0.
    """
    a = float(traj_a.metadata["a"][0])
    b = float(traj_b.metadata["a"][0])
    if a * b <= 0 or abs(b) >= abs(a):
        raise PreconditionError("se requieren amplitudes del mismo signo con |a| > |b|", a=a, b=b)
    coeff_a = np.array([project_modes(f, spec)[0][0] for f in traj_a.frames])
    spline = CubicSpline(traj_a.times, coeff_a - b)
    shift = float(brentq(spline, traj_a.times[0], 0.0, xtol=1e-12))
    expected = math.log(b / a) / (-float(spec.lambdas[0]))

    frames_a = CubicSpline(traj_a.times, traj_a.frames, axis=0)
    window = traj_b.times[traj_b.times + shift >= traj_a.times[0]]
    if window.size == 0:
        raise PreconditionError("sin ventana común tras la traslación", shift=shift)
    relative = 0.0
    for s in window:
        vb = traj_b.frames[traj_b.index_of(s)]
        scale = weighted_norm(traj_b.curve, vb)
        if scale > 0:
            relative = max(relative, weighted_norm(traj_b.curve, frames_a(s + shift) - vb) / scale)
    return {"shift": shift, "expected_shift": expected, "relative_distance": relative,
            "window": [float(window[0]), float(window[-1])]}


def backward_rate(traj: Trajectory, fraction: float = 0.5) -> float:
    """Exponente del ajuste log-lineal de ‖v(·, s)‖_W en la mitad antigua."""
    norms = traj.norms()
    keep = (traj.times <= traj.times[0] * (1.0 - fraction)) & (norms > 0)
    if keep.sum() < 3:
        raise PreconditionError("ventana de ajuste demasiado pequeña", frames=int(keep.sum()))
    return float(np.polyfit(traj.times[keep], np.log(norms[keep]), 1)[0])

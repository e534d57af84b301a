"""
duhamel.py - Problema lineal ∂_s v = L_Σ v + h en (-∞, 0] por modos
===================================================================
Cada coeficiente u_i = ⟨v, φ_i⟩_W cumple u_i' = -λ_i u_i + h_i. Los modos
inestables (i <= I) se integran hacia atrás desde u_i(0) = a_i; el resto
hacia adelante desde -∞ con una cola exponencial analítica. En cada panel
h_i se interpola linealmente y la convolución con e^{-λ(s-σ)} se integra
exactamente (integrador exponencial), de modo que la rigidez de los modos
altos no limita el paso.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import exprel

from errors import PreconditionError, StiffnessError
from geometry import ProfileCurve, GraphFunction, as_values, from_liouville, liouville, weighted_norm
from spectral import SpectralData, StabilityOperator, liouville_matrix

logger = logging.getLogger(__name__)

STIFFNESS_LIMIT = 20.0          # λ_max·Δs máximo por panel
DELTA_PRIME_FACTOR = 0.9
PROVENANCES = ("duhamel", "ancient", "flow")


# ============================================================
# TIPOS
# ============================================================

@dataclass(eq=False)
class Trajectory:
    """Marcos v(·, s_k) sobre un perfil fijo, con coeficientes modales opcionales."""
    curve: ProfileCurve
    times: np.ndarray
    frames: np.ndarray                      # (K, nodos)
    provenance: str = "duhamel"
    coefficients: Optional[np.ndarray] = None   # (K, modos)
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=float))
        if self.times.ndim != 1 or self.times.size == 0:
            raise PreconditionError("la trayectoria necesita al menos un tiempo")
        if np.any(np.diff(self.times) <= 0):
            raise PreconditionError("los tiempos deben ser estrictamente crecientes")
        if self.frames.shape != (self.times.size, self.curve.size):
            raise PreconditionError("marcos incompatibles con la malla",
                                    shape=list(self.frames.shape), nodes=self.curve.size)
        if self.provenance not in PROVENANCES:
            raise PreconditionError("procedencia desconocida", provenance=self.provenance)

    def __len__(self):
        return int(self.times.size)

    def frame(self, k: int) -> GraphFunction:
        return GraphFunction(self.curve, self.frames[k])

    def index_of(self, s: float) -> int:
        return int(np.argmin(np.abs(self.times - s)))

    def norms(self) -> np.ndarray:
        return np.array([weighted_norm(self.curve, f) for f in self.frames])

    def with_coefficients(self, spec: SpectralData) -> "Trajectory":
        coeffs = np.array([project_modes(f, spec)[0] for f in self.frames])
        return Trajectory(self.curve, self.times, self.frames, self.provenance, coeffs,
                          dict(self.metadata))

    def slice(self, start: int, stop: Optional[int] = None) -> "Trajectory":
        coeffs = None if self.coefficients is None else self.coefficients[start:stop]
        return Trajectory(self.curve, self.times[start:stop], self.frames[start:stop],
                          self.provenance, coeffs, dict(self.metadata))


@dataclass(frozen=True)
class ModeData:
    """Datos de los modos negativos y tasas de decaimiento de h."""
    a: Tuple[float, ...]
    delta: float
    delta_prime: float

    def validate(self, spec: SpectralData) -> "ModeData":
        if len(self.a) != spec.index:
            raise PreconditionError("len(a) debe ser el índice I", expected=spec.index, got=len(self.a))
        upper = min(self.delta, -float(spec.lambdas[spec.index - 1])) if spec.index else self.delta
        if not 0 < self.delta_prime < upper:
            raise PreconditionError("ventana δ' vacía: se requiere 0 < δ' < min(δ, -λ_I)",
                                    delta=self.delta, delta_prime=self.delta_prime, upper=upper)
        return self


def mode_data(spec: SpectralData, a: Sequence[float], delta: float) -> ModeData:
    """ModeData con δ' = 0.9·min(δ, -λ_I)."""
    upper = min(delta, -float(spec.lambdas[spec.index - 1])) if spec.index else delta
    return ModeData(tuple(float(x) for x in a), float(delta), DELTA_PRIME_FACTOR * upper).validate(spec)


def phi_matrix(spec: SpectralData) -> np.ndarray:
    """(modos × nodos) con φ_i en cada fila."""
    return from_liouville(spec.curve, liouville_matrix(spec).T)


# ============================================================
# OPERACIONES
# ============================================================

def project_modes(v, spec: SpectralData) -> Tuple[np.ndarray, float]:
    """c_i = ⟨v, φ_i⟩_W y ‖v - Σ c_i φ_i‖_W (componente no resuelta)."""
    psi = liouville(spec.curve, as_values(v, spec.curve))
    basis = liouville_matrix(spec)
    coeffs = basis.T @ psi
    rest = psi - basis @ coeffs
    return coeffs, float(np.linalg.norm(rest))


def tau_minus(spec: SpectralData, a: Sequence[float], s: float) -> GraphFunction:
    """
    τ_-(a)(s) = Σ_{i<=I} a_i e^{-λ_i s} φ_i.

    Raises:
        PreconditionError: I = 0, len(a) != I o s > 0
    """
    if spec.index == 0:
        raise PreconditionError("τ_- no está definido para un expansor estable (I = 0)")
    if len(a) != spec.index:
        raise PreconditionError("len(a) debe ser el índice I", expected=spec.index, got=len(a))
    if s > 0:
        raise PreconditionError("s debe ser <= 0", s=s)
    weights = np.asarray(a, dtype=float) * np.exp(-spec.lambdas[:spec.index] * s)
    return GraphFunction(spec.curve, weights @ phi_matrix(spec)[:spec.index])


def _panel_d(x: np.ndarray) -> np.ndarray:
    """D(x) = ∫_0^1 t e^{xt} dt, con serie cerca de 0."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 0.1
    xs = x[small]
    term = np.full_like(xs, 0.5)
    total = term.copy()
    for k in range(1, 14):
        term = term * xs * (k + 1) / (k * (k + 2))
        total = total + term
    out[small] = total
    xb = x[~small]
    out[~small] = (xb * np.exp(xb) - np.expm1(xb)) / (xb * xb)
    return out


def solve_linear(spec: SpectralData, data: ModeData, times: Sequence[float],
                 h: Optional[np.ndarray] = None, provenance: str = "duhamel") -> Trajectory:
    """
    Solución única del problema lineal con Π_- v(·, 0) = Σ a_i φ_i.

    Args:
        spec: espectro de -L_Σ (los modos calculados forman la base)
        data: a ∈ R^I y tasas δ, δ'
        times: malla creciente que termina en s = 0
        h: inhomogeneidad nodal (len(times) × nodos) o None

    Raises:
        StiffnessError: λ_max·Δs > 20 en algún panel
    """
    data.validate(spec)
    times = np.asarray(times, dtype=float)
    if times.size < 2 or np.any(np.diff(times) <= 0):
        raise PreconditionError("malla temporal inválida")
    if spec.index and times[-1] != 0.0:
        raise PreconditionError("la malla debe terminar en s = 0", end=float(times[-1]))
    steps = np.diff(times)
    stiffness = float(spec.lambdas[-1] * steps.max())
    if stiffness > STIFFNESS_LIMIT:
        raise StiffnessError("malla temporal demasiado gruesa para el modo más rígido",
                             lambda_max=float(spec.lambdas[-1]), ds=float(steps.max()))

    curve = spec.curve
    count, modes = times.size, spec.modes
    lam = np.asarray(spec.lambdas, dtype=float)
    if h is None:
        h_modes = np.zeros((modes, count))
    else:
        h = np.asarray(h, dtype=float)
        if h.shape != (count, curve.size):
            raise PreconditionError("h incompatible con la malla", shape=list(h.shape))
        h_modes = liouville_matrix(spec).T @ liouville(curve, h).T

    u = np.zeros((modes, count))
    unstable = spec.index
    # modos estables y neutros: desde -∞ con cola e^{δ(σ - s_0)}
    fwd = slice(unstable, modes)
    u[fwd, 0] = h_modes[fwd, 0] / (lam[fwd] + data.delta)
    for k in range(count - 1):
        x = -lam[fwd] * steps[k]
        w_old = steps[k] * _panel_d(x)
        w_new = steps[k] * (exprel(x) - _panel_d(x))
        u[fwd, k + 1] = np.exp(x) * u[fwd, k] + w_old * h_modes[fwd, k] + w_new * h_modes[fwd, k + 1]
    # modos inestables: hacia atrás desde u(0) = a
    if unstable:
        bwd = slice(0, unstable)
        u[bwd, -1] = np.asarray(data.a)
        for k in range(count - 2, -1, -1):
            z = lam[bwd] * steps[k]
            w_old = steps[k] * (exprel(z) - _panel_d(z))
            w_new = steps[k] * _panel_d(z)
            u[bwd, k] = np.exp(z) * u[bwd, k + 1] - w_old * h_modes[bwd, k] - w_new * h_modes[bwd, k + 1]

    frames = u.T @ phi_matrix(spec)
    traj = Trajectory(curve, times, frames, provenance, u.T.copy(),
                      {"S_back": float(-times[0]), "delta": data.delta,
                       "delta_prime": data.delta_prime, "modes": modes,
                       "a": list(data.a)})
    traj.metadata["decay_estimate"] = _decay_estimate(spec, data, traj, h_modes)
    return traj


def _decay_estimate(spec: SpectralData, data: ModeData, traj: Trajectory, h_modes: np.ndarray) -> Dict:
    """sup e^{-δ's}‖v - τ_-(a)‖_W frente a (∫ e^{-2δσ}‖h‖²_W dσ)^{1/2}."""
    u = traj.coefficients.T.copy()
    if spec.index:
        u[:spec.index] -= np.outer(np.asarray(data.a), np.ones(traj.times.size)) \
            * np.exp(-np.outer(spec.lambdas[:spec.index], traj.times))
    lhs = float(np.max(np.exp(-data.delta_prime * traj.times) * np.linalg.norm(u, axis=0)))
    h_norm2 = np.sum(h_modes ** 2, axis=0)
    rhs = math.sqrt(max(float(trapezoid(np.exp(-2.0 * data.delta * traj.times) * h_norm2, traj.times)), 0.0))
    return {"lhs": lhs, "rhs": rhs, "C_empirical": lhs / rhs if rhs > 0 else 0.0}


@dataclass
class ResidualReport:
    residuals: np.ndarray
    tolerance: float
    worst_time: float
    passed: bool

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max()) if self.residuals.size else 0.0

    def to_dict(self):
        return {"max_residual": self.max_residual, "tolerance": self.tolerance,
                "worst_time": self.worst_time, "passed": self.passed}


def verify_linear_residual(traj: Trajectory, op: StabilityOperator,
                           h: Optional[np.ndarray] = None) -> ResidualReport:
    """
    ‖∂_s v - L_Σ v - h‖_W en los tiempos interiores (diferencias centradas).
    PASS si el máximo es <= 10·(Δs² + h²)·max(1, ‖v‖_W).
    """
    curve = traj.curve
    times, frames = traj.times, traj.frames
    if times.size < 3:
        raise PreconditionError("se necesitan al menos 3 marcos", frames=int(times.size))
    forcing = np.zeros_like(frames) if h is None else np.asarray(h, dtype=float)
    residuals = np.empty(times.size - 2)
    for k in range(1, times.size - 1):
        dv = (frames[k + 1] - frames[k - 1]) / (times[k + 1] - times[k - 1])
        r = dv - op.apply(frames[k]) - forcing[k]
        r[~curve.active] = 0.0
        residuals[k - 1] = weighted_norm(curve, r)
    scale = max(1.0, float(traj.norms().max()))
    tol = 10.0 * (float(np.diff(times).max()) ** 2 + float(curve.h_mid.max()) ** 2) * scale
    worst = int(np.argmax(residuals)) + 1
    return ResidualReport(residuals, tol, float(times[worst]), bool(residuals.max() <= tol))

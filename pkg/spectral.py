"""
spectral.py - Operador de estabilidad y espectro en el espacio W
================================================================
Ensambla L_Σ v = μ^{-1}(μ v')' + (|A|² - ½) v, μ = J e^{|x|²/4}, en forma de
volúmenes finitos sobre el perfil y resuelve -L_Σ φ = λ φ tras la
transformación de Liouville ψ = sqrt(masa)·φ, que convierte el problema
ponderado en uno tridiagonal simétrico con entradas O(1/h²).

Extremos truncados: Dirichlet. Eje y plano de simetría: reflexión par.
El índice es equivariante (solo variaciones de rotación, pares respecto al
reflejo cuando el perfil está reflejado).
"""

import math
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, eigh_tridiagonal, solve_banded
from scipy.sparse import diags
from scipy.sparse.linalg import LinearOperator, lobpcg

from config import GRID_H, R_MAX, TOL_ZERO
from errors import PreconditionError, SpectralAmbiguityWarning, SpectralError
from geometry import (ConeSpec, ProfileCurve, GraphFunction, as_values, from_liouville, liouville,
                      weighted_inner)
from expander_solver import ExpanderProfile, as_expander, neck_scan, shoot_neck

logger = logging.getLogger(__name__)

DEFAULT_MODES = 12
DECAY_MARGIN = 2.0          # holgura en log para verify_decay
DECAY_EDGE = 2.0            # unidades excluidas junto a la truncación


# ============================================================
# OPERADOR
# ============================================================

@dataclass(frozen=True, eq=False)
class StabilityOperator:
    """
    -L_Σ en forma de Liouville sobre los nodos activos.

    diag/off son las bandas de S = M^{-1/2} K M^{-1/2}, donde K es la
    matriz de rigidez y M la diagonal de masas; flux_scaled[k] es
    μ_{k+½}/h_{k+½} dividido por la masa de cada nodo vecino.
    """
    curve: ProfileCurve
    diag: np.ndarray
    off: np.ndarray
    index: np.ndarray           # nodos activos
    flux_left: np.ndarray       # μ_{j-½}/(h m_j), 0 en el primer nodo
    flux_right: np.ndarray      # μ_{j+½}/(h m_j), 0 en el último nodo
    potential: np.ndarray       # |A|² - ½

    @property
    def size(self) -> int:
        return int(self.index.size)

    def apply(self, v) -> np.ndarray:
        """L_Σ v nodal (sin transformar); nulo en los nodos Dirichlet."""
        values = np.asarray(as_values(v, self.curve), dtype=float)
        out = np.zeros_like(values)
        left = np.zeros_like(values)
        right = np.zeros_like(values)
        left[1:] = values[:-1] - values[1:]
        right[:-1] = values[1:] - values[:-1]
        full = self.flux_left * left + self.flux_right * right + self.potential * values
        out[self.index] = full[self.index]
        return out

    def banded(self, ds: float) -> np.ndarray:
        """Matriz (I + ds·S) en formato de bandas (1, 1) para solve_banded."""
        ab = np.zeros((3, self.size))
        ab[0, 1:] = ds * self.off
        ab[1] = 1.0 + ds * self.diag
        ab[2, :-1] = ds * self.off
        return ab

    def implicit_solve(self, rhs_psi: np.ndarray, ds: float) -> np.ndarray:
        """Resuelve (I + ds·S) ψ = rhs sobre los nodos activos."""
        return solve_banded((1, 1), self.banded(ds), rhs_psi)

    def matrix(self):
        return diags([self.off, self.diag, self.off], [-1, 0, 1], format="csr")


def assemble_stability(base) -> StabilityOperator:
    """
    Ensambla el operador de estabilidad de un perfil (o ExpanderProfile).

    Todas las razones μ/masa se forman como diferencias de logaritmos, de
    modo que ninguna entrada contiene el peso e^{|x|²/4}.
    """
    curve: ProfileCurve = getattr(base, "curve", base)
    log_flux = curve.log_mu_mid - np.log(curve.h_mid)
    size = curve.size

    flux_left = np.zeros(size)
    flux_right = np.zeros(size)
    flux_left[1:] = np.exp(log_flux - curve.log_mass[1:])
    flux_right[:-1] = np.exp(log_flux - curve.log_mass[:-1])
    potential = curve.A2 - 0.5

    index = np.flatnonzero(curve.active)
    diag_full = flux_left + flux_right - potential
    off_full = -np.exp(log_flux - 0.5 * (curve.log_mass[1:] + curve.log_mass[:-1]))

    diag = diag_full[index]
    # acoplamientos entre nodos activos consecutivos
    off = off_full[index[:-1]]
    if not (np.all(np.isfinite(diag)) and np.all(np.isfinite(off))):
        raise SpectralError("entradas no finitas en el operador de estabilidad")
    for arr in (diag, off, index, flux_left, flux_right, potential):
        arr.setflags(write=False)
    return StabilityOperator(curve, diag, off, index, flux_left, flux_right, potential)


# ============================================================
# ESPECTRO
# ============================================================

@dataclass(frozen=True, eq=False)
class SpectralData:
    """Autopares de -L_Σ ordenados, W-ortonormales."""
    operator: StabilityOperator
    lambdas: np.ndarray
    psi: np.ndarray             # autovectores de Liouville (nodos activos × modos)
    tol_zero: float = TOL_ZERO
    index: int = field(init=False)
    nullity: int = field(init=False)

    def __post_init__(self):
        index, nullity = _count(self.lambdas, self.tol_zero)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "nullity", nullity)

    @property
    def curve(self) -> ProfileCurve:
        return self.operator.curve

    @property
    def modes(self) -> int:
        return int(self.lambdas.size)

    @property
    def generic(self) -> bool:
        return self.nullity == 0

    def phi(self, i: int) -> np.ndarray:
        """φ_i (índice desde 0) en todos los nodos."""
        psi = np.zeros(self.curve.size)
        psi[self.operator.index] = self.psi[:, i]
        return from_liouville(self.curve, psi)

    def phis(self) -> List[GraphFunction]:
        return [GraphFunction(self.curve, self.phi(i)) for i in range(self.modes)]

    def with_tolerance(self, tol_zero: float) -> "SpectralData":
        return SpectralData(self.operator, self.lambdas, self.psi, tol_zero)

    def truncated(self, modes: int) -> "SpectralData":
        return SpectralData(self.operator, self.lambdas[:modes], self.psi[:, :modes], self.tol_zero)

    def to_dict(self) -> Dict:
        return {"lambdas": [float(x) for x in self.lambdas], "index": self.index,
                "nullity": self.nullity, "tol_zero": self.tol_zero, "generic": self.generic,
                "modes": self.modes}


def _count(lambdas: np.ndarray, tol_zero: float) -> Tuple[int, int]:
    return int(np.sum(lambdas < -tol_zero)), int(np.sum(np.abs(lambdas) <= tol_zero))


def eigensolve(op: StabilityOperator, modes: int = DEFAULT_MODES,
               tol_zero: float = TOL_ZERO) -> SpectralData:
    """
    Los `modes` autopares más bajos de -L_Σ (tridiagonal, selección por índice).

    Raises:
        SpectralError: si LAPACK no converge o hay menos nodos que modos
    """
    if modes < 1 or modes > op.size:
        raise SpectralError("número de modos fuera de rango", modes=modes, nodes=op.size)
    try:
        lambdas, psi = eigh_tridiagonal(op.diag, op.off, select="i", select_range=(0, modes - 1))
    except (LinAlgError, ValueError) as exc:
        raise SpectralError("el autosolver tridiagonal no convergió", reason=str(exc))
    # φ_1 positivo
    for i in range(psi.shape[1]):
        pivot = int(np.argmax(np.abs(psi[:, i])))
        if psi[pivot, i] < 0:
            psi[:, i] = -psi[:, i]
    lambdas.setflags(write=False)
    psi.setflags(write=False)
    spec = SpectralData(op, lambdas, psi, tol_zero)
    logger.info("✅ Espectro: λ1=%.6f I=%d K=%d (%d modos)", lambdas[0], spec.index,
                spec.nullity, modes)
    return spec


def index_nullity(spec: SpectralData, tol_zero: Optional[float] = None) -> Tuple[int, int]:
    """
    (I, K) al umbral dado; advierte si algún |λ| cae en [tol/10, 10·tol].
    """
    tol = spec.tol_zero if tol_zero is None else tol_zero
    near = np.flatnonzero((np.abs(spec.lambdas) >= tol / 10.0) & (np.abs(spec.lambdas) <= 10.0 * tol))
    if near.size:
        warnings.warn(f"autovalor λ_{int(near[0]) + 1}={spec.lambdas[near[0]]:.3e} a menos de 10x "
                      f"de tol_zero={tol:.1e}", SpectralAmbiguityWarning, stacklevel=2)
        logger.warning("⚠️ Clasificación de índice inestable cerca de tol_zero=%.1e", tol)
    index, nullity = _count(spec.lambdas, tol)
    if index + nullity >= spec.modes:
        logger.warning("⚠️ I + K alcanza el número de modos calculados (%d)", spec.modes)
    return index, nullity


def eigen_residual(spec: SpectralData, i: int) -> float:
    """‖(-L_Σ - λ_i) φ_i‖_W."""
    phi = spec.phi(i)
    residual = -spec.operator.apply(phi) - spec.lambdas[i] * phi
    residual[~spec.curve.active] = 0.0
    return math.sqrt(max(weighted_inner(spec.curve, residual, residual), 0.0))


def rayleigh_quotient(op: StabilityOperator, v) -> float:
    values = as_values(v, op.curve)
    return -weighted_inner(op.curve, values, op.apply(values)) / weighted_inner(op.curve, values, values)


def rayleigh_minimize(op: StabilityOperator, seed: int = 0, tol: float = 1e-10,
                      maxiter: int = 500) -> float:
    """
    Mínimo del cociente de Rayleigh por LOBPCG con precondicionador de
    bandas (I·shift + S)^{-1}; verificación independiente de λ_1.
    """
    rng = np.random.default_rng(seed)
    matrix = op.matrix()
    gersh = op.diag - np.abs(np.concatenate([[0.0], op.off])) - np.abs(np.concatenate([op.off, [0.0]]))
    shift = max(0.0, -float(gersh.min())) + 1.0
    ab = op.banded(1.0)
    ab[1] += shift - 1.0
    precond = LinearOperator((op.size, op.size), matvec=lambda x: solve_banded((1, 1), ab, x),
                             dtype=float)
    x0 = rng.standard_normal((op.size, 2))
    values, _ = lobpcg(matrix, x0, M=precond, largest=False, tol=tol, maxiter=maxiter)
    return float(np.min(values))


# ============================================================
# DECAIMIENTO
# ============================================================

@dataclass
class DecayReport:
    beta: float
    passed: bool
    envelope_max: float
    inner_value: float
    window: Tuple[float, float]

    def to_dict(self):
        return {"beta": self.beta, "passed": self.passed, "envelope_max": self.envelope_max,
                "inner_value": self.inner_value, "window": list(self.window)}


def verify_decay(phi, beta: float, curve: Optional[ProfileCurve] = None) -> DecayReport:
    """
    Envolvente g = log|φ| + (β/2)|x|² sobre la mitad exterior del perfil,
    excluyendo las últimas unidades junto a la truncación. PASS si
    max g <= g(borde interior) + margen.
    """
    if not 0 < beta < 0.5:
        raise PreconditionError("β debe estar en (0, ½)", beta=beta)
    if isinstance(phi, GraphFunction):
        curve, values = phi.base, np.asarray(phi.values)
    else:
        values = as_values(phi, curve)
    radius = curve.radius
    r_end = float(radius.max())
    lo, hi = 0.5 * r_end, r_end - DECAY_EDGE
    window = np.flatnonzero((radius >= lo) & (radius <= hi))
    with np.errstate(divide="ignore"):
        g = np.log(np.abs(values[window])) + 0.5 * beta * radius[window] ** 2
    inner = float(g[np.argmin(radius[window])])
    top = float(np.max(g))
    return DecayReport(beta, bool(top <= inner + DECAY_MARGIN), top, inner, (lo, hi))


def liouville_matrix(spec: SpectralData) -> np.ndarray:
    """Ψ extendida a todos los nodos (ceros en Dirichlet)."""
    full = np.zeros((spec.curve.size, spec.modes))
    full[spec.operator.index] = spec.psi
    return full


def liouville_vector(spec: SpectralData, v) -> np.ndarray:
    return liouville(spec.curve, as_values(v, spec.curve))


# ============================================================
# EXPANSORES INESTABLES
# ============================================================

def unstable_neck(n: int = 2, h: float = GRID_H, r_max: float = R_MAX,
                  modes: int = 40, tol_zero: float = TOL_ZERO) -> Tuple[ExpanderProfile, SpectralData]:
    """
    Un cuello con índice I >= 1 tomado de la malla de radios de la rama
    conexa. Se prueban primero los cuellos más finos que el del máximo de
    pendiente y después los más anchos.

    Raises:
        SpectralError: ningún cuello de la malla es inestable
    """
    scan = [(r, m) for r, m in neck_scan(n, h, r_max) if math.isfinite(m)]
    if not scan:
        raise SpectralError("la rama conexa está vacía", n=n)
    peak = int(np.argmax([m for _, m in scan]))
    order = [k for k in (peak - 2, peak - 4, peak + 2, peak + 4) if 0 <= k < len(scan)]
    for k in order:
        r0 = scan[k][0]
        profile = as_expander(shoot_neck(ConeSpec(n, 0.0), r0, h, r_max), "connected-neck", r0)
        spec = eigensolve(assemble_stability(profile), modes, tol_zero)
        if spec.index >= 1:
            logger.info("✅ Cuello inestable: r0=%.4f pendiente=%.4f λ1=%.4f", r0,
                        profile.cone.slope, spec.lambdas[0])
            return profile, spec
    raise SpectralError("ningún cuello de la malla es inestable", tried=[scan[k][0] for k in order])

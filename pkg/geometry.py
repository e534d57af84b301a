"""
geometry.py - Curvas de perfil de hipersuperficies de rotación
==============================================================
Una hipersuperficie de rotación en R^{n+1} se representa por su curva de
perfil en el plano (q, p): q es la distancia al eje y p la altura.

CONVENCIONES:
    T = (cos θ, sin θ),  N = (-sin θ, cos θ),  κ = dθ/dσ
    H = κ + (n-1) sin θ / q          (en el eje: H = n κ)
    |A|² = κ² + (n-1) (sin θ / q)²
    x·N = p cos θ - q sin θ
    log_weight = |x|² / 4

Con estas convenciones una esfera de radio ρ recorrida desde el polo tiene
H = -n/ρ y x·N = ρ. Todas las sumas ponderadas por e^{|x|²/4} se hacen en
espacio logarítmico con suma compensada.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline
from scipy.spatial.distance import directed_hausdorff
from scipy.special import gammaln

from config import GRID_H, FIT_FRACTION
from errors import GeometryError, PreconditionError

logger = logging.getLogger(__name__)

ENDPOINT_KINDS = ("axis", "symmetric", "truncated")
ORIENTATIONS = ("upper", "lower", "both")

AXIS_SLOPE_TOL = 1e-4       # |w'(0)| admitido en radial_graph
CONE_BEND_TOL = 0.05        # |θ'|·|x| máximo en la ventana de ajuste
CONE_FIT_TOL = 1e-3         # residuo relativo máximo del ajuste cónico

ArrayLike = Union[np.ndarray, float, "GraphFunction"]


def log_sphere_area(n: int) -> float:
    """log |S^{n-1}| = log(2 π^{n/2} / Γ(n/2))."""
    return math.log(2.0) + 0.5 * n * math.log(math.pi) - float(gammaln(0.5 * n))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


# ============================================================
# TIPOS
# ============================================================

@dataclass(frozen=True)
class ConeSpec:
    """Doble cono {x_{n+1} = ±m|y|}; slope = 0 es el hiperplano degenerado."""
    n: int
    slope: float
    orientation: str = "both"

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise GeometryError("n debe ser un entero >= 2", n=self.n)
        if not math.isfinite(self.slope) or self.slope < 0:
            raise GeometryError("la pendiente debe ser finita y no negativa", slope=self.slope)
        if self.orientation not in ORIENTATIONS:
            raise GeometryError("orientación desconocida", orientation=self.orientation)

    @property
    def degenerate(self) -> bool:
        return self.slope == 0.0

    def to_dict(self):
        return {"n": int(self.n), "slope": float(self.slope), "orientation": self.orientation}


@dataclass(frozen=True, eq=False)
class ProfileCurve:
    """
    Perfil inmutable con la geometría por nodo ya calculada.

    El campo `reflected` indica que la hipersuperficie completa es el perfil
    más su reflejo en {p = 0}; las cuadraturas se multiplican entonces por 2.
    """
    n: int
    sigma: np.ndarray
    q: np.ndarray
    p: np.ndarray
    theta: np.ndarray
    kappa: np.ndarray
    start_kind: str = "axis"
    end_kind: str = "truncated"
    reflected: bool = False

    rot: np.ndarray = field(init=False, repr=False)
    H: np.ndarray = field(init=False, repr=False)
    xdotN: np.ndarray = field(init=False, repr=False)
    A2: np.ndarray = field(init=False, repr=False)
    log_weight: np.ndarray = field(init=False, repr=False)
    log_area: np.ndarray = field(init=False, repr=False)
    log_mass: np.ndarray = field(init=False, repr=False)
    log_mu_mid: np.ndarray = field(init=False, repr=False)
    h_mid: np.ndarray = field(init=False, repr=False)
    active: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        put = lambda name, value: object.__setattr__(self, name, value)
        n = int(self.n)
        if n < 2:
            raise GeometryError("n debe ser >= 2", n=self.n)
        put("n", n)
        for name in ("sigma", "q", "p", "theta", "kappa"):
            put(name, np.array(getattr(self, name), dtype=float, copy=True))
        size = self.sigma.size
        if size < 3 or any(getattr(self, k).shape != (size,) for k in ("q", "p", "theta", "kappa")):
            raise GeometryError("arrays de perfil con longitudes incompatibles")
        if np.any(np.diff(self.sigma) <= 0):
            raise GeometryError("sigma debe ser estrictamente creciente")
        for kind in (self.start_kind, self.end_kind):
            if kind not in ENDPOINT_KINDS:
                raise GeometryError("tipo de extremo desconocido", kind=kind)

        q, p, theta, kappa = self.q, self.p, self.theta, self.kappa
        on_axis = np.zeros(size, dtype=bool)
        on_axis[0] = self.start_kind == "axis"
        on_axis[-1] = self.end_kind == "axis"
        if np.any(np.abs(q[on_axis]) > 1e-12) or np.any(np.abs(np.sin(theta[on_axis])) > 1e-8):
            raise GeometryError("un extremo en el eje requiere q = 0 y θ perpendicular al eje")
        if np.any(q[~on_axis] <= 0):
            raise GeometryError("q debe ser positivo fuera del eje", index=int(np.argmin(q)))

        rot = np.empty(size)
        rot[~on_axis] = np.sin(theta[~on_axis]) / q[~on_axis]
        rot[on_axis] = kappa[on_axis]
        sin_t, cos_t = np.sin(theta), np.cos(theta)

        log_omega = log_sphere_area(n)
        with np.errstate(divide="ignore"):
            log_area = np.where(q > 0, (n - 1) * np.log(np.where(q > 0, q, 1.0)), -np.inf) + log_omega
        log_weight = 0.25 * (p * p + q * q)

        h_mid = np.diff(self.sigma)
        q_mid = 0.5 * (q[1:] + q[:-1])
        p_mid = 0.5 * (p[1:] + p[:-1])
        log_mu_mid = (n - 1) * np.log(q_mid) + log_omega + 0.25 * (p_mid ** 2 + q_mid ** 2)
        log_mu = log_area + log_weight

        # masas de cuadratura por nodo (celdas duales)
        log_mass = np.empty(size)
        log_mass[1:-1] = log_mu[1:-1] + np.log(0.5 * (h_mid[1:] + h_mid[:-1]))
        for node, mid in ((0, 0), (size - 1, size - 2)):
            kind = self.start_kind if node == 0 else self.end_kind
            if kind == "axis":
                log_mass[node] = log_mu_mid[mid] + math.log(h_mid[mid] / (2.0 * n))
            else:
                log_mass[node] = log_mu[node] + math.log(0.5 * h_mid[mid])

        active = np.ones(size, dtype=bool)
        active[0] = self.start_kind != "truncated"
        active[-1] = self.end_kind != "truncated"

        put("rot", _frozen(rot))
        put("H", _frozen(kappa + (n - 1) * rot))
        put("xdotN", _frozen(p * cos_t - q * sin_t))
        put("A2", _frozen(kappa ** 2 + (n - 1) * rot ** 2))
        put("log_weight", _frozen(log_weight))
        put("log_area", _frozen(log_area))
        put("log_mass", _frozen(log_mass))
        put("log_mu_mid", _frozen(log_mu_mid))
        put("h_mid", _frozen(h_mid))
        active.setflags(write=False)
        put("active", active)
        for name in ("sigma", "q", "p", "theta", "kappa"):
            getattr(self, name).setflags(write=False)

    @property
    def size(self) -> int:
        return int(self.sigma.size)

    @property
    def fold(self) -> float:
        return 2.0 if self.reflected else 1.0

    @property
    def radius(self) -> np.ndarray:
        return np.hypot(self.q, self.p)

    @property
    def length(self) -> float:
        return float(self.sigma[-1] - self.sigma[0])

    def header(self) -> dict:
        return {"n": self.n, "L": self.length, "start_kind": self.start_kind,
                "end_kind": self.end_kind, "reflected": bool(self.reflected), "nodes": self.size}


@dataclass(frozen=True, eq=False)
class GraphFunction:
    """Función v sobre los nodos de un perfil base."""
    base: ProfileCurve
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.shape != (self.base.size,):
            raise GeometryError("la función no coincide con la malla del perfil",
                                expected=self.base.size, got=int(values.size))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def derivative(self, order: int = 1) -> np.ndarray:
        d1, d2 = graph_derivatives(self.base, self.values)
        return d1 if order == 1 else d2

    @property
    def admissible(self) -> bool:
        return is_admissible(self.base, self.values)


def as_values(v: ArrayLike, curve: ProfileCurve) -> np.ndarray:
    """Devuelve los valores nodales de v validando la malla."""
    if isinstance(v, GraphFunction):
        if v.base is not curve and v.base.size != curve.size:
            raise GeometryError("malla distinta", expected=curve.size, got=v.base.size)
        return np.asarray(v.values, dtype=float)
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        return np.full(curve.size, float(arr))
    if arr.shape != (curve.size,):
        raise GeometryError("malla distinta", expected=curve.size, got=int(arr.size))
    return arr


def graph_derivatives(curve: ProfileCurve, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Primera y segunda derivada en longitud de arco (segundo orden)."""
    d1 = np.gradient(values, curve.sigma, edge_order=2)
    # extensión par en el eje y en el plano de simetría
    if curve.start_kind in ("axis", "symmetric"):
        d1[0] = 0.0
    if curve.end_kind in ("axis", "symmetric"):
        d1[-1] = 0.0
    d2 = np.gradient(d1, curve.sigma, edge_order=2)
    return d1, d2


def tubular_radius(curve: ProfileCurve) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 1.0 / np.maximum(np.abs(curve.kappa), np.abs(curve.rot))


def is_admissible(curve: ProfileCurve, values: np.ndarray) -> bool:
    return bool(np.all(1.0 - values * curve.kappa > 0) and np.all(1.0 - values * curve.rot > 0))


# ============================================================
# CONSTRUCTORES
# ============================================================

def radial_graph(r, w, cone: ConeSpec, h: float = GRID_H, reflected: bool = False) -> ProfileCurve:
    """
    Perfil de la hoja {x_{n+1} = w(|y|)} a partir de muestras (r, w).

    Args:
        r: radios estrictamente crecientes (r[0] = 0 para una hoja que toca el eje)
        w: alturas muestreadas
        cone: aporta la dimensión n
        h: espaciado objetivo en longitud de arco

    Returns:
        ProfileCurve con espaciado uniforme en longitud de arco
    """
    r = np.asarray(r, dtype=float)
    w = np.asarray(w, dtype=float)
    if r.ndim != 1 or r.size < 4 or r.shape != w.shape:
        raise GeometryError("muestras radiales insuficientes o incompatibles")
    if np.any(np.diff(r) <= 0) or r[0] < 0:
        raise GeometryError("r debe ser no negativo y estrictamente creciente")

    on_axis = r[0] == 0.0
    if on_axis:
        free = CubicSpline(r, w)
        slope0 = float(free(0.0, 1))
        if abs(slope0) > AXIS_SLOPE_TOL * max(1.0, float(np.max(np.abs(w)))):
            raise GeometryError("w'(0) distinto de cero: el perfil no es liso en el eje", slope=slope0)
        spline = CubicSpline(r, w, bc_type=((1, 0.0), "not-a-knot"))
    else:
        spline = CubicSpline(r, w)

    fine = np.linspace(r[0], r[-1], max(16 * r.size, int(math.ceil((r[-1] - r[0]) / h)) * 16 + 1))
    ds = np.hypot(1.0, spline(fine, 1))
    s_fine = cumulative_trapezoid(ds, fine, initial=0.0)
    if np.any(np.diff(s_fine) <= 0):
        raise GeometryError("reparametrización por arco no monótona")

    length = float(s_fine[-1])
    count = max(int(math.ceil(length / h)), 3)
    sigma = np.linspace(0.0, length, count + 1)
    r_nodes = np.interp(sigma, s_fine, fine)
    r_nodes[0], r_nodes[-1] = r[0], r[-1]

    w1 = spline(r_nodes, 1)
    theta = np.arctan(w1)
    kappa = spline(r_nodes, 2) / (1.0 + w1 ** 2) ** 1.5
    if on_axis:
        theta[0] = 0.0
    return ProfileCurve(cone.n, sigma, r_nodes, spline(r_nodes), theta, kappa,
                        start_kind="axis" if on_axis else "truncated", end_kind="truncated",
                        reflected=reflected)


def resample_profile(curve: ProfileCurve, h: float) -> ProfileCurve:
    """
    Remuestrea un perfil a espaciado uniforme h y recalcula θ y κ por
    diferencias finitas centradas de segundo orden.
    """
    count = max(int(math.ceil(curve.length / h)), 3)
    sigma = np.linspace(curve.sigma[0], curve.sigma[-1], count + 1)
    q = CubicSpline(curve.sigma, curve.q)(sigma)
    p = CubicSpline(curve.sigma, curve.p)(sigma)
    q_t = np.gradient(q, sigma, edge_order=2)
    p_t = np.gradient(p, sigma, edge_order=2)
    theta = np.unwrap(np.arctan2(p_t, q_t))
    if curve.start_kind == "axis":
        q[0], theta[0] = 0.0, 0.0
    if curve.start_kind == "symmetric":
        p[0], theta[0] = 0.0, curve.theta[0]
    kappa = np.gradient(theta, sigma, edge_order=2)
    return ProfileCurve(curve.n, sigma, q, p, theta, kappa, curve.start_kind, curve.end_kind,
                        curve.reflected)


def normal_graph(curve: ProfileCurve, v: ArrayLike) -> ProfileCurve:
    """
    Perfil de F_v(Σ) = x + v N con correspondencia nodo a nodo.

    γ_v' = (1 - vκ) T + v' N, de modo que el ángulo del grafo es
    θ + atan2(v', 1 - vκ) y su curvatura se obtiene derivando esa expresión.

    Raises:
        GeometryError: si 1 - vκ <= 0 o 1 - v sinθ/q <= 0 en algún nodo
    """
    values = as_values(v, curve)
    if not np.any(values):
        return curve
    one_k = 1.0 - values * curve.kappa
    one_r = 1.0 - values * curve.rot
    bad = np.flatnonzero((one_k <= 0) | (one_r <= 0))
    if bad.size:
        raise GeometryError("auto-intersección del grafo normal (curvatura × v >= 1)",
                            node=int(bad[0]), sigma=float(curve.sigma[bad[0]]))

    d1, d2 = graph_derivatives(curve, values)
    sin_t, cos_t = np.sin(curve.theta), np.cos(curve.theta)
    speed = np.hypot(one_k, d1)
    kappa_prime = np.gradient(curve.kappa, curve.sigma, edge_order=2)
    dtheta = curve.kappa + (one_k * d2 + d1 * (d1 * curve.kappa + values * kappa_prime)) / speed ** 2
    sigma = curve.sigma[0] + cumulative_trapezoid(speed, curve.sigma, initial=0.0)
    return ProfileCurve(curve.n, sigma, curve.q - values * sin_t, curve.p + values * cos_t,
                        curve.theta + np.arctan2(d1, one_k), dtheta / speed,
                        curve.start_kind, curve.end_kind, curve.reflected)


# ============================================================
# OPERACIONES
# ============================================================

def expander_residual(curve: ProfileCurve) -> GraphFunction:
    """R = H - ½ x·N; se anula exactamente en un auto-expansor."""
    return GraphFunction(curve, curve.H - 0.5 * curve.xdotN)


@dataclass(frozen=True)
class ConeFit:
    cone: ConeSpec
    rate: float
    correction: float       # coeficiente c de p ≈ m q + c / q
    residual: float         # residuo relativo del ajuste

    def to_dict(self):
        return {**self.cone.to_dict(), "rate": self.rate, "correction": self.correction,
                "fit_residual": self.residual}


def fit_cone_end(curve: ProfileCurve, fraction: float = FIT_FRACTION) -> ConeFit:
    """
    Ajuste p = m q + c / q sobre la fracción exterior de nodos.

    Raises:
        GeometryError: si el extremo no es asintóticamente cónico
    """
    if curve.end_kind != "truncated":
        raise GeometryError("el perfil no tiene extremo truncado")
    k = max(int(math.ceil(fraction * curve.size)), 5)
    q, p = curve.q[-k:], curve.p[-k:]
    theta, kappa = curve.theta[-k:], curve.kappa[-k:]
    if np.any(q <= 0) or np.any(np.cos(theta) <= 0):
        raise GeometryError("el extremo no se aleja del eje")
    bend = float(np.max(np.abs(kappa) * np.hypot(q, p)))
    if bend > CONE_BEND_TOL:
        raise GeometryError("extremo no asintóticamente lineal", bend=bend)

    design = np.column_stack([q, 1.0 / q])
    (m, c), *_ = np.linalg.lstsq(design, p, rcond=None)
    misfit = float(np.linalg.norm(p - design @ np.array([m, c])) / np.linalg.norm(np.hypot(q, p)))
    if misfit > CONE_FIT_TOL:
        raise GeometryError("residuo del ajuste cónico demasiado grande", residual=misfit)

    orientation = "upper" if m > 0 else ("lower" if m < 0 else "both")
    deviation = np.abs(p - m * q)
    floor = 1e-12 * float(np.max(np.hypot(q, p)))
    resolved = deviation > floor
    if resolved.sum() < 3:
        rate = math.inf
    else:
        rate = -float(np.polyfit(np.log(q[resolved]), np.log(deviation[resolved]), 1)[0])
    return ConeFit(ConeSpec(curve.n, abs(float(m)), orientation), rate, float(c), misfit)


def asymptotic_cone(curve: ProfileCurve) -> Tuple[ConeSpec, float]:
    fit = fit_cone_end(curve)
    return fit.cone, fit.rate


def profile_distance(a: ProfileCurve, b: ProfileCurve) -> float:
    """Distancia de Hausdorff entre dos perfiles en el plano (q, p)."""
    pa = np.column_stack([a.q, a.p])
    pb = np.column_stack([b.q, b.p])
    return max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0])


def mirror_profile(curve: ProfileCurve) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Perfil completo σ ∈ [-L, L] con p(-σ) = -p(σ) y q(-σ) = q(σ).

    Raises:
        PreconditionError: el perfil no empieza en el plano de simetría
    """
    if curve.start_kind != "symmetric":
        raise PreconditionError("solo se refleja un perfil que parte del plano de simetría",
                                start_kind=curve.start_kind)
    sigma = np.concatenate([-curve.sigma[:0:-1], curve.sigma])
    q = np.concatenate([curve.q[:0:-1], curve.q])
    p = np.concatenate([-curve.p[:0:-1], curve.p])
    return sigma, q, p


# ============================================================
# CUADRATURA PONDERADA (espacio logarítmico)
# ============================================================

def logspace_sum(log_terms: np.ndarray, signs: np.ndarray) -> float:
    """Σ signs·exp(log_terms) con desplazamiento máximo y suma compensada."""
    mask = (signs != 0) & np.isfinite(log_terms)
    if not np.any(mask):
        return 0.0
    shift = float(np.max(log_terms[mask]))
    total = math.fsum((signs[mask] * np.exp(log_terms[mask] - shift)).tolist())
    if total == 0.0:
        return 0.0
    return math.copysign(math.exp(math.log(abs(total)) + shift), total)


def weighted_sum(curve: ProfileCurve, density: ArrayLike) -> float:
    """∫_Σ density · e^{|x|²/4} por la regla nodal del perfil."""
    values = as_values(density, curve)
    with np.errstate(divide="ignore"):
        logs = curve.log_mass + np.log(np.abs(values))
    return curve.fold * logspace_sum(logs, np.sign(values))


def weighted_inner(curve: ProfileCurve, u: ArrayLike, v: ArrayLike) -> float:
    """Producto interno del espacio W."""
    a, b = as_values(u, curve), as_values(v, curve)
    with np.errstate(divide="ignore"):
        logs = curve.log_mass + np.log(np.abs(a)) + np.log(np.abs(b))
    return curve.fold * logspace_sum(logs, np.sign(a) * np.sign(b))


def weighted_norm(curve: ProfileCurve, v: ArrayLike) -> float:
    return math.sqrt(max(weighted_inner(curve, v, v), 0.0))


def liouville(curve: ProfileCurve, v: ArrayLike) -> np.ndarray:
    """ψ = sqrt(fold · masa) · v, de modo que ⟨u, v⟩_W = ψ_u · ψ_v."""
    values = as_values(v, curve) if np.ndim(v) <= 1 else np.asarray(v, dtype=float)
    half = 0.5 * (curve.log_mass + math.log(curve.fold))
    with np.errstate(divide="ignore"):
        return np.sign(values) * np.exp(half + np.log(np.abs(values)))


def from_liouville(curve: ProfileCurve, psi: np.ndarray) -> np.ndarray:
    half = 0.5 * (curve.log_mass + math.log(curve.fold))
    with np.errstate(divide="ignore"):
        return np.sign(psi) * np.exp(np.log(np.abs(psi)) - half)


def smooth_cutoff(radius: np.ndarray, R: float, width: float = 2.0) -> np.ndarray:
    """χ_R: 1 en B_R, 0 fuera de B_{R+width}, transición C^∞ con e^{-1/u}."""
    u = np.clip((np.asarray(radius, dtype=float) - R) / width, 0.0, 1.0)

    def bump(t):
        with np.errstate(divide="ignore", over="ignore"):
            return np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)

    left, right = bump(1.0 - u), bump(u)
    return left / (left + right)

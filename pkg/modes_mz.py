"""
modes_mz.py - Análisis modal de trayectorias y lema EDO de dicotomía
====================================================================
Descompone cada marco en las masas V_{>μ}, V_{=μ}, V_{<μ} respecto a un
umbral μ del espectro, comprueba el sistema de desigualdades diferenciales
que gobierna esas masas y ajusta la tasa de decaimiento hacia atrás.

El lema EDO se implementa aparte sobre ternas (x, y, z) >= 0, con un
generador sembrado de trayectorias que cumplen las hipótesis por
construcción.
"""

import math
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import PreconditionError
from geometry import weighted_norm
from entropy import c2_proxy
from spectral import SpectralData
from duhamel import Trajectory, project_modes

logger = logging.getLogger(__name__)

BESSEL_SLACK = 1e-8
STENCIL_SLACK = 1e-3        # tolerancia relativa al error del esténcil
ROUNDOFF_FLOOR = 1e3 * np.finfo(float).eps   # ruido absoluto de la no linealidad (geometría O(1))
MODE_C_BOUND = 10.0
MIN_FIT_FRAMES = 10
DELTA_FLOOR = 1e-12
LIMINF_TOL = 1e-8
LIMINF_FRACTION = 0.1
MZ_DIFF_TOL = 1e-9
MZ_FIRST_FACTOR = 8.0


# ============================================================
# MASAS MODALES
# ============================================================

@dataclass(eq=False)
class ModeTrajectory:
    times: np.ndarray
    V_plus: np.ndarray
    V_zero: np.ndarray
    V_minus: np.ndarray
    V_total: np.ndarray
    delta: np.ndarray
    mu: float
    lambdas: np.ndarray
    tol_zero: float

    def __post_init__(self):
        bessel = self.V_plus ** 2 + self.V_zero ** 2 + self.V_minus ** 2
        excess = float(np.max(bessel - self.V_total ** 2 * (1.0 + BESSEL_SLACK) - BESSEL_SLACK))
        if excess > 0:
            raise PreconditionError("las masas modales violan la desigualdad de Bessel", excess=excess)

    def buckets(self) -> Dict[str, np.ndarray]:
        """Máscaras de modos por encima, dentro y por debajo de μ."""
        lam = self.lambdas
        return {"plus": lam > self.mu + self.tol_zero,
                "zero": np.abs(lam - self.mu) <= self.tol_zero,
                "minus": lam < self.mu - self.tol_zero}

    def to_rows(self) -> List[Dict]:
        return [{"s": float(s), "V_plus": float(a), "V_zero": float(b), "V_minus": float(c),
                 "V_total": float(d), "delta": float(e)}
                for s, a, b, c, d, e in zip(self.times, self.V_plus, self.V_zero, self.V_minus,
                                            self.V_total, self.delta)]


def mode_trajectory(traj: Trajectory, spec: SpectralData, mu: float = 0.0) -> ModeTrajectory:
    """
    Raises:
        PreconditionError: la trayectoria no vive en la malla del espectro
    """
    if traj.curve is not spec.curve and (traj.curve.size != spec.curve.size
                                         or not np.allclose(traj.curve.sigma, spec.curve.sigma)):
        raise PreconditionError("la trayectoria y el espectro no comparten malla",
                                nodes=traj.curve.size, spec_nodes=spec.curve.size)
    if traj.coefficients is not None and traj.coefficients.shape[1] == spec.modes:
        coeffs = traj.coefficients
    else:
        coeffs = np.array([project_modes(f, spec)[0] for f in traj.frames])
    lam = np.asarray(spec.lambdas)
    tol = spec.tol_zero
    plus = lam > mu + tol
    zero = np.abs(lam - mu) <= tol
    minus = lam < mu - tol

    def mass(mask):
        return np.sqrt(np.sum(coeffs[:, mask] ** 2, axis=1))

    total = np.array([weighted_norm(spec.curve, f) for f in traj.frames])
    delta = np.array([c2_proxy(spec.curve, f) for f in traj.frames])
    return ModeTrajectory(np.array(traj.times), mass(plus), mass(zero), mass(minus), total, delta,
                          float(mu), lam.copy(), tol)


# ============================================================
# SISTEMA DE DESIGUALDADES
# ============================================================

@dataclass
class InequalityReport:
    name: str
    rate: float
    C_empirical: float
    passed: bool
    failure_times: List[float] = field(default_factory=list)


@dataclass
class ModeSystemReport:
    plus: InequalityReport
    neutral: InequalityReport
    minus: InequalityReport
    C_bound: float
    window: Tuple[float, float]

    @property
    def passed(self) -> bool:
        return self.plus.passed and self.neutral.passed and self.minus.passed

    @property
    def C_empirical(self) -> float:
        return max(self.plus.C_empirical, self.neutral.C_empirical, self.minus.C_empirical)

    def to_dict(self):
        out = asdict(self)
        out["passed"] = self.passed
        out["C_empirical"] = self.C_empirical
        return out


def _inequality(name: str, lhs: np.ndarray, slack: np.ndarray, bound: np.ndarray,
                times: np.ndarray, rate: float, C_bound: float) -> InequalityReport:
    excess = np.clip(lhs - slack, 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(excess > 0, excess / bound, 0.0)
    ratio = np.where(np.isnan(ratio), np.inf, ratio)
    failures = times[ratio > C_bound].tolist()
    C_emp = float(ratio.max()) if ratio.size else 0.0
    return InequalityReport(name, float(rate), C_emp, not failures, failures)


def check_mode_system(mt: ModeTrajectory, C_bound: float = MODE_C_BOUND,
                      s_max: Optional[float] = None) -> ModeSystemReport:
    """
    Con derivadas por diferencias (np.gradient de segundo orden):

        V_>' + λ̄ V_>   <= C δ V
        |V_=' + μ V_=| <= C δ V
        -(V_<' + λ̲ V_<) <= C δ V

    λ̄ es el menor autovalor por encima de μ y λ̲ el mayor por debajo.
    C_empirical es el menor C que satisface cada desigualdad en la ventana.
    """
    if mt.times.size < 3:
        raise PreconditionError("se necesitan al menos 3 marcos", frames=int(mt.times.size))
    masks = mt.buckets()
    lam = mt.lambdas
    lam_bar = float(lam[masks["plus"]].min()) if masks["plus"].any() else mt.mu
    lam_low = float(lam[masks["minus"]].max()) if masks["minus"].any() else mt.mu

    d_plus = np.gradient(mt.V_plus, mt.times, edge_order=2)
    d_zero = np.gradient(mt.V_zero, mt.times, edge_order=2)
    d_minus = np.gradient(mt.V_minus, mt.times, edge_order=2)
    keep = np.ones(mt.times.size, dtype=bool) if s_max is None else mt.times <= s_max
    if not keep.any():
        raise PreconditionError("ventana temporal vacía", s_max=s_max)
    times = mt.times[keep]
    bound = (mt.delta * mt.V_total)[keep]
    dt = float(np.min(np.diff(mt.times)))

    def slack(d, rate, values):
        # el ruido de redondeo de las masas se amplifica por 1/dt en la derivada
        floor = ROUNDOFF_FLOOR * (1.0 + 1.0 / dt + abs(rate)) * (1.0 + mt.V_total)
        return (STENCIL_SLACK * (np.abs(d) + np.abs(rate * values)) + floor)[keep]

    plus = _inequality("plus", (d_plus + lam_bar * mt.V_plus)[keep],
                       slack(d_plus, lam_bar, mt.V_plus), bound, times, lam_bar, C_bound)
    neutral = _inequality("neutral", np.abs(d_zero + mt.mu * mt.V_zero)[keep],
                          slack(d_zero, mt.mu, mt.V_zero), bound, times, mt.mu, C_bound)
    minus = _inequality("minus", (-(d_minus + lam_low * mt.V_minus))[keep],
                        slack(d_minus, lam_low, mt.V_minus), bound, times, lam_low, C_bound)
    report = ModeSystemReport(plus, neutral, minus, C_bound, (float(times[0]), float(times[-1])))
    if not report.passed:
        logger.warning("⚠️ Sistema modal: C empírico %.3e > %.1f", report.C_empirical, C_bound)
    return report


@dataclass
class DecayFit:
    exponent: float
    residual: float
    frames: int

    def to_dict(self):
        return asdict(self)


def fit_decay_rate(mt: ModeTrajectory, fraction: float = 0.5) -> DecayFit:
    """
    Ajuste log-lineal δ(s) ≈ C e^{r s} en la mitad antigua de la trayectoria.

    Raises:
        PreconditionError: menos de 10 marcos con δ > 1e-12 en la ventana
    """
    split = mt.times[0] + fraction * (mt.times[-1] - mt.times[0])
    keep = (mt.times <= split) & (mt.delta > DELTA_FLOOR)
    if keep.sum() < MIN_FIT_FRAMES:
        raise PreconditionError("ventana de ajuste demasiado pequeña", frames=int(keep.sum()),
                                required=MIN_FIT_FRAMES)
    s, log_d = mt.times[keep], np.log(mt.delta[keep])
    slope, offset = np.polyfit(s, log_d, 1)
    residual = float(np.sqrt(np.mean((log_d - (slope * s + offset)) ** 2)))
    return DecayFit(float(slope), residual, int(keep.sum()))


# ============================================================
# LEMA EDO
# ============================================================

@dataclass(eq=False)
class MZTrajectory:
    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    eps: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.x, self.y, self.z = (np.asarray(a, dtype=float) for a in (self.x, self.y, self.z))
        shape = self.times.shape
        if self.x.shape != shape or self.y.shape != shape or self.z.shape != shape:
            raise PreconditionError("x, y, z y los tiempos deben tener la misma longitud")
        if self.times.size < 2 or np.any(np.diff(self.times) <= 0):
            raise PreconditionError("tiempos no crecientes")
        if min(self.x.min(), self.y.min(), self.z.min()) < 0:
            raise PreconditionError("x, y, z deben ser no negativos")
        if np.any(self.x + self.y + self.z <= 0):
            raise PreconditionError("x + y + z debe ser positivo")


@dataclass
class MZVerdict:
    hypotheses_ok: bool
    y_bound_ok: Optional[bool]
    branch: str                         # first | second | none
    s_star: Optional[float] = None
    c: Optional[float] = None
    failed: List[str] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def mz_check(t: MZTrajectory) -> MZVerdict:
    """
    Hipótesis con cocientes hacia adelante evaluados en el punto izquierdo:

        |x'| <= ε(x+y+z),  y' + y <= ε(x+z),  z' - z >= -ε(x+y)

    y liminf y = 0 (mínimo de y en el primer 10 % de muestras <= 1e-8).
    Si se cumplen, comprueba y <= 2ε(x+z) y clasifica la dicotomía.
    """
    eps = t.eps
    dt = np.diff(t.times)
    x, y, z = t.x[:-1], t.y[:-1], t.z[:-1]
    dx, dy, dz = np.diff(t.x) / dt, np.diff(t.y) / dt, np.diff(t.z) / dt
    total = x + y + z
    slack = MZ_DIFF_TOL * (1.0 + total)
    failed = []
    if np.any(np.abs(dx) > eps * total + slack):
        failed.append("x")
    if np.any(dy + y > eps * (x + z) + slack):
        failed.append("y")
    if np.any(dz - z < -eps * (x + y) - slack):
        failed.append("z")
    early = max(1, int(math.ceil(LIMINF_FRACTION * t.times.size)))
    if float(t.y[:early].min()) > LIMINF_TOL:
        failed.append("liminf")
    if failed:
        return MZVerdict(False, None, "none", failed=failed)

    scale = MZ_DIFF_TOL * (1.0 + t.x + t.z)
    y_ok = bool(np.all(t.y <= 2.0 * eps * (t.x + t.z) + scale))

    inside = t.z <= MZ_FIRST_FACTOR * eps * t.x + MZ_DIFF_TOL * (1.0 + t.x)
    if inside[0]:
        run = int(np.argmin(inside)) if not inside.all() else inside.size
        return MZVerdict(True, y_ok, "first", s_star=float(t.times[run - 1]))
    if np.all(t.z > 0):
        c = float(np.max(t.x / (eps * t.z)))
        if math.isfinite(c):
            return MZVerdict(True, y_ok, "second", c=c)
    return MZVerdict(True, y_ok, "none")


def mz_synthesize(seed: int, eps: float = 0.01, s_min: float = -20.0, ds: float = 0.01) -> MZTrajectory:
    """
    Euler explícito con derivadas aleatorias dentro de los conos permitidos:

        x' = u1 ε(x+y+z),  y' = -y + u2 ε(x+z),  z' = z + u3 ε(x+y)

    u1, u3 ∈ [-1, 1] (recortados para mantener x, z >= 0), u2 ∈ [0, 1], y0 = 0.
    La mitad de las semillas arranca con z0 <= 4ε x0 y la otra con z0 ~ x0.
    """
    if eps <= 0 or s_min >= 0 or ds <= 0:
        raise PreconditionError("ε > 0, s_min < 0 y ds > 0", eps=eps, s_min=s_min, ds=ds)
    rng = np.random.default_rng(seed)
    count = int(round(-s_min / ds)) + 1
    times = np.linspace(s_min, 0.0, count)
    steps = np.diff(times)
    x = np.empty(count)
    y = np.zeros(count)
    z = np.empty(count)
    x[0] = rng.uniform(0.5, 1.5)
    z[0] = rng.uniform(0.0, 4.0 * eps) * x[0] if rng.random() < 0.5 else rng.uniform(0.5, 1.5)
    noise = rng.uniform(-1.0, 1.0, size=(count - 1, 3))
    noise[:, 1] = 0.5 * (noise[:, 1] + 1.0)
    for k in range(count - 1):
        h = steps[k]
        u1, u2, u3 = noise[k]
        total = x[k] + y[k] + z[k]
        if total > 0:
            u1 = max(u1, -x[k] / (h * eps * total))
        if x[k] + y[k] > 0:
            u3 = max(u3, -z[k] * (1.0 + h) / (h * eps * (x[k] + y[k])))
        x[k + 1] = max(x[k] + h * u1 * eps * total, 0.0)
        y[k + 1] = y[k] * (1.0 - h) + h * u2 * eps * (x[k] + z[k])
        z[k + 1] = max(z[k] * (1.0 + h) + h * u3 * eps * (x[k] + y[k]), 0.0)
    return MZTrajectory(times, x, y, z, eps)


def mz_property_suite(seeds: Sequence[int], eps: float = 0.01) -> Dict:
    """Resumen de mz_check sobre trayectorias sintetizadas."""
    counts = {"first": 0, "second": 0, "none": 0}
    hyp = ybound = 0
    for seed in seeds:
        verdict = mz_check(mz_synthesize(int(seed), eps))
        hyp += verdict.hypotheses_ok
        ybound += bool(verdict.y_bound_ok)
        counts[verdict.branch] += 1
    total = len(seeds)
    logger.info("✅ Lema EDO: %d/%d hipótesis, %d/%d cota de y", hyp, total, ybound, total)
    return {"runs": total, "hypotheses_ok": hyp, "y_bound_ok": ybound, "branches": counts, "eps": eps}


def mz_empirical_threshold(seeds: Sequence[int] = tuple(range(50)),
                           eps_grid: Optional[Sequence[float]] = None) -> Dict:
    """Primer ε de la malla en que alguna trayectoria sintetizada viola y <= 2ε(x+z)."""
    grid = np.geomspace(0.01, 0.5, 15) if eps_grid is None else np.asarray(eps_grid, dtype=float)
    tested = []
    for eps in grid:
        violations = sum(not mz_check(mz_synthesize(int(seed), float(eps))).y_bound_ok for seed in seeds)
        tested.append({"eps": float(eps), "violations": int(violations)})
        if violations:
            logger.info("🔄 Primera violación de la cota de y en ε=%.4f", eps)
            return {"eps0_empirical": float(eps), "tested": tested}
    return {"eps0_empirical": None, "tested": tested}


# ============================================================
# DICOTOMÍA MODAL
# ============================================================

def dominance_dichotomy(mt: ModeTrajectory, C: Optional[float] = None) -> Tuple[MZVerdict, Dict]:
    """
    Aplica el lema a (x, y, z) = e^{μs}(V_=, V_>, V_<) con el tiempo
    reescalado por el hueco espectral alrededor de μ.
    """
    masks = mt.buckets()
    lam = mt.lambdas
    gaps = []
    if masks["plus"].any():
        gaps.append(float(lam[masks["plus"]].min()) - mt.mu)
    if masks["minus"].any():
        gaps.append(mt.mu - float(lam[masks["minus"]].max()))
    if not gaps:
        raise PreconditionError("no hay modos a ningún lado de μ", mu=mt.mu)
    gap = min(gaps)
    if C is None:
        C = max(check_mode_system(mt).C_empirical, 1.0)
    eps = C * float(mt.delta.max()) / gap
    weight = np.exp(mt.mu * mt.times)
    x, y, z = weight * mt.V_zero, weight * mt.V_plus, weight * mt.V_minus
    valid = x + y + z > 0
    if valid.sum() < 2:
        raise PreconditionError("trayectoria modal nula")
    ode = MZTrajectory(gap * mt.times[valid], x[valid], y[valid], z[valid], eps)
    verdict = mz_check(ode)
    return verdict, {"gap": gap, "eps": eps, "C": C}

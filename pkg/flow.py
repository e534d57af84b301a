"""
flow.py - Flujo reescalado de grafos normales sobre un expansor
===============================================================
∂_s v = F(v) = L_Σ v + h(v), con L_Σ implícito (sistema de bandas en forma
de Liouville) y h = F - L_Σ v explícito. El paso se adapta con la estimación
de medio paso y se acepta la extrapolación local 2·v_½ - v_1.

Condición de borde: v = 0 en el extremo truncado (nodos Dirichlet).
"""

import math
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import FlowError, GeometryError, PreconditionError
from geometry import (ConeSpec, ProfileCurve, as_values, expander_residual, from_liouville,
                      liouville, normal_graph, weighted_norm)
from entropy import graph_velocity
from spectral import SpectralData, StabilityOperator, assemble_stability, eigensolve
from duhamel import Trajectory
from ancient import AncientParams, construct_ancient, nonlinearity

logger = logging.getLogger(__name__)

LOCAL_TOL = 1e-8
DS_MAX = 0.25
DS_MIN = 1e-10
DS_INITIAL = 1e-3
PROXY_FACTOR = 5.0          # |A| > 1/(5h) detiene el flujo
CONVERGE_TOL = 1e-7
RESOLVED = 1e-4             # nodos con |v| > 1e-4·max|v| cuentan para el signo


# ============================================================
# ESTADO
# ============================================================

@dataclass(frozen=True, eq=False)
class FlowState:
    op: StabilityOperator
    v: np.ndarray
    s: float = 0.0
    ds: float = DS_INITIAL
    error: float = 0.0
    boundary: str = "dirichlet"

    def __post_init__(self):
        values = np.array(as_values(self.v, self.op.curve), dtype=float)
        values[~self.op.curve.active] = 0.0
        values.setflags(write=False)
        object.__setattr__(self, "v", values)
        if self.ds <= 0:
            raise PreconditionError("Δs debe ser positivo", ds=self.ds)

    @property
    def curve(self) -> ProfileCurve:
        return self.op.curve

    @classmethod
    def start(cls, base, v, s: float = 0.0, ds: float = DS_INITIAL) -> "FlowState":
        op = base if isinstance(base, StabilityOperator) else assemble_stability(base)
        return cls(op, as_values(v, op.curve), s, ds)


def _imex(op: StabilityOperator, v: np.ndarray, ds: float) -> np.ndarray:
    """(I - Δs L_Σ) v_new = v + Δs·h(v) sobre los nodos activos."""
    curve = op.curve
    rhs = liouville(curve, v + ds * nonlinearity(op, v))
    psi = np.zeros(curve.size)
    psi[op.index] = op.implicit_solve(rhs[op.index], ds)
    return from_liouville(curve, psi)


def curvature_proxy(curve: ProfileCurve, v) -> float:
    """max |A| del grafo normal."""
    graph = normal_graph(curve, v)
    return float(np.sqrt(np.max(graph.A2)))


def _proxy_limit(curve: ProfileCurve) -> float:
    return 1.0 / (PROXY_FACTOR * float(curve.h_mid.max()))


# ============================================================
# PASO
# ============================================================

def step(state: FlowState, tol: float = LOCAL_TOL, ds_max: float = DS_MAX,
         ds_min: float = DS_MIN, s_stop: Optional[float] = None) -> FlowState:
    """
    Un paso linealmente implícito aceptado.

    Raises:
        FlowError: Δs < ds_min (grafo degenerado o singularidad) o el proxy
            de curvatura supera 1/(5h)
    """
    op, v = state.op, np.asarray(state.v)
    curve = op.curve
    ds = min(state.ds, ds_max)
    if s_stop is not None:
        ds = min(ds, s_stop - state.s)
    scale = weighted_norm(curve, v)
    last_cause = "error local"
    while True:
        if ds < ds_min:
            proxy = _safe_proxy(curve, v)
            logger.error("❌ Subdesbordamiento del paso en s=%.4f (proxy=%.3e)", state.s, proxy)
            raise FlowError("subdesbordamiento del paso", s=state.s, ds=ds,
                            curvature_proxy=proxy, cause=last_cause)
        try:
            full = _imex(op, v, ds)
            half = _imex(op, _imex(op, v, 0.5 * ds), 0.5 * ds)
        except GeometryError as exc:
            last_cause = exc.message
            ds *= 0.2
            continue
        error = weighted_norm(curve, half - full)
        target = tol * scale
        if error <= target:
            break
        last_cause = "error local"
        ds *= max(0.2, 0.9 * math.sqrt(target / error))

    new = 2.0 * half - full
    try:
        proxy = curvature_proxy(curve, new)
    except GeometryError as exc:
        raise FlowError("el grafo dejó de ser admisible", s=state.s + ds, cause=exc.message)
    limit = _proxy_limit(curve)
    if proxy > limit:
        logger.warning("⚠️ Proxy de singularidad: |A|=%.3e > %.3e en s=%.4f", proxy, limit, state.s + ds)
        raise FlowError("proxy de singularidad activado", s=state.s + ds, curvature_proxy=proxy,
                        limit=limit)
    if error == 0.0:
        growth = 2.0
    else:
        growth = min(2.0, max(0.2, 0.9 * math.sqrt(tol * scale / error)))
    return replace(state, v=new, s=state.s + ds, ds=min(ds_max, ds * growth), error=error)


def _safe_proxy(curve: ProfileCurve, v) -> float:
    try:
        return curvature_proxy(curve, v)
    except GeometryError:
        return math.inf


def advance(state: FlowState, s_stop: float, **kwargs) -> Tuple[FlowState, int]:
    """Pasos hasta s_stop exactamente; devuelve el estado y el número de pasos."""
    steps = 0
    while state.s < s_stop - 1e-12:
        state = step(state, s_stop=s_stop, **kwargs)
        steps += 1
    return replace(state, s=float(s_stop)), steps


def evolve(state: FlowState, s_end: float, record_every: float, **kwargs) -> Trajectory:
    """Integra hasta s_end grabando cada record_every; procedencia `flow`."""
    if s_end <= state.s:
        raise PreconditionError("s_end debe ser mayor que s", s=state.s, s_end=s_end)
    if record_every <= 0:
        raise PreconditionError("record_every debe ser positivo", record_every=record_every)
    marks = np.arange(state.s + record_every, s_end, record_every)
    marks = np.append(marks[marks < s_end - 1e-12], s_end)
    times, frames = [state.s], [np.array(state.v)]
    total = 0
    for mark in marks:
        state, steps = advance(state, float(mark), **kwargs)
        total += steps
        times.append(state.s)
        frames.append(np.array(state.v))
    logger.info("✅ Flujo integrado hasta s=%.3f en %d pasos", s_end, total)
    return Trajectory(state.curve, np.array(times), np.array(frames), "flow",
                      metadata={"steps": total, "final_ds": state.ds})


# ============================================================
# ORÁCULOS
# ============================================================

def rk4_reference(base, v, s_span: float, ds: float) -> np.ndarray:
    """RK4 explícito de paso fijo sobre ∂_s v = F(v); sólo para pasos pequeños."""
    curve = getattr(base, "curve", base)
    values = np.array(as_values(v, curve), dtype=float)
    count = max(1, int(round(s_span / ds)))
    dt = s_span / count
    for _ in range(count):
        k1 = graph_velocity(curve, values)
        k2 = graph_velocity(curve, values + 0.5 * dt * k1)
        k3 = graph_velocity(curve, values + 0.5 * dt * k2)
        k4 = graph_velocity(curve, values + dt * k3)
        values = values + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return values


@dataclass(frozen=True)
class PDEResidualReport:
    max_residual: float
    max_speed: float
    rtol: float
    passed: bool

    def to_dict(self) -> Dict:
        return asdict(self)


def pde_residual(traj: Trajectory, rtol: float = 1e-2) -> PDEResidualReport:
    """
    ‖(v_{k+1} - v_{k-1})/(s_{k+1} - s_{k-1}) - F(v_k)‖_W en los marcos
    interiores; PASS si el máximo es <= rtol·max‖F‖_W.
    """
    curve = traj.curve
    times, frames = traj.times, traj.frames
    if times.size < 3:
        raise PreconditionError("se necesitan al menos 3 marcos", frames=int(times.size))
    residuals, speeds = [], []
    for k in range(1, times.size - 1):
        velocity = graph_velocity(curve, frames[k])
        dv = (frames[k + 1] - frames[k - 1]) / (times[k + 1] - times[k - 1])
        residuals.append(weighted_norm(curve, dv - velocity))
        speeds.append(weighted_norm(curve, velocity))
    worst = float(max(residuals))
    scale = float(max(speeds))
    passed = worst <= rtol * scale if scale > 0 else worst == 0.0
    return PDEResidualReport(worst, scale, float(rtol), bool(passed))


# ============================================================
# FLUJO NO REESCALADO
# ============================================================

@dataclass(frozen=True)
class UnrescaledFrame:
    t: float
    s: float
    q: np.ndarray
    p: np.ndarray


def unrescale(traj: Trajectory, times: Optional[Sequence[float]] = None) -> Tuple[List[UnrescaledFrame], Dict]:
    """
    Σ_t = e^{s/2}·Σ̃_s en t = e^s. Con `times` se exigen marcos en s = log t.
    """
    if times is None:
        picks = list(range(len(traj)))
    else:
        picks = []
        for t in times:
            if t <= 0:
                raise PreconditionError("t debe ser positivo", t=t)
            k = traj.index_of(math.log(t))
            if abs(traj.times[k] - math.log(t)) > 1e-9:
                raise PreconditionError("no hay marco en s = log t", t=t, nearest=float(traj.times[k]))
            picks.append(k)
    frames = []
    for k in picks:
        s = float(traj.times[k])
        graph = normal_graph(traj.curve, traj.frames[k])
        scale = math.exp(0.5 * s)
        frames.append(UnrescaledFrame(math.exp(s), s, scale * graph.q, scale * graph.p))
    meta = {"provenance": traj.provenance, "limit_t_to_0": "asymptotic cone",
            "times": [f.t for f in frames]}
    return frames, meta


def cone_distance(frame: UnrescaledFrame, cone: ConeSpec, window: Tuple[float, float] = (5.0, 10.0)) -> float:
    """Distancia máxima de los puntos del marco en la ventana de radio al cono."""
    radius = np.hypot(frame.q, frame.p)
    inside = (radius >= window[0]) & (radius <= window[1])
    if not np.any(inside):
        raise PreconditionError("no hay nodos en la ventana de radio", window=list(window))
    m = cone.slope
    gap = np.abs(np.abs(frame.p[inside]) - m * frame.q[inside]) / math.sqrt(1.0 + m * m)
    return float(gap.max())


# ============================================================
# LÍNEAS DE FLUJO DE MORSE
# ============================================================

@dataclass(eq=False)
class MorseResult:
    trajectory: Trajectory
    status: str                             # converged | singular | sign_lost | max_time
    s_stop: float
    limit: Optional[ProfileCurve] = None
    limit_residual: Optional[float] = None
    limit_lambda1: Optional[float] = None
    details: Dict = field(default_factory=dict)

    def to_dict(self):
        return {"status": self.status, "s_stop": self.s_stop, "limit_residual": self.limit_residual,
                "limit_lambda1": self.limit_lambda1, "frames": len(self.trajectory), **self.details}


def one_sided(v, sign: int) -> bool:
    values = np.asarray(v, dtype=float)
    peak = float(np.max(np.abs(values)))
    if peak == 0.0:
        return True
    resolved = np.abs(values) > RESOLVED * peak
    return bool(np.all(sign * values[resolved] > 0))


def morse_flow_line(spec: SpectralData, sign: int = 1, amplitude: float = 1e-3,
                    max_time: float = 40.0, record_every: float = 0.5,
                    converge_tol: float = CONVERGE_TOL, tol: float = LOCAL_TOL) -> MorseResult:
    """
    Flujo antiguo unilateral desde ±amplitude·φ_1 continuado hacia adelante
    mientras conserve el signo. Una parada por singularidad es un resultado,
    no un error.
    """
    if spec.index == 0:
        raise PreconditionError("el expansor es estable (I = 0)")
    if sign not in (1, -1):
        raise PreconditionError("sign debe ser ±1", sign=sign)
    a = (sign * amplitude,) + (0.0,) * (spec.index - 1)
    ancient = construct_ancient(spec, AncientParams(a))
    op, curve = spec.operator, spec.curve
    times, frames = list(ancient.times), [f for f in ancient.frames]
    status, details = "max_time", {}

    if not all(one_sided(f, sign) for f in ancient.frames):
        status = "sign_lost"
    state = FlowState(op, ancient.frames[-1], 0.0)
    while status == "max_time" and state.s < max_time - 1e-12:
        try:
            state, _ = advance(state, min(state.s + record_every, max_time), tol=tol)
        except FlowError as exc:
            status, details = "singular", exc.details
            break
        times.append(state.s)
        frames.append(np.array(state.v))
        if not one_sided(state.v, sign):
            status = "sign_lost"
        elif weighted_norm(curve, graph_velocity(curve, state.v)) < converge_tol:
            status = "converged"

    traj = Trajectory(curve, np.array(times), np.array(frames), "flow",
                      metadata={"sign": sign, "amplitude": amplitude, "ancient_S_back": float(-ancient.times[0])})
    result = MorseResult(traj, status, float(times[-1]), details=details)
    if status == "converged":
        velocity = graph_velocity(curve, state.v)
        limit = normal_graph(curve, state.v)
        result.limit = limit
        result.limit_residual = float(np.max(np.abs(velocity[curve.active])))
        result.details["geometric_residual"] = float(np.max(np.abs(
            expander_residual(limit).values[curve.active])))
        result.limit_lambda1 = float(eigensolve(assemble_stability(limit), modes=3).lambdas[0])
    logger.info("✅ Línea de Morse (signo %+d): %s en s=%.2f", sign, status, result.s_stop)
    return result

#!/usr/bin/env python3
"""
cli.py - Punto de entrada del laboratorio de expansores
=======================================================
Subcomandos:
    expander match|sweep     disparo y barrido de pendientes
    spectrum                 autopares de -L_Σ
    ancient construct        flujo antiguo desde un expansor inestable
    flow run|unrescale       flujo reescalado y cambio de variables
    entropy check|monotone   entropía relativa y monotonía
    modes analyze            masas modales y sistema de desigualdades
    mz check                 lema EDO sobre un CSV (s, x, y, z)
    reproduce                batería de aceptación completa

Códigos de salida: 0 éxito, 1 uso incorrecto, 2 fallo numérico (JSON en stderr).
"""

import os
import sys
import time
import logging
import argparse
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from config import RunConfig, setup_logging
from errors import ConfigError, ExpanderLabError, PreconditionError
from storage import (dumps, load_mz_csv, load_profile, load_spectrum, load_trajectory, read_json,
                     save_profile, save_spectrum, save_trajectory, write_columns, write_json,
                     write_rows)
from geometry import ConeSpec, radial_graph, weighted_inner
from expander_solver import (count_threshold, find_necks, match_sheet, neck_threshold_slope, residual_norm,
                             shoot_sheet, sweep_cone_slope)
from spectral import SpectralData, assemble_stability, eigensolve, unstable_neck
from duhamel import mode_data, solve_linear
from ancient import AncientParams, backward_rate, closeness_check, construct_ancient
from flow import FlowState, evolve, morse_flow_line, pde_residual, unrescale
from entropy import (expansion_check, expansion_scaling, gradient_N, graph_energy, lojasiewicz_suite,
                     monotonicity_check, pullback_residual)
from modes_mz import check_mode_system, fit_decay_rate, mode_trajectory, mz_check, mz_property_suite

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser que lanza en vez de terminar el proceso."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ============================================================
# UTILIDADES
# ============================================================

def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"lista de números inválida: {text}")


def _slopes(text: str) -> List[float]:
    """'lo:hi:count' o lista separada por comas."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise UsageError(f"rango de pendientes inválido: {text}")
        return np.linspace(float(parts[0]), float(parts[1]), int(parts[2])).tolist()
    return _floats(text)


def parse_function(text: str, spec: SpectralData) -> np.ndarray:
    """'zero' o 'mode:i:amp[,mode:j:amp...]' como combinación de autofunciones."""
    values = np.zeros(spec.curve.size)
    if text == "zero":
        return values
    for term in text.split(","):
        parts = term.split(":")
        if len(parts) != 3 or parts[0] != "mode":
            raise UsageError(f"término de función inválido: {term}")
        index = int(parts[1])
        if not 1 <= index <= spec.modes:
            raise UsageError(f"modo fuera de rango: {index}")
        values = values + float(parts[2]) * spec.phi(index - 1)
    return values


def _emit(data: Dict, out: Optional[str] = None) -> None:
    if out:
        write_json(out, data)
    print(dumps(data))


def _config(args) -> RunConfig:
    data = read_json(args.config) if args.config else {}
    for key, value in (("h", args.h), ("r_max", args.r_max), ("seed", args.seed),
                       ("output_dir", args.output_dir), ("threads", args.threads)):
        if value is not None:
            data[key] = value
    return RunConfig.from_dict(data)


# ============================================================
# SUBCOMANDOS
# ============================================================

def cmd_expander_match(args, cfg: RunConfig) -> int:
    cone = ConeSpec(args.n, args.slope)
    if args.kind == "sheet":
        profile = match_sheet(cone, tuple(_floats(args.bracket)), cfg.h, cfg.r_max)
    else:
        necks = find_necks(cone, cfg.h, cfg.r_max)
        if not necks:
            raise PreconditionError("no hay cuellos para esta pendiente", slope=args.slope)
        if args.which >= len(necks):
            raise PreconditionError("índice de cuello fuera de rango", which=args.which, found=len(necks))
        profile = necks[args.which]
    save_profile(profile.curve, args.out)
    _emit(profile.to_dict())
    return 0


def cmd_expander_sweep(args, cfg: RunConfig) -> int:
    rows = sweep_cone_slope(_slopes(args.slopes), args.n, cfg.h, cfg.r_max, cfg.threads, args.out)
    r_star, m_star = neck_threshold_slope(args.n, cfg.h, cfg.r_max)
    _emit({"rows": len(rows), "count_threshold": count_threshold(rows),
           "neck_threshold": {"r0": r_star, "slope": m_star}, "csv": args.out})
    return 0


def cmd_spectrum(args, cfg: RunConfig) -> int:
    curve = load_profile(args.profile)
    spec = eigensolve(assemble_stability(curve), args.modes, args.tol_zero or cfg.tol_zero)
    save_spectrum(spec, args.out, args.profile)
    _emit(spec.to_dict())
    return 0


def cmd_ancient(args, cfg: RunConfig) -> int:
    spec = load_spectrum(args.spec)
    params = AncientParams(tuple(_floats(args.a)), args.delta0, eps=args.eps)
    traj = construct_ancient(spec, params, cfg.threads)
    save_trajectory(traj, args.out)
    report = closeness_check(traj, spec, params).to_dict()
    report["pi_minus_error"] = traj.metadata["pi_minus_error"]
    _emit(report, os.path.join(args.out, "closeness.json"))
    return 0


def cmd_flow_run(args, cfg: RunConfig) -> int:
    curve = load_profile(args.profile)
    op = assemble_stability(curve)
    spec = eigensolve(op, args.modes, cfg.tol_zero)
    state = FlowState(op, parse_function(args.v0, spec), 0.0)
    traj = evolve(state, args.to, args.record)
    save_trajectory(traj, args.out)
    report = {"frames": len(traj), **traj.metadata}
    if len(traj) >= 3:
        report["pde_residual"] = pde_residual(traj).to_dict()
    _emit(report)
    return 0


def cmd_flow_unrescale(args, cfg: RunConfig) -> int:
    traj = load_trajectory(args.traj)
    frames, meta = unrescale(traj, _floats(args.times) if args.times else None)
    out = args.out or os.path.join(args.traj, "unrescaled")
    for frame in frames:
        write_columns(os.path.join(out, f"t_{frame.t!r}.csv"), {"q": frame.q, "p": frame.p})
    _emit(meta, os.path.join(out, "meta.json"))
    return 0


def cmd_entropy_check(args, cfg: RunConfig) -> int:
    spec = load_spectrum(args.spec)
    curve = load_profile(args.profile) if args.profile else spec.curve
    if curve.size != spec.curve.size:
        raise PreconditionError("el perfil y el espectro no comparten malla")
    v = parse_function(args.v, spec)
    report = expansion_check(spec.curve, v, args.R, spec.operator).to_dict()
    # H - ½x·N de Σ_v evaluado sobre su propia geometría
    report["pullback_residual"] = float(np.max(np.abs(pullback_residual(curve, v))))
    _emit(report, args.out)
    return 0


def cmd_entropy_monotone(args, cfg: RunConfig) -> int:
    traj = load_trajectory(args.traj)
    report = monotonicity_check(traj)
    _emit(report.to_dict(), args.out)
    return 0 if report.passed else 2


def cmd_modes(args, cfg: RunConfig) -> int:
    traj = load_trajectory(args.traj)
    spec = load_spectrum(args.spec)
    mt = mode_trajectory(traj, spec, args.mu)
    report = check_mode_system(mt, s_max=args.s_max).to_dict()
    try:
        report["decay"] = fit_decay_rate(mt).to_dict()
    except PreconditionError as exc:
        report["decay"] = exc.to_dict()
    if args.out:
        write_rows(os.path.splitext(args.out)[0] + ".csv", mt.to_rows())
    _emit(report, args.out)
    return 0


def cmd_mz(args, cfg: RunConfig) -> int:
    verdict = mz_check(load_mz_csv(args.csv, args.eps))
    _emit(verdict.to_dict(), args.out)
    return 0


# ============================================================
# REPRODUCCIÓN
# ============================================================

def _check_plane(cfg: RunConfig, ctx: Dict) -> Dict:
    r = np.linspace(0.0, cfg.r_max, 400)
    plane = radial_graph(r, np.zeros_like(r), ConeSpec(2, 0.0), cfg.h)
    spec = eigensolve(assemble_stability(plane), 3, cfg.tol_zero)
    lam = spec.lambdas
    ok = abs(lam[0] - 1.5) < 1e-3 and abs(lam[1] - lam[0] - 1.0) < 2e-3
    ctx["plane"] = spec
    return {"lambda1": float(lam[0]), "spacing": float(lam[1] - lam[0]), "passed": bool(ok)}


def _check_residual(cfg: RunConfig, ctx: Dict) -> Dict:
    sheet = match_sheet(ConeSpec(2, 0.5), h=cfg.h, r_max=cfg.r_max)
    plane = match_sheet(ConeSpec(2, 0.0), h=cfg.h, r_max=cfg.r_max)
    flat = float(np.max(np.abs(plane.curve.p)))
    coarse = residual_norm(shoot_sheet(ConeSpec(2, 0.0), sheet.parameter, 2.0 * cfg.h, cfg.r_max))
    order = float(np.log2(coarse / sheet.residual_norm))
    return {"sheet_residual": sheet.residual_norm, "tolerance": sheet.tolerance, "order": order,
            "plane_height": flat,
            "passed": bool(sheet.residual_norm < sheet.tolerance and abs(order - 2.0) < 0.3
                           and flat == 0.0)}


def _check_sweep(cfg: RunConfig, ctx: Dict) -> Dict:
    _, m_star = neck_threshold_slope(2, cfg.h, cfg.r_max)
    slopes = np.linspace(0.2 * m_star, 1.8 * m_star, 20)
    rows = sweep_cone_slope(slopes, 2, cfg.h, cfg.r_max, cfg.threads,
                            os.path.join(cfg.output_dir, "bifurcation.csv"))
    counts = [row["count"] for row in rows]
    threshold = count_threshold(rows)
    return {"neck_threshold": m_star, "count_threshold": threshold, "counts": counts,
            "passed": bool(threshold is not None and max(counts) >= 2 and min(counts) == 1)}


def _check_duhamel(cfg: RunConfig, ctx: Dict) -> Dict:
    spec = ctx.get("plane") or eigensolve(assemble_stability(
        radial_graph(np.linspace(0.0, cfg.r_max, 400), np.zeros(400), ConeSpec(2, 0.0), cfg.h)), 3)
    rho, j = 0.7, 1
    times = np.linspace(-10.0, 0.0, 10001)
    h = np.exp(rho * times)[:, None] * spec.phi(j)[None, :]
    traj = solve_linear(spec, mode_data(spec, (), rho), times, h)
    exact = np.exp(rho * times) / (spec.lambdas[j] + rho)
    err = float(np.max(np.abs(traj.coefficients[:, j] - exact) / exact))
    return {"relative_error": err, "passed": bool(err < 1e-6)}


def _neck(cfg: RunConfig, ctx: Dict):
    if "neck" not in ctx:
        ctx["neck"] = unstable_neck(2, cfg.h, cfg.r_max)
    return ctx["neck"]


def _check_ancient(cfg: RunConfig, ctx: Dict) -> Dict:
    _, spec = _neck(cfg, ctx)
    a = (1e-3,) + (0.0,) * (spec.index - 1)
    params = AncientParams(a)
    traj = construct_ancient(spec, params, cfg.threads)
    half = AncientParams((5e-4,) + a[1:])
    beta = closeness_check(traj, spec, params).beta_empirical
    beta_half = closeness_check(construct_ancient(spec, half, cfg.threads), spec, half).beta_empirical
    rate = backward_rate(traj)
    factors = traj.metadata["contraction_factors"]
    lam1 = -float(spec.lambdas[0])
    ctx["ancient"] = traj
    ok = (all(f < 0.5 for f in factors[1:]) and traj.metadata["pi_minus_error"] < 1e-8
          and abs(rate - lam1) < 0.05 * lam1 and abs(beta - beta_half) <= 0.2 * max(beta, beta_half))
    return {"factors": factors, "rate": rate, "minus_lambda1": lam1, "beta": beta,
            "beta_half": beta_half, "passed": bool(ok)}


def _check_cross(cfg: RunConfig, ctx: Dict) -> Dict:
    _, spec = _neck(cfg, ctx)
    traj = ctx.get("ancient") or construct_ancient(spec, AncientParams((1e-3,) + (0.0,) * (spec.index - 1)))
    k = traj.index_of(-10.0)
    state = FlowState(spec.operator, traj.frames[k], float(traj.times[k]))
    flow = evolve(state, 0.0, 1.0)
    gap = float(np.sqrt(max(weighted_inner(spec.curve, flow.frames[-1] - traj.frames[-1],
                                           flow.frames[-1] - traj.frames[-1]), 0.0)))
    ctx["flow"] = flow
    return {"distance": gap, "passed": bool(gap <= 1e-5)}


def _check_entropy(cfg: RunConfig, ctx: Dict) -> Dict:
    _, spec = _neck(cfg, ctx)
    curve = spec.curve
    rng = np.random.default_rng(cfg.seed)
    v = 1e-3 * spec.phi(0)
    grad = gradient_N(curve, v).values
    worst, eta = 0.0, 1e-6
    for _ in range(20):
        w = rng.standard_normal(4) @ np.array([spec.phi(i) for i in range(4)])
        fd = (graph_energy(curve, v + eta * w) - graph_energy(curve, v - eta * w)) / (2 * eta)
        exact = weighted_inner(curve, grad, w)
        worst = max(worst, abs(fd - exact) / max(abs(exact), 1e-300))
    exponent = expansion_scaling(curve, spec.phi(0), [4e-3, 2e-3, 1e-3])
    return {"gradient_error": worst, "gap_exponent": exponent,
            "passed": bool(worst < 1e-4 and abs(exponent - 3.0) <= 0.3)}


def _check_monotone(cfg: RunConfig, ctx: Dict) -> Dict:
    flow = ctx.get("flow")
    if flow is None:
        _, spec = _neck(cfg, ctx)
        flow = evolve(FlowState(spec.operator, 1e-3 * spec.phi(0), 0.0), 2.0, 0.05)
    report = monotonicity_check(flow)
    return {"max_increase_rate": report.max_increase_rate, "identity_error": report.identity_error,
            "passed": report.passed}


def _check_lojasiewicz(cfg: RunConfig, ctx: Dict) -> Dict:
    profile, spec = _neck(cfg, ctx)
    first = lojasiewicz_suite(profile, spec, seed=cfg.seed)
    second = lojasiewicz_suite(profile, spec, amplitude=5e-4, seed=cfg.seed)
    stable = abs(first["max_ratio"] - second["max_ratio"]) <= 0.2 * first["max_ratio"]
    return {"max_ratio": first["max_ratio"], "max_ratio_half": second["max_ratio"],
            "bound": first["bound"], "passed": bool(first["passed"] and second["passed"] and stable)}


def _check_mz(cfg: RunConfig, ctx: Dict) -> Dict:
    summary = mz_property_suite(range(500), 0.01)
    ok = summary["hypotheses_ok"] == 500 and summary["y_bound_ok"] == 500 \
        and summary["branches"]["none"] == 0
    return {**summary, "passed": bool(ok)}


def _check_modes(cfg: RunConfig, ctx: Dict) -> Dict:
    _, spec = _neck(cfg, ctx)
    traj = ctx.get("ancient") or construct_ancient(spec, AncientParams((1e-3,) + (0.0,) * (spec.index - 1)))
    mt = mode_trajectory(traj, spec)
    early = mt.times <= -5.0
    dominance = float(np.max(mt.V_total[early] / mt.V_minus[early]))
    rate = fit_decay_rate(mt).exponent
    lam1 = -float(spec.lambdas[0])
    system = check_mode_system(mt, s_max=-3.0)
    return {"dominance": dominance, "rate": rate, "minus_lambda1": lam1,
            "mode_system": system.to_dict(),
            "passed": bool(dominance <= 1.01 and abs(rate - lam1) < 0.05 * lam1 and system.passed)}


def _check_morse(cfg: RunConfig, ctx: Dict) -> Dict:
    _, spec = _neck(cfg, ctx)
    result = morse_flow_line(spec, +1, 1e-3)
    if result.status == "converged":
        ok = result.limit_residual <= 1e-5 and result.limit_lambda1 >= -1e-6
    else:
        ok = result.status in ("singular", "max_time")
    return {**result.to_dict(), "passed": bool(ok)}


CHECKS: Dict[str, Callable[[RunConfig, Dict], Dict]] = {
    "plane_spectrum": _check_plane,
    "expander_residual": _check_residual,
    "nonuniqueness": _check_sweep,
    "duhamel": _check_duhamel,
    "ancient": _check_ancient,
    "cross_validation": _check_cross,
    "entropy_gradient": _check_entropy,
    "monotonicity": _check_monotone,
    "lojasiewicz": _check_lojasiewicz,
    "mz_lemma": _check_mz,
    "mode_dominance": _check_modes,
    "morse_flow_line": _check_morse,
}


def cmd_reproduce(args, cfg: RunConfig) -> int:
    selected = args.only.split(",") if args.only else list(CHECKS)
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        raise UsageError(f"comprobaciones desconocidas: {','.join(unknown)}")
    os.makedirs(cfg.output_dir, exist_ok=True)
    ctx: Dict = {}
    rows = []
    for name in selected:
        start = time.perf_counter()
        logger.info("🔄 Comprobación %s", name)
        try:
            result = CHECKS[name](cfg, ctx)
        except ExpanderLabError as exc:
            result = {**exc.to_dict(), "passed": False}
        result["seconds"] = round(time.perf_counter() - start, 3)
        rows.append({"check": name, "passed": result["passed"], "seconds": result["seconds"]})
        write_json(os.path.join(cfg.output_dir, f"{name}.json"), result)
        logger.info("%s %s", "✅" if result["passed"] else "❌", name)
    write_rows(os.path.join(cfg.output_dir, "summary.csv"), rows, ["check", "passed", "seconds"])
    _emit({"checks": rows, "all_passed": all(r["passed"] for r in rows)})
    return 0 if all(r["passed"] for r in rows) else 2


# ============================================================
# PARSER
# ============================================================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="expander-lab", description="Laboratorio numérico de auto-expansores")
    parser.add_argument("--config", help="RunConfig en JSON")
    parser.add_argument("--h", type=float)
    parser.add_argument("--r-max", dest="r_max", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--log-level", dest="log_level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    expander = sub.add_parser("expander").add_subparsers(dest="action", required=True,
                                                         parser_class=_Parser)
    match = expander.add_parser("match")
    match.add_argument("--n", type=int, default=2)
    match.add_argument("--slope", type=float, required=True)
    match.add_argument("--kind", choices=["sheet", "neck"], default="sheet")
    match.add_argument("--which", type=int, default=0)
    match.add_argument("--bracket", default="0,5")
    match.add_argument("--out", required=True)
    match.set_defaults(func=cmd_expander_match)
    sweep = expander.add_parser("sweep")
    sweep.add_argument("--n", type=int, default=2)
    sweep.add_argument("--slopes", required=True)
    sweep.add_argument("--out", default="bifurcation.csv")
    sweep.set_defaults(func=cmd_expander_sweep)

    spectrum = sub.add_parser("spectrum")
    spectrum.add_argument("--profile", required=True)
    spectrum.add_argument("--modes", type=int, default=12)
    spectrum.add_argument("--tol-zero", dest="tol_zero", type=float)
    spectrum.add_argument("--out", required=True)
    spectrum.set_defaults(func=cmd_spectrum)

    ancient = sub.add_parser("ancient").add_subparsers(dest="action", required=True,
                                                       parser_class=_Parser)
    construct = ancient.add_parser("construct")
    construct.add_argument("--spec", required=True)
    construct.add_argument("--a", required=True)
    construct.add_argument("--delta0", type=float)
    construct.add_argument("--eps", type=float, default=1e-2)
    construct.add_argument("--out", required=True)
    construct.set_defaults(func=cmd_ancient)

    flow = sub.add_parser("flow").add_subparsers(dest="action", required=True, parser_class=_Parser)
    run_flow = flow.add_parser("run")
    run_flow.add_argument("--profile", required=True)
    run_flow.add_argument("--v0", default="zero")
    run_flow.add_argument("--to", type=float, required=True)
    run_flow.add_argument("--record", type=float, default=0.5)
    run_flow.add_argument("--modes", type=int, default=12)
    run_flow.add_argument("--out", required=True)
    run_flow.set_defaults(func=cmd_flow_run)
    unres = flow.add_parser("unrescale")
    unres.add_argument("--traj", required=True)
    unres.add_argument("--times")
    unres.add_argument("--out")
    unres.set_defaults(func=cmd_flow_unrescale)

    entropy = sub.add_parser("entropy").add_subparsers(dest="action", required=True,
                                                       parser_class=_Parser)
    check = entropy.add_parser("check")
    check.add_argument("--profile")
    check.add_argument("--spec", required=True)
    check.add_argument("--v", required=True)
    check.add_argument("--R", type=float)
    check.add_argument("--out")
    check.set_defaults(func=cmd_entropy_check)
    mono = entropy.add_parser("monotone")
    mono.add_argument("--traj", required=True)
    mono.add_argument("--out")
    mono.set_defaults(func=cmd_entropy_monotone)

    modes = sub.add_parser("modes").add_subparsers(dest="action", required=True, parser_class=_Parser)
    analyze = modes.add_parser("analyze")
    analyze.add_argument("--traj", required=True)
    analyze.add_argument("--spec", required=True)
    analyze.add_argument("--mu", type=float, default=0.0)
    analyze.add_argument("--s-max", dest="s_max", type=float)
    analyze.add_argument("--out")
    analyze.set_defaults(func=cmd_modes)

    mz = sub.add_parser("mz").add_subparsers(dest="action", required=True, parser_class=_Parser)
    mz_chk = mz.add_parser("check")
    mz_chk.add_argument("--csv", required=True)
    mz_chk.add_argument("--eps", type=float, default=0.01)
    mz_chk.add_argument("--out")
    mz_chk.set_defaults(func=cmd_mz)

    reproduce = sub.add_parser("reproduce")
    reproduce.add_argument("--only", help="lista de comprobaciones separadas por comas")
    reproduce.set_defaults(func=cmd_reproduce)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
        setup_logging(args.log_level)
        cfg = _config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help
        return int(exc.code or 0)
    except ConfigError as exc:
        print(dumps(exc.to_dict()), file=sys.stderr)
        return 1
    except ExpanderLabError as exc:
        logger.error("❌ %s", exc.message)
        print(dumps(exc.to_dict()), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(run())

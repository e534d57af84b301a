"""
storage.py - Persistencia CSV/JSON de perfiles, espectros y trayectorias
=======================================================================
Los arrays numéricos van a CSV (una fila por nodo) y los metadatos a JSON.
Los floats se escriben con repr (17 cifras significativas), de modo que dos
ejecuciones idénticas producen ficheros idénticos byte a byte.

FORMATOS:
    profile.csv   sigma,p,q,theta,kappa,H,xdotN,A2,log_weight
    profile.json  {n, L, start_kind, end_kind, reflected, nodes}
    spec.json     {lambdas, index, nullity, tol_zero, profile, modes: [mode_01.csv, ...]}
    traj/         manifest.json + profile.csv + frame_0000.csv ...
    xyz.csv       s,x,y,z
"""

import os
import csv
import json
import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from errors import ConfigError, PreconditionError
from geometry import ProfileCurve
from spectral import SpectralData, assemble_stability, eigensolve
from duhamel import Trajectory
from modes_mz import MZTrajectory

logger = logging.getLogger(__name__)

PROFILE_COLUMNS = ["sigma", "p", "q", "theta", "kappa", "H", "xdotN", "A2", "log_weight"]
LAMBDA_DRIFT_TOL = 1e-8

# Cache de perfiles (se recarga al modificar el CSV)
_profile_cache: Dict[str, ProfileCurve] = {}
_profile_mtime: Dict[str, float] = {}


# ============================================================
# JSON
# ============================================================

def jsonable(value: Any) -> Any:
    """Convierte arrays y escalares de numpy en tipos nativos."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def dumps(data: Any) -> str:
    return json.dumps(jsonable(data), indent=2, sort_keys=True, ensure_ascii=False)


def write_json(path: str, data: Any) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(data))
        f.write("\n")
    return path


def read_json(path: str) -> Dict:
    if not os.path.exists(path):
        raise ConfigError("fichero JSON no encontrado", path=path)
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _header_path(csv_path: str) -> str:
    return os.path.splitext(csv_path)[0] + ".json"


# ============================================================
# CSV GENÉRICO
# ============================================================

def write_columns(path: str, columns: Dict[str, Sequence[float]]) -> str:
    _ensure_parent(path)
    names = list(columns)
    rows = zip(*(np.asarray(columns[name], dtype=float) for name in names))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(names)
        for row in rows:
            writer.writerow([repr(float(x)) for x in row])
    return path


def read_columns(path: str) -> Dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise ConfigError("fichero CSV no encontrado", path=path)
    with open(path, "r", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        data: Dict[str, List[float]] = {name: [] for name in (reader.fieldnames or [])}
        for row in reader:
            for name in data:
                data[name].append(float(row[name]))
    return {name: np.array(values) for name, values in data.items()}


def write_rows(path: str, rows: List[Dict], columns: Optional[Sequence[str]] = None) -> str:
    """Tabla de dicts a CSV (columnas en el orden dado)."""
    _ensure_parent(path)
    names = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=names, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


# ============================================================
# PERFILES
# ============================================================

def save_profile(curve: ProfileCurve, path: str) -> str:
    columns = {
        "sigma": curve.sigma, "p": curve.p, "q": curve.q, "theta": curve.theta,
        "kappa": curve.kappa, "H": curve.H, "xdotN": curve.xdotN, "A2": curve.A2,
        "log_weight": curve.log_weight,
    }
    write_columns(path, columns)
    write_json(_header_path(path), curve.header())
    logger.info("✅ Perfil guardado: %s (%d nodos)", path, curve.size)
    return path


def load_profile(path: str, force_reload: bool = False) -> ProfileCurve:
    """
    Lee un perfil (CSV + cabecera JSON). Usa caché por ruta y mtime.

    Raises:
        ConfigError: falta el CSV o su cabecera
    """
    key = os.path.abspath(path)
    if not os.path.exists(key):
        raise ConfigError("perfil no encontrado", path=path)
    mtime = os.path.getmtime(key)
    if not force_reload and key in _profile_cache and _profile_mtime.get(key) == mtime:
        return _profile_cache[key]

    header = read_json(_header_path(key))
    cols = read_columns(key)
    missing = [c for c in ("sigma", "p", "q", "theta", "kappa") if c not in cols]
    if missing:
        raise ConfigError("columnas ausentes en el perfil", missing=missing)
    curve = ProfileCurve(int(header["n"]), cols["sigma"], cols["q"], cols["p"], cols["theta"],
                         cols["kappa"], header["start_kind"], header["end_kind"],
                         bool(header["reflected"]))
    _profile_cache[key] = curve
    _profile_mtime[key] = mtime
    logger.info("✅ Perfil cargado: %s", path)
    return curve


# ============================================================
# ESPECTROS
# ============================================================

def save_spectrum(spec: SpectralData, path: str, profile_path: Optional[str] = None) -> str:
    """spec.json junto a un CSV por modo; el perfil se guarda al lado si no se da."""
    base = os.path.dirname(os.path.abspath(path))
    stem = os.path.splitext(os.path.basename(path))[0]
    if profile_path is None:
        profile_path = os.path.join(base, f"{stem}_profile.csv")
        save_profile(spec.curve, profile_path)
    mode_files = []
    for i in range(spec.modes):
        name = f"{stem}_mode_{i + 1:02d}.csv"
        write_columns(os.path.join(base, name), {"sigma": spec.curve.sigma, "phi": spec.phi(i)})
        mode_files.append(name)
    data = spec.to_dict()
    data.update({"profile": os.path.relpath(os.path.abspath(profile_path), base),
                 "mode_files": mode_files})
    return write_json(path, data)


def load_spectrum(path: str) -> SpectralData:
    """Recalcula el espectro desde el perfil referenciado y comprueba los λ guardados."""
    data = read_json(path)
    base = os.path.dirname(os.path.abspath(path))
    curve = load_profile(os.path.join(base, data["profile"]))
    spec = eigensolve(assemble_stability(curve), int(data["modes"]), float(data["tol_zero"]))
    stored = np.asarray(data["lambdas"], dtype=float)
    drift = float(np.max(np.abs(stored - spec.lambdas)))
    if drift > LAMBDA_DRIFT_TOL * max(1.0, float(np.max(np.abs(stored)))):
        logger.warning("⚠️ Autovalores recalculados difieren de spec.json en %.3e", drift)
    return spec


# ============================================================
# TRAYECTORIAS
# ============================================================

def save_trajectory(traj: Trajectory, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    save_profile(traj.curve, os.path.join(directory, "profile.csv"))
    frames = []
    for k, frame in enumerate(traj.frames):
        name = f"frame_{k:04d}.csv"
        write_columns(os.path.join(directory, name), {"sigma": traj.curve.sigma, "v": frame})
        frames.append(name)
    manifest = {
        "provenance": traj.provenance,
        "times": traj.times,
        "coefficients": traj.coefficients,
        "profile": "profile.csv",
        "frames": frames,
        "metadata": traj.metadata,
    }
    path = write_json(os.path.join(directory, "manifest.json"), manifest)
    logger.info("✅ Trayectoria guardada: %s (%d marcos)", directory, len(traj))
    return path


def load_trajectory(directory: str) -> Trajectory:
    manifest = read_json(os.path.join(directory, "manifest.json"))
    curve = load_profile(os.path.join(directory, manifest["profile"]))
    frames = [read_columns(os.path.join(directory, name))["v"] for name in manifest["frames"]]
    coeffs = manifest.get("coefficients")
    return Trajectory(curve, np.asarray(manifest["times"], dtype=float), np.array(frames),
                      manifest["provenance"],
                      None if coeffs is None else np.asarray(coeffs, dtype=float),
                      manifest.get("metadata", {}))


# ============================================================
# TERNAS DEL LEMA EDO
# ============================================================

def load_mz_csv(path: str, eps: float) -> MZTrajectory:
    cols = read_columns(path)
    time_key = "s" if "s" in cols else "t"
    for name in (time_key, "x", "y", "z"):
        if name not in cols:
            raise PreconditionError("columna ausente en el CSV", column=name, path=path)
    return MZTrajectory(cols[time_key], cols["x"], cols["y"], cols["z"], eps)


def save_mz_csv(t: MZTrajectory, path: str) -> str:
    return write_columns(path, {"s": t.times, "x": t.x, "y": t.y, "z": t.z})

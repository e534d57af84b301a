"""
config.py - Configuración global del laboratorio
================================================
Lee las variables de entorno (con soporte .env vía python-dotenv) y expone
constantes en MAYÚSCULAS, la configuración de logging y el RunConfig de
la CLI.

VARIABLES (.env):
    EXPANDER_GRID_H=0.02
    EXPANDER_R_MAX=24
    EXPANDER_TOL_ZERO=1e-6
    EXPANDER_OUTPUT_DIR=outputs
"""

import os
import logging
from dataclasses import dataclass, field, asdict, fields
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv(".env")

# ============================================================
# CONSTANTES
# ============================================================

GRID_H = float(os.environ.get("EXPANDER_GRID_H", "0.02"))
R_MAX = float(os.environ.get("EXPANDER_R_MAX", "24"))
TOL_ZERO = float(os.environ.get("EXPANDER_TOL_ZERO", "1e-6"))
ODE_RTOL = float(os.environ.get("EXPANDER_ODE_RTOL", "1e-10"))
DEFAULT_SEED = int(os.environ.get("EXPANDER_SEED", "12345"))
OUTPUT_DIR = os.environ.get("EXPANDER_OUTPUT_DIR", "outputs")
THREADS = int(os.environ.get("EXPANDER_THREADS", "1"))
LOG_LEVEL = os.environ.get("EXPANDER_LOG_LEVEL", "INFO")

RESIDUAL_TOL = 1e-8         # residuo máximo de un expansor aceptado
SLOPE_MATCH_TOL = 1e-6      # ajuste de pendiente asintótica
FIT_FRACTION = 0.2          # fracción exterior de nodos para el ajuste cónico


# ============================================================
# LOGGING
# ============================================================

def setup_logging(level: Optional[str] = None) -> None:
    """Configura el logging raíz con el formato del proyecto."""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s [%(levelname)s] %(message)s',
        datefmt='%H:%M:%S'
    )


# ============================================================
# RUN CONFIG
# ============================================================

@dataclass
class RunConfig:
    """Parámetros globales de una ejecución de la CLI."""
    h: float = GRID_H
    r_max: float = R_MAX
    seed: int = DEFAULT_SEED
    output_dir: str = OUTPUT_DIR
    threads: int = THREADS
    tol_zero: float = TOL_ZERO
    tolerances: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.h <= 0 or self.r_max <= 0:
            raise ConfigError("h y r_max deben ser positivos", h=self.h, r_max=self.r_max)
        if self.threads < 1:
            raise ConfigError("threads debe ser >= 1", threads=self.threads)
        self.output_dir = os.path.abspath(self.output_dir)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("claves desconocidas en la configuración", keys=unknown)
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

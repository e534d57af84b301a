"""
errors.py - Jerarquía de excepciones del laboratorio de expansores
==================================================================
Todas las operaciones que pueden fallar lanzan una subclase de
ExpanderLabError. Cada excepción sabe serializarse con to_dict() para que
la CLI escriba el error estructurado en stderr.

USO:
    from errors import GeometryError, ShootingError
"""

from typing import Any, Dict


class ExpanderLabError(Exception):
    """Error base del laboratorio."""

    kind = "error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        return {"success": False, "error": self.kind, "message": self.message, **self.details}


class ConfigError(ExpanderLabError):
    kind = "config"


class PreconditionError(ExpanderLabError):
    kind = "precondition"


class GeometryError(ExpanderLabError):
    """Entrada degenerada, grafo auto-intersectado o extremo no cónico."""
    kind = "geometry"


class ShootingError(ExpanderLabError):
    """Fallo del disparo: escape, subdesbordamiento de paso o topología."""
    kind = "shooting"


class BracketError(ExpanderLabError):
    """No hay cambio de signo en el intervalo de búsqueda."""
    kind = "bracket"


class SpectralError(ExpanderLabError):
    kind = "spectral"


class StiffnessError(ExpanderLabError):
    kind = "stiffness"


class ContractionError(ExpanderLabError):
    kind = "contraction"


class FlowError(ExpanderLabError):
    """Paso rechazado: subdesbordamiento o proxy de singularidad."""
    kind = "flow"


class EntropyError(ExpanderLabError):
    kind = "entropy"


class SpectralAmbiguityWarning(UserWarning):
    """Un autovalor cae a menos de 10x de tol_zero: clasificación inestable."""

"""Fixtures compartidas: plano, hoja, cuello inestable y su solución antigua."""

import numpy as np
import pytest

from errors import SpectralError
from geometry import ConeSpec, radial_graph
from expander_solver import match_sheet
from spectral import assemble_stability, eigensolve, unstable_neck
from ancient import AncientParams, construct_ancient


@pytest.fixture(scope="session")
def plane():
    r = np.linspace(0.0, 24.0, 400)
    return radial_graph(r, np.zeros_like(r), ConeSpec(2, 0.0))


@pytest.fixture(scope="session")
def plane_spec(plane):
    return eigensolve(assemble_stability(plane), 12)


@pytest.fixture(scope="session")
def sheet():
    return match_sheet(ConeSpec(2, 0.5))


@pytest.fixture(scope="session")
def neck():
    try:
        return unstable_neck()
    except SpectralError as exc:
        pytest.skip(f"sin cuello inestable en la malla: {exc.message}")


@pytest.fixture(scope="session")
def neck_spec(neck):
    return neck[1]


@pytest.fixture(scope="session")
def ancient_params(neck_spec):
    a = np.zeros(neck_spec.index)
    a[0] = 1e-3
    return AncientParams(tuple(a))


@pytest.fixture(scope="session")
def ancient(neck_spec, ancient_params):
    return construct_ancient(neck_spec, ancient_params)


@pytest.fixture
def bump():
    """Función lisa localizada, nula en los extremos Dirichlet."""
    def make(curve, center, width=1.0):
        values = np.exp(-((curve.radius - center) / width) ** 2)
        values[~curve.active] = 0.0
        return values
    return make

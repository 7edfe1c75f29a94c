"""Canonical unit scaling.

The state-transition matrices are badly conditioned when positions are in
km and velocities in km/s, so everything dynamical runs in canonical units:
lengths in LU, velocities in VU = sqrt(mu_moon / LU), times in TU = LU / VU.
The scaled lunar gravitational parameter is exactly 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .state import StateVector


@dataclass(frozen=True)
class CanonicalScales:
    lu: float   # km
    vu: float   # km/s
    tu: float   # s
    mu_canonical: float = 1.0


def make_canonical_scales(mu: float, lu: float) -> CanonicalScales:
    """Build scales from the central GM (km^3/s^2) and a length unit (km)."""
    if mu <= 0.0 or lu <= 0.0:
        raise ValueError("mu and LU must be positive")
    vu = math.sqrt(mu / lu)
    return CanonicalScales(lu=lu, vu=vu, tu=lu / vu)


def to_canonical(x: StateVector, s: CanonicalScales) -> StateVector:
    """Scale a physical (km, km/s) state into canonical units."""
    return StateVector(r=x.r / s.lu, v=x.v / s.vu)


def from_canonical(x: StateVector, s: CanonicalScales) -> StateVector:
    """Scale a canonical state back to km and km/s."""
    return StateVector(r=x.r * s.lu, v=x.v * s.vu)


def seconds_to_tu(t: float | np.ndarray, s: CanonicalScales):
    return t / s.tu


def tu_to_seconds(t: float | np.ndarray, s: CanonicalScales):
    return t * s.tu

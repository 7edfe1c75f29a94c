"""Stochastic error models for the closed-loop simulation.

Maneuver execution corruption (fixed/proportional magnitude plus pointing),
per-sample SRP property dispersion, and momentum-wheel desaturation
impulses. All dispersions are configured as 3-sigma values, the way these
budgets are usually tabulated; samplers divide by three internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .units import CanonicalScales


@dataclass(frozen=True)
class ErrorModelConfig:
    """3-sigma dispersion levels for every stochastic effect in the loop."""

    srp_am_sigma_rel: float = 0.30        # relative, on A/m
    srp_cr_sigma_rel: float = 0.15        # relative, on Cr
    desat_sigma_cms: float = 1.0          # cm/s
    desat_anomalies_deg: tuple = (0.0,)
    dv_sigma_rel: float = 0.015           # relative magnitude
    dv_sigma_abs_mms: float = 1.42        # mm/s
    dv_sigma_dir_deg: float = 1.0         # pointing, degrees
    init_pos_sigma_km: float = 10.0
    init_vel_sigma_mms: float = 10.0
    range_sigma_m: float = 1.0
    range_rate_sigma_mms: float = 0.1

    def __post_init__(self):
        numeric = [self.srp_am_sigma_rel, self.srp_cr_sigma_rel,
                   self.desat_sigma_cms, self.dv_sigma_rel,
                   self.dv_sigma_abs_mms, self.dv_sigma_dir_deg,
                   self.init_pos_sigma_km, self.init_vel_sigma_mms,
                   self.range_sigma_m, self.range_rate_sigma_mms]
        if any(v < 0.0 for v in numeric):
            raise ValueError("dispersions must be non-negative")
        object.__setattr__(self, "desat_anomalies_deg",
                           tuple(self.desat_anomalies_deg))

    @classmethod
    def quiet(cls) -> "ErrorModelConfig":
        """Every dispersion zeroed; useful for deterministic checks."""
        return cls(srp_am_sigma_rel=0.0, srp_cr_sigma_rel=0.0,
                   desat_sigma_cms=0.0, desat_anomalies_deg=(),
                   dv_sigma_rel=0.0, dv_sigma_abs_mms=0.0,
                   dv_sigma_dir_deg=0.0, init_pos_sigma_km=0.0,
                   init_vel_sigma_mms=0.0, range_sigma_m=0.0,
                   range_rate_sigma_mms=0.0)


def uniform_direction(rng: np.random.Generator) -> np.ndarray:
    """Isotropic unit vector."""
    while True:
        v = rng.standard_normal(3)
        n = float(np.linalg.norm(v))
        if n > 1e-12:
            return v / n


def corrupt_maneuver(dv_commanded: np.ndarray, err: ErrorModelConfig,
                     rng: np.random.Generator,
                     scales: CanonicalScales) -> np.ndarray:
    """Executed impulse under fixed/proportional magnitude and pointing errors.

    Canonical in, canonical out. A zero command picks up only the absolute
    magnitude error, along an isotropic direction.
    """
    dv_commanded = np.asarray(dv_commanded, dtype=float)
    sigma_abs = (err.dv_sigma_abs_mms / 3.0) * 1e-6 / scales.vu
    mag = float(np.linalg.norm(dv_commanded))
    if mag == 0.0:
        if sigma_abs == 0.0:
            return np.zeros(3)
        return rng.normal(0.0, sigma_abs) * uniform_direction(rng)

    d_abs = rng.normal(0.0, sigma_abs) if sigma_abs > 0.0 else 0.0
    sigma_rel = err.dv_sigma_rel / 3.0
    d_rel = mag * rng.normal(0.0, sigma_rel) if sigma_rel > 0.0 else 0.0
    executed_mag = mag + d_abs + d_rel

    unit = dv_commanded / mag
    sigma_dir = math.radians(err.dv_sigma_dir_deg) / 3.0
    if sigma_dir > 0.0:
        # rotation axis uniformly distributed in the plane normal to the burn
        seed = uniform_direction(rng)
        axis = np.cross(unit, seed)
        axis_norm = float(np.linalg.norm(axis))
        while axis_norm < 1e-12:
            seed = uniform_direction(rng)
            axis = np.cross(unit, seed)
            axis_norm = float(np.linalg.norm(axis))
        axis /= axis_norm
        angle = rng.normal(0.0, sigma_dir)
        ca, sa = math.cos(angle), math.sin(angle)
        unit = (ca * unit + sa * np.cross(axis, unit)
                + (1.0 - ca) * (axis @ unit) * axis)
    return executed_mag * unit


def sample_srp_dispersion(err: ErrorModelConfig,
                          rng: np.random.Generator) -> tuple[float, float]:
    """Relative (A/m, Cr) factors, drawn once and held through a sample."""
    d_am = rng.normal(0.0, err.srp_am_sigma_rel / 3.0) if err.srp_am_sigma_rel else 0.0
    d_cr = rng.normal(0.0, err.srp_cr_sigma_rel / 3.0) if err.srp_cr_sigma_rel else 0.0
    return d_am, d_cr


def desaturation_impulse(err: ErrorModelConfig, rng: np.random.Generator,
                         scales: CanonicalScales) -> np.ndarray:
    """Wheel-unload impulse: isotropic direction, folded-normal magnitude."""
    sigma = (err.desat_sigma_cms / 3.0) * 1e-5 / scales.vu   # cm/s -> km/s
    if sigma == 0.0:
        return np.zeros(3)
    direction = uniform_direction(rng)
    return abs(rng.normal(0.0, sigma)) * direction

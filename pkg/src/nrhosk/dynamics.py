"""Perturbed equations of motion about the Moon.

Force model: lunar point mass, lunar J2, Earth and Sun third-body gravity,
and cannonball solar radiation pressure. All public operations take and
return canonical units (LU, VU) with epochs in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .constants import PhysicalConstants, load_constants
from .ephem import EARTH, SUN, EphemerisConfig, ephemeris_config, pack_elements
from .state import Epoch, StateVector, Stm
from .units import CanonicalScales, make_canonical_scales


class SingularStateError(ValueError):
    """State evaluated at (or numerically on top of) a gravitational singularity."""


@dataclass(frozen=True)
class SpacecraftParams:
    """SRP-relevant spacecraft properties."""

    area_to_mass: float   # m^2/kg
    cr: float             # radiation pressure coefficient

    def __post_init__(self):
        if self.area_to_mass <= 0.0:
            raise ValueError("area_to_mass must be positive")


@dataclass(frozen=True)
class DynamicsModel:
    """Bundles constants, canonical scales, and spacecraft into one force model.

    The packed kernel parameters are precomputed here once; propagation and
    filtering hot paths reuse them without further conversion.
    """

    constants: PhysicalConstants
    scales: CanonicalScales
    spacecraft: SpacecraftParams
    include_j2: bool = True
    include_earth: bool = True
    include_sun: bool = True
    include_srp: bool = True
    pack: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        g = self.constants.gravity
        s = self.scales
        p = np.zeros(_kernels.PACK_SIZE)
        p[_kernels.MU_MOON] = g.mu_moon / (s.lu * s.vu**2)  # 1 by construction
        p[_kernels.MU_EARTH] = g.mu_earth / (s.lu * s.vu**2)
        p[_kernels.MU_SUN] = g.mu_sun / (s.lu * s.vu**2)
        p[_kernels.J2_MOON] = g.j2_moon
        p[_kernels.R_MOON] = g.r_moon / s.lu
        # P * Cr * A/m is m/s^2; canonical acceleration is LU/TU^2.
        srp_kms2 = g.p_srp * self.spacecraft.cr * self.spacecraft.area_to_mass * 1e-3
        p[_kernels.SRP_COEFF] = srp_kms2 * s.tu**2 / s.lu
        p[_kernels.EMB_FACTOR] = self.constants.emb_factor
        p[_kernels.OBLIQUITY] = self.constants.moon_pole_obliquity
        p[_kernels.FLAG_J2] = 1.0 if self.include_j2 else 0.0
        p[_kernels.FLAG_EARTH] = 1.0 if self.include_earth else 0.0
        p[_kernels.FLAG_SUN] = 1.0 if self.include_sun else 0.0
        p[_kernels.FLAG_SRP] = 1.0 if self.include_srp else 0.0
        p[_kernels.EARTH_EL:_kernels.EARTH_EL + 13] = pack_elements(
            self.constants.earth_orbit, length_scale=s.lu, time_scale=s.tu)
        p[_kernels.SUN_EL:_kernels.SUN_EL + 13] = pack_elements(
            self.constants.sun_orbit, length_scale=s.lu, time_scale=s.tu)
        p.setflags(write=False)
        object.__setattr__(self, "pack", p)

    @property
    def ephemeris(self) -> EphemerisConfig:
        return ephemeris_config(self.constants)

    def with_spacecraft(self, spacecraft: SpacecraftParams) -> "DynamicsModel":
        return DynamicsModel(
            constants=self.constants, scales=self.scales, spacecraft=spacecraft,
            include_j2=self.include_j2, include_earth=self.include_earth,
            include_sun=self.include_sun, include_srp=self.include_srp)

    def t_canonical(self, epoch: Epoch) -> float:
        return float(epoch) / self.scales.tu


def default_model(constants: PhysicalConstants | None = None,
                  spacecraft: SpacecraftParams | None = None,
                  **toggles) -> DynamicsModel:
    """Model with packaged constants and, by default, all perturbations on."""
    constants = constants or load_constants()
    spacecraft = spacecraft or SpacecraftParams(area_to_mass=315.0 / 17900.0, cr=2.0)
    scales = make_canonical_scales(constants.gravity.mu_moon, constants.lu)
    return DynamicsModel(constants=constants, scales=scales,
                         spacecraft=spacecraft, **toggles)


def _check_position(r: np.ndarray):
    if not np.all(np.isfinite(r)) or float(r @ r) == 0.0:
        raise SingularStateError("position at the central singularity")


def accel_total(x: StateVector, t: Epoch, model: DynamicsModel) -> np.ndarray:
    """Total canonical acceleration of all enabled force terms."""
    _check_position(x.r)
    return _kernels.accel_total(model.t_canonical(t), x.as_array(), model.pack)


def accel_kepler(x: StateVector, model: DynamicsModel) -> np.ndarray:
    _check_position(x.r)
    return _kernels.accel_kepler(x.r, model.pack[_kernels.MU_MOON])


def accel_j2(x: StateVector, t: Epoch, model: DynamicsModel) -> np.ndarray:
    _check_position(x.r)
    return _kernels.accel_j2(model.t_canonical(t), x.r, model.pack)


def accel_third_body(x: StateVector, t: Epoch, model: DynamicsModel,
                     body: str) -> np.ndarray:
    tc = model.t_canonical(t)
    if body == EARTH:
        d, _ = _kernels.earth_state(tc, model.pack)
        mu = model.pack[_kernels.MU_EARTH]
    elif body == SUN:
        d, _ = _kernels.sun_state(tc, model.pack)
        mu = model.pack[_kernels.MU_SUN]
    else:
        raise ValueError(f"unknown body {body!r}")
    sep = x.r - d
    if float(sep @ sep) == 0.0:
        raise SingularStateError(f"state coincides with {body}")
    return _kernels.accel_third_body(x.r, d, mu)


def accel_srp(x: StateVector, t: Epoch, model: DynamicsModel) -> np.ndarray:
    tc = model.t_canonical(t)
    d_sun, _ = _kernels.sun_state(tc, model.pack)
    sep = x.r - d_sun
    if float(sep @ sep) == 0.0:
        raise SingularStateError("state coincides with the sun")
    return _kernels.accel_srp(tc, x.r, model.pack)


def jacobian(x: StateVector, t: Epoch, model: DynamicsModel) -> np.ndarray:
    """6x6 Jacobian of the equations of motion at (x, t)."""
    _check_position(x.r)
    a_r = _kernels.accel_jacobian(model.t_canonical(t), x.as_array(), model.pack)
    jac = np.zeros((6, 6))
    jac[:3, 3:] = np.eye(3)
    jac[3:, :3] = a_r
    return jac


def osculating_true_anomaly(x: StateVector, mu: float = 1.0) -> float:
    """Instantaneous Keplerian true anomaly of a Cartesian state, in [0, 2*pi).

    theta = atan2(h * v_r, h^2 / r - mu), with h the angular momentum
    magnitude and v_r the radial velocity.
    """
    rn = float(np.linalg.norm(x.r))
    if rn == 0.0:
        raise SingularStateError("true anomaly undefined at r = 0")
    h_vec = np.cross(x.r, x.v)
    h = float(np.linalg.norm(h_vec))
    if h == 0.0:
        raise ValueError("true anomaly undefined for rectilinear motion (h = 0)")
    v_r = float(x.r @ x.v) / rn
    theta = math.atan2(h * v_r, h * h / rn - mu)
    return theta % (2.0 * math.pi)


def ftle(stm_one_rev: Stm | np.ndarray, horizon: float) -> float:
    """Finite-time Lyapunov exponent over ``horizon``: ln(sigma_max) / |T|.

    Uses the largest singular value of the transition matrix (largest
    eigenvalue of Phi^T Phi under a square root), the Cauchy-Green
    stretching convention.
    """
    if horizon == 0.0:
        raise ValueError("horizon must be nonzero")
    mat = stm_one_rev.matrix if isinstance(stm_one_rev, Stm) else np.asarray(stm_one_rev, float)
    if not np.all(np.isfinite(mat)):
        raise ValueError("transition matrix has non-finite entries")
    sigma_max = float(np.linalg.norm(mat, ord=2))
    return math.log(sigma_max) / abs(horizon)

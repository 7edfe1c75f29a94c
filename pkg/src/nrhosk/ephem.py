"""Analytic ephemerides and frame transformations.

Celestial positions come from fixed two-body ellipses (Earth about the
Moon, Sun about the Earth-Moon barycenter) rather than kernel files; the
rotating and principal-axes frames are derived from the same elements, so
every frame quantity is smooth and exactly reproducible.

Public functions work in km, km/s, and seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .constants import BodyElements, PhysicalConstants
from .state import Epoch, StateVector

EARTH = "earth"
SUN = "sun"


@dataclass(frozen=True)
class EphemerisConfig:
    """Everything needed to evaluate body positions and derived frames."""

    earth: BodyElements        # Earth relative to the Moon
    sun: BodyElements          # Sun relative to the Earth-Moon barycenter
    emb_factor: float          # m_E / (m_E + m_M)
    moon_pole_obliquity: float


def ephemeris_config(constants: PhysicalConstants) -> EphemerisConfig:
    return EphemerisConfig(
        earth=constants.earth_orbit,
        sun=constants.sun_orbit,
        emb_factor=constants.emb_factor,
        moon_pole_obliquity=constants.moon_pole_obliquity,
    )


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def perifocal_rotation(inc: float, raan: float, argp: float) -> np.ndarray:
    """Active rotation taking perifocal coordinates to the base frame."""
    return rot_z(raan) @ rot_x(inc) @ rot_z(argp)


def pack_elements(body: BodyElements, length_scale: float = 1.0,
                  time_scale: float = 1.0) -> np.ndarray:
    """13-entry element pack for the compiled ellipse kernel."""
    rot = perifocal_rotation(body.inc, body.raan, body.argp)
    out = np.empty(13)
    out[0] = body.sma / length_scale
    out[1] = body.ecc
    out[2] = body.mean_motion * time_scale
    out[3] = body.perigee_epoch / time_scale
    out[4:] = rot.ravel()
    return out


def _physical_pack(cfg: EphemerisConfig) -> np.ndarray:
    """Kernel parameter pack in km/s units (frames only; force terms unset)."""
    p = np.zeros(_kernels.PACK_SIZE)
    p[_kernels.EMB_FACTOR] = cfg.emb_factor
    p[_kernels.OBLIQUITY] = cfg.moon_pole_obliquity
    p[_kernels.EARTH_EL:_kernels.EARTH_EL + 13] = pack_elements(cfg.earth)
    p[_kernels.SUN_EL:_kernels.SUN_EL + 13] = pack_elements(cfg.sun)
    return p


@dataclass(frozen=True)
class FrameTransform:
    """Rotation from inertial into a (possibly rotating) target frame.

    ``rotation`` rows are the target axes in inertial coordinates;
    ``angular_velocity`` is the target frame's rate relative to inertial,
    resolved in the target frame (rad/s).
    """

    rotation: np.ndarray
    angular_velocity: np.ndarray

    def apply_to_state(self, x: StateVector) -> StateVector:
        """Express a Moon-centered inertial state in this frame."""
        r_f = self.rotation @ x.r
        v_f = self.rotation @ x.v - np.cross(self.angular_velocity, r_f)
        return StateVector(r=r_f, v=v_f)

    def state_to_inertial(self, x: StateVector) -> StateVector:
        r_i = self.rotation.T @ x.r
        v_i = self.rotation.T @ (x.v + np.cross(self.angular_velocity, x.r))
        return StateVector(r=r_i, v=v_i)

    def rotate_vector(self, u: np.ndarray) -> np.ndarray:
        """Resolve a free vector (e.g. an impulse) in this frame."""
        return self.rotation @ u

    def vector_to_inertial(self, u: np.ndarray) -> np.ndarray:
        return self.rotation.T @ u

    def state_matrix(self) -> np.ndarray:
        """6x6 linear map taking inertial (r, v) to frame-resolved (r, v)."""
        m = np.zeros((6, 6))
        m[:3, :3] = self.rotation
        m[3:, 3:] = self.rotation
        w = self.rotation.T @ self.angular_velocity  # back to inertial coords
        skew = np.array([
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ])
        m[3:, :3] = -self.rotation @ skew
        return m


def body_position(body: str, epoch: Epoch, cfg: EphemerisConfig) -> np.ndarray:
    """Position of a perturbing body relative to the Moon, km."""
    return body_state(body, epoch, cfg)[0]


def body_state(body: str, epoch: Epoch, cfg: EphemerisConfig) -> tuple[np.ndarray, np.ndarray]:
    """Position (km) and velocity (km/s) of a body relative to the Moon."""
    p = _physical_pack(cfg)
    if body == EARTH:
        return _kernels.earth_state(float(epoch), p)
    if body == SUN:
        return _kernels.sun_state(float(epoch), p)
    raise ValueError(f"unknown body {body!r}; expected {EARTH!r} or {SUN!r}")


def em_rotating_frame(epoch: Epoch, cfg: EphemerisConfig) -> FrameTransform:
    """Earth-Moon rotating frame: x Earth-to-Moon, z along the orbit normal."""
    rot, w_inertial = _kernels.em_rotation(float(epoch), _physical_pack(cfg))
    return FrameTransform(rotation=rot, angular_velocity=rot @ w_inertial)


def pa_frame(epoch: Epoch, cfg: EphemerisConfig) -> FrameTransform:
    """Lunar principal axes: the EM frame tilted by the configured obliquity."""
    p = _physical_pack(cfg)
    rot = _kernels.pa_rotation(float(epoch), p)
    _, w_inertial = _kernels.em_rotation(float(epoch), p)
    return FrameTransform(rotation=rot, angular_velocity=rot @ w_inertial)

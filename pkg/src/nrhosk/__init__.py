"""Station-keeping simulation toolkit for near-rectilinear halo orbits."""

__version__ = "0.1.0"

from .constants import (
    BodyElements,
    GravityConstants,
    PhysicalConstants,
    load_constants,
)
from .dynamics import (
    DynamicsModel,
    SpacecraftParams,
    default_model,
    osculating_true_anomaly,
)
from .ephem import (
    EphemerisConfig,
    FrameTransform,
    body_position,
    em_rotating_frame,
    ephemeris_config,
    pa_frame,
)
from .state import Epoch, StateVector, Stm
from .units import (
    CanonicalScales,
    from_canonical,
    make_canonical_scales,
    to_canonical,
)

__all__ = [
    "BodyElements",
    "CanonicalScales",
    "DynamicsModel",
    "Epoch",
    "EphemerisConfig",
    "FrameTransform",
    "GravityConstants",
    "PhysicalConstants",
    "SpacecraftParams",
    "StateVector",
    "Stm",
    "body_position",
    "default_model",
    "em_rotating_frame",
    "ephemeris_config",
    "from_canonical",
    "load_constants",
    "make_canonical_scales",
    "osculating_true_anomaly",
    "pa_frame",
    "to_canonical",
]

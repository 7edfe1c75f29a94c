"""Physical constants and their file-based source of truth.

All constants (gravitational parameters, lunar shape, SRP pressure,
analytic ephemeris elements) live in a single key-value text file shipped
with the package, so a run can be reproduced from human-readable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

DEFAULT_CONSTANTS_RESOURCE = "constants.txt"


class ConstantsError(ValueError):
    """Raised for malformed or physically invalid constants files."""


@dataclass(frozen=True)
class GravityConstants:
    """Gravity, shape, and SRP constants of the force model (km, s, N/m^2)."""

    mu_moon: float
    mu_earth: float
    mu_sun: float
    j2_moon: float
    r_moon: float
    p_srp: float

    def __post_init__(self):
        for name in ("mu_moon", "mu_earth", "mu_sun", "j2_moon", "r_moon", "p_srp"):
            if getattr(self, name) <= 0.0:
                raise ConstantsError(f"{name} must be positive")


@dataclass(frozen=True)
class BodyElements:
    """Keplerian elements of one perturbing body's analytic orbit (km, s, rad)."""

    mu: float               # gravitational parameter of the body, km^3/s^2
    sma: float              # semi-major axis, km
    ecc: float
    inc: float
    raan: float
    argp: float
    perigee_epoch: float    # epoch of perigee passage, s
    mean_motion: float      # rad/s, derived from the appropriate system GM

    def __post_init__(self):
        if not 0.0 <= self.ecc < 1.0:
            raise ConstantsError("eccentricity must be in [0, 1)")
        if self.sma <= 0.0 or self.mu <= 0.0 or self.mean_motion <= 0.0:
            raise ConstantsError("sma, mu, and mean_motion must be positive")

    def period(self) -> float:
        return 2.0 * math.pi / self.mean_motion


@dataclass(frozen=True)
class PhysicalConstants:
    """Fully parsed constants file: gravity model plus ephemeris elements."""

    gravity: GravityConstants
    earth_orbit: BodyElements      # Earth relative to the Moon
    sun_orbit: BodyElements        # Sun relative to the Earth-Moon barycenter
    earth_moon_mass_ratio: float   # m_earth / m_moon
    moon_pole_obliquity: float     # rad, tilt of the lunar pole off the orbit normal
    au: float
    lu: float                      # canonical length unit, km

    @property
    def emb_factor(self) -> float:
        """Earth mass fraction m_E / (m_E + m_M), used to offset the Sun ephemeris."""
        return self.earth_moon_mass_ratio / (1.0 + self.earth_moon_mass_ratio)

    def synodic_period(self) -> float:
        """Earth-Moon synodic period implied by the configured mean motions, s."""
        return 2.0 * math.pi / (self.earth_orbit.mean_motion - self.sun_orbit.mean_motion)


def parse_constants_text(text: str) -> dict[str, float]:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    values: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConstantsError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConstantsError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = float(val.strip())
        except ValueError as exc:
            raise ConstantsError(f"line {lineno}: bad number for {key!r}") from exc
    return values


_REQUIRED_KEYS = (
    "mu_moon", "mu_earth", "mu_sun", "earth_moon_mass_ratio",
    "j2_moon", "r_moon", "p_srp", "au",
    "earth_sma", "earth_ecc", "earth_inc", "earth_raan", "earth_argp",
    "earth_perigee_epoch",
    "sun_sma", "sun_ecc", "sun_inc", "sun_raan", "sun_argp",
    "sun_perigee_epoch",
    "moon_pole_obliquity", "lu",
)


def constants_from_mapping(values: dict[str, float]) -> PhysicalConstants:
    missing = [k for k in _REQUIRED_KEYS if k not in values]
    if missing:
        raise ConstantsError(f"missing keys: {', '.join(missing)}")

    gravity = GravityConstants(
        mu_moon=values["mu_moon"],
        mu_earth=values["mu_earth"],
        mu_sun=values["mu_sun"],
        j2_moon=values["j2_moon"],
        r_moon=values["r_moon"],
        p_srp=values["p_srp"],
    )
    # Two-body mean motions: Earth-Moon relative orbit uses mu_E + mu_M;
    # the Sun-about-barycenter orbit uses the full three-mass GM.
    n_earth = math.sqrt((values["mu_earth"] + values["mu_moon"]) / values["earth_sma"] ** 3)
    n_sun = math.sqrt(
        (values["mu_sun"] + values["mu_earth"] + values["mu_moon"]) / values["sun_sma"] ** 3
    )
    earth_orbit = BodyElements(
        mu=values["mu_earth"],
        sma=values["earth_sma"],
        ecc=values["earth_ecc"],
        inc=values["earth_inc"],
        raan=values["earth_raan"],
        argp=values["earth_argp"],
        perigee_epoch=values["earth_perigee_epoch"],
        mean_motion=n_earth,
    )
    sun_orbit = BodyElements(
        mu=values["mu_sun"],
        sma=values["sun_sma"],
        ecc=values["sun_ecc"],
        inc=values["sun_inc"],
        raan=values["sun_raan"],
        argp=values["sun_argp"],
        perigee_epoch=values["sun_perigee_epoch"],
        mean_motion=n_sun,
    )
    return PhysicalConstants(
        gravity=gravity,
        earth_orbit=earth_orbit,
        sun_orbit=sun_orbit,
        earth_moon_mass_ratio=values["earth_moon_mass_ratio"],
        moon_pole_obliquity=values["moon_pole_obliquity"],
        au=values["au"],
        lu=values["lu"],
    )


def load_constants(path: str | Path | None = None) -> PhysicalConstants:
    """Load constants from ``path``, or the packaged defaults when omitted."""
    if path is None:
        text = resources.files("nrhosk.data").joinpath(DEFAULT_CONSTANTS_RESOURCE).read_text()
    else:
        text = Path(path).read_text()
    return constants_from_mapping(parse_constants_text(text))

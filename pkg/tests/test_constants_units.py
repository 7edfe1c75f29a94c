import math

import numpy as np
import pytest

from nrhosk.constants import (
    ConstantsError,
    constants_from_mapping,
    load_constants,
    parse_constants_text,
)
from nrhosk.state import StateVector
from nrhosk.units import (
    from_canonical,
    make_canonical_scales,
    to_canonical,
)


def test_default_constants_load():
    c = load_constants()
    assert c.gravity.mu_moon == pytest.approx(4902.800066)
    assert c.lu == 100000.0
    assert 0.0 < c.earth_orbit.ecc < 1.0
    assert 0.0 < c.sun_orbit.ecc < 1.0
    # 2/9 of the synodic month is the targeted orbit period, about 6.55 days
    assert (2.0 / 9.0) * c.synodic_period() / 86400.0 == pytest.approx(6.55, abs=0.1)


def test_parse_rejects_malformed_lines():
    with pytest.raises(ConstantsError, match="key = value"):
        parse_constants_text("mu_moon 4902.8")
    with pytest.raises(ConstantsError, match="bad number"):
        parse_constants_text("mu_moon = not-a-number")
    with pytest.raises(ConstantsError, match="duplicate"):
        parse_constants_text("a = 1\na = 2")


def test_missing_key_reported():
    values = parse_constants_text("mu_moon = 4902.8")
    with pytest.raises(ConstantsError, match="missing keys"):
        constants_from_mapping(values)


def test_invalid_eccentricity_rejected():
    values = parse_constants_text(
        open_default_text().replace("earth_ecc = 0.0549", "earth_ecc = 1.2"))
    with pytest.raises(ConstantsError, match="eccentricity"):
        constants_from_mapping(values)


def open_default_text() -> str:
    from importlib import resources

    return resources.files("nrhosk.data").joinpath("constants.txt").read_text()


def test_scales_from_paper_length_unit():
    c = load_constants()
    s = make_canonical_scales(c.gravity.mu_moon, 100000.0)
    assert s.vu == pytest.approx(math.sqrt(c.gravity.mu_moon / 1e5), rel=1e-15)
    assert s.tu == pytest.approx(s.lu / s.vu, rel=1e-15)
    assert s.mu_canonical == 1.0


def test_scales_algebraic_identity():
    # LU numerically equal to mu gives VU = 1
    s = make_canonical_scales(4902.800066, 4902.800066)
    assert s.vu == pytest.approx(1.0, rel=1e-15)


def test_scales_reject_nonpositive():
    with pytest.raises(ValueError):
        make_canonical_scales(-1.0, 1e5)
    with pytest.raises(ValueError):
        make_canonical_scales(4902.8, 0.0)


def test_canonical_round_trip(rng):
    s = make_canonical_scales(4902.800066, 1e5)
    for _ in range(20):
        x = StateVector(r=rng.normal(size=3) * 7e4, v=rng.normal(size=3) * 1.5)
        back = from_canonical(to_canonical(x, s), s)
        np.testing.assert_allclose(back.r, x.r, rtol=1e-14)
        np.testing.assert_allclose(back.v, x.v, rtol=1e-14)


def test_canonical_zero_and_unit_radius():
    s = make_canonical_scales(4902.800066, 1e5)
    zero = to_canonical(StateVector(r=np.zeros(3), v=np.zeros(3)), s)
    assert np.all(zero.r == 0.0) and np.all(zero.v == 0.0)
    one_lu = to_canonical(StateVector(r=[1e5, 0, 0], v=[0, 0, 0]), s)
    assert np.linalg.norm(one_lu.r) == pytest.approx(1.0, rel=1e-15)

import math

import numpy as np
import pytest

from nrhosk import propagation as prop
from nrhosk.dynamics import default_model, osculating_true_anomaly
from nrhosk.state import StateVector, Stm

TWO_PI = 2.0 * math.pi


@pytest.fixture(scope="module")
def cfg():
    return prop.IntegratorConfig()


@pytest.fixture(scope="module")
def conservative_model():
    """All gravity terms, no SRP."""
    return default_model(include_srp=False)


def eccentric_ellipse(period_days=6.55, perilune_lu=0.035):
    """Kepler ellipse shaped like the operational orbit (canonical units)."""
    t_tu = period_days * 86400.0 / default_model().scales.tu
    a = (t_tu / TWO_PI) ** (2.0 / 3.0)
    e = 1.0 - perilune_lu / a
    rp = a * (1.0 - e)
    vp = math.sqrt((1.0 + e) / rp)  # vis-viva at perilune, mu = 1
    x0 = StateVector(r=[rp, 0.0, 0.0], v=[0.0, vp * math.cos(0.4), vp * math.sin(0.4)])
    return x0, t_tu * default_model().scales.tu, a, e


def two_body_energy(x: StateVector) -> float:
    return 0.5 * float(x.v @ x.v) - 1.0 / float(np.linalg.norm(x.r))


# --- basic propagation -------------------------------------------------------

def test_zero_span_returns_input(cfg, kepler_model):
    x0 = StateVector(r=[0.5, 0.1, 0.0], v=[0.0, 1.2, 0.3])
    assert prop.propagate(x0, 5.0, 5.0, cfg, kepler_model) is x0


def test_circular_orbit_closes_after_one_period(cfg, kepler_model):
    r = 0.5
    x0 = StateVector(r=[r, 0.0, 0.0], v=[0.0, math.sqrt(1.0 / r), 0.0])
    period_s = TWO_PI * math.sqrt(r**3) * kepler_model.scales.tu
    x1 = prop.propagate(x0, 0.0, period_s, cfg, kepler_model)
    np.testing.assert_allclose(x1.as_array(), x0.as_array(), rtol=0, atol=1e-9)


def test_forward_backward_round_trip(cfg, model):
    x0 = StateVector(r=[0.05, 0.01, -0.2], v=[0.6, 0.2, 0.1])
    day = 86400.0
    mid = prop.propagate(x0, 0.0, day, cfg, model)
    back = prop.propagate(mid, day, 0.0, cfg, model)
    err = np.linalg.norm(back.as_array() - x0.as_array())
    assert err <= 1e-8 * max(1.0, np.linalg.norm(x0.as_array()))


def test_two_body_conservation_over_ten_periods(cfg, kepler_model):
    x0, period_s, a, e = eccentric_ellipse()
    h0 = np.linalg.norm(np.cross(x0.r, x0.v))
    e0 = two_body_energy(x0)
    x = x0
    t = 0.0
    for _ in range(10):
        x = prop.propagate(x, t, t + period_s, cfg, kepler_model)
        t += period_s
    assert abs(two_body_energy(x) - e0) <= 1e-10 * abs(e0)
    h1 = np.linalg.norm(np.cross(x.r, x.v))
    assert abs(h1 - h0) <= 1e-10 * h0


def test_tolerance_tightening_reduces_error(kepler_model):
    x0, period_s, _, _ = eccentric_ellipse()
    ref = prop.propagate(
        x0, 0.0, period_s,
        prop.IntegratorConfig(rel_tol=1e-13, abs_tol=1e-13), kepler_model)
    errors = []
    for tol in (1e-6, 1e-8, 1e-10):
        x = prop.propagate(x0, 0.0, period_s,
                           prop.IntegratorConfig(rel_tol=tol, abs_tol=tol),
                           kepler_model)
        errors.append(np.linalg.norm(x.as_array() - ref.as_array()))
    assert errors[1] <= errors[0]
    assert errors[2] <= errors[1]


def test_propagation_failure_carries_last_state(cfg, kepler_model):
    # radial plunge into the center underflows the step size
    x0 = StateVector(r=[0.02, 0.0, 0.0], v=[-0.5, 0.0, 0.0])
    with pytest.raises(prop.PropagationError) as exc:
        prop.propagate(x0, 0.0, 5e5, cfg, kepler_model)
    assert np.all(np.isfinite(exc.value.last_state.as_array()))
    assert 0.0 < exc.value.last_epoch < 5e5


# --- STM ----------------------------------------------------------------------

def test_stm_identity_at_zero_span(cfg, model):
    x0 = StateVector(r=[0.4, 0.0, -0.3], v=[0.1, 0.9, 0.0])
    _, phi = prop.propagate_with_stm(x0, 3.0, 3.0, cfg, model)
    np.testing.assert_array_equal(phi.matrix, np.eye(6))


def test_stm_matches_flow_differences(cfg, model):
    """Columns of Phi against central differences of the flow over one day."""
    x0, _, _, _ = eccentric_ellipse()
    day = 86400.0
    _, phi = prop.propagate_with_stm(x0, 0.0, day, cfg, model)
    eps = 1e-7
    fd = np.empty((6, 6))
    for j in range(6):
        dx = np.zeros(6)
        dx[j] = eps
        plus = prop.propagate(StateVector.from_array(x0.as_array() + dx),
                              0.0, day, cfg, model)
        minus = prop.propagate(StateVector.from_array(x0.as_array() - dx),
                               0.0, day, cfg, model)
        fd[:, j] = (plus.as_array() - minus.as_array()) / (2 * eps)
    assert np.abs(phi.matrix - fd).max() / np.abs(phi.matrix).max() <= 1e-6


def test_stm_composition(cfg, model):
    x0, period_s, _, _ = eccentric_ellipse()
    half = 0.5 * period_s
    x_half, phi_10 = prop.propagate_with_stm(x0, 0.0, half, cfg, model)
    _, phi_21 = prop.propagate_with_stm(x_half, half, period_s, cfg, model)
    _, phi_20 = prop.propagate_with_stm(x0, 0.0, period_s, cfg, model)
    composed = phi_21.compose(phi_10).matrix
    assert np.abs(composed - phi_20.matrix).max() <= 1e-8 * np.abs(phi_20.matrix).max()


def test_stm_determinant_one_for_conservative_forces(cfg, conservative_model):
    x0, period_s, _, _ = eccentric_ellipse()
    _, phi = prop.propagate_with_stm(x0, 0.0, period_s, cfg, conservative_model)
    assert np.linalg.det(phi.matrix) == pytest.approx(1.0, abs=1e-6)


def test_stm_block_accessors():
    m = np.arange(36.0).reshape(6, 6)
    phi = Stm(m)
    np.testing.assert_array_equal(phi.rr, m[:3, :3])
    np.testing.assert_array_equal(phi.rv, m[:3, 3:])
    np.testing.assert_array_equal(phi.vr, m[3:, :3])
    np.testing.assert_array_equal(phi.vv, m[3:, 3:])


# --- impulses -------------------------------------------------------------------

def test_impulse_identities():
    x = StateVector(r=[0.5, 0.0, 0.1], v=[0.0, 1.0, 0.0])
    assert np.array_equal(prop.apply_impulse(x, np.zeros(3)).as_array(), x.as_array())
    dv = np.array([1e-3, -2e-3, 5e-4])
    there = prop.apply_impulse(x, dv)
    np.testing.assert_array_equal(there.r, x.r)
    back = prop.apply_impulse(there, -dv)
    np.testing.assert_array_equal(back.as_array(), x.as_array())
    assert np.linalg.norm(there.v - x.v) == pytest.approx(np.linalg.norm(dv), rel=1e-15)


# --- events ---------------------------------------------------------------------

def kepler_time_to_anomaly(theta, a, e):
    """Time from perilune to true anomaly theta via Kepler's equation."""
    big_e = 2.0 * math.atan2(math.sqrt(1 - e) * math.sin(theta / 2),
                             math.sqrt(1 + e) * math.cos(theta / 2))
    big_e %= TWO_PI
    n = a ** -1.5
    return (big_e - e * math.sin(big_e)) / n


def test_anomaly_event_matches_kepler_oracle(cfg, kepler_model):
    x0, period_s, a, e = eccentric_ellipse()
    tu = kepler_model.scales.tu
    for theta in (math.pi, 2.0):
        spec = prop.EventSpec(kind=prop.TRUE_ANOMALY, target_angle=theta)
        res = prop.find_event(x0, 0.0, spec, 1.2 * period_s, cfg, kepler_model)
        assert res.found
        expected = kepler_time_to_anomaly(theta, a, e) * tu
        assert res.epoch == pytest.approx(expected, rel=1e-6)
        assert osculating_true_anomaly(res.state) == pytest.approx(theta, abs=1e-9)


def test_event_at_start_returns_next_crossing(cfg, kepler_model):
    x0, period_s, a, e = eccentric_ellipse()
    theta0 = osculating_true_anomaly(x0)  # exactly 0 at perilune
    spec = prop.EventSpec(kind=prop.TRUE_ANOMALY, target_angle=theta0)
    res = prop.find_event(x0, 0.0, spec, 1.5 * period_s, cfg, kepler_model)
    assert res.found
    assert res.epoch == pytest.approx(period_s, rel=1e-6)


def test_apsis_events(cfg, kepler_model):
    x0, period_s, _, _ = eccentric_ellipse()
    apo = prop.find_event(x0, 0.0, prop.EventSpec(kind=prop.APOLUNE),
                          period_s, cfg, kepler_model)
    assert apo.found
    assert apo.epoch == pytest.approx(0.5 * period_s, rel=1e-9)
    peri = prop.find_event(x0, 0.0, prop.EventSpec(kind=prop.PERILUNE),
                           1.2 * period_s, cfg, kepler_model)
    assert peri.found
    assert peri.epoch == pytest.approx(period_s, rel=1e-9)


def test_event_not_found_reports_horizon_state(cfg, kepler_model):
    x0, period_s, _, _ = eccentric_ellipse()
    spec = prop.EventSpec(kind=prop.TRUE_ANOMALY, target_angle=math.pi)
    res = prop.find_event(x0, 0.0, spec, 0.1 * period_s, cfg, kepler_model)
    assert not res.found
    assert res.epoch == pytest.approx(0.1 * period_s, rel=1e-12)
    direct = prop.propagate(x0, 0.0, 0.1 * period_s, cfg, kepler_model)
    np.testing.assert_allclose(res.state.as_array(), direct.as_array(), atol=1e-12)


def test_event_determinism(cfg, model):
    x0, period_s, _, _ = eccentric_ellipse()
    spec = prop.EventSpec(kind=prop.TRUE_ANOMALY, target_angle=3.49)
    a = prop.find_event(x0, 0.0, spec, period_s, cfg, model)
    b = prop.find_event(x0, 0.0, spec, period_s, cfg, model)
    assert a.epoch == b.epoch
    assert np.array_equal(a.state.as_array(), b.state.as_array())


# --- controlled propagation ------------------------------------------------------

def test_controlled_empty_equals_free(cfg, model):
    x0, period_s, _, _ = eccentric_ellipse()
    a = prop.propagate_controlled(x0, 0.0, period_s, [], cfg, model)
    b = prop.propagate(x0, 0.0, period_s, cfg, model)
    np.testing.assert_array_equal(a.as_array(), b.as_array())


def test_controlled_zero_impulse_matches_free(cfg, model):
    x0, period_s, _, _ = eccentric_ellipse()
    mans = [prop.ImpulsiveManeuver(epoch=0.3 * period_s, dv=np.zeros(3))]
    a = prop.propagate_controlled(x0, 0.0, period_s, mans, cfg, model)
    b = prop.propagate(x0, 0.0, period_s, cfg, model)
    assert np.linalg.norm(a.as_array() - b.as_array()) <= 1e-12 * np.linalg.norm(b.as_array())


def test_controlled_rejects_bad_epochs(cfg, model):
    x0, period_s, _, _ = eccentric_ellipse()
    bad = [prop.ImpulsiveManeuver(epoch=0.5 * period_s, dv=np.zeros(3)),
           prop.ImpulsiveManeuver(epoch=0.5 * period_s, dv=np.zeros(3))]
    with pytest.raises(ValueError, match="strictly increasing"):
        prop.propagate_controlled(x0, 0.0, period_s, bad, cfg, model)
    outside = [prop.ImpulsiveManeuver(epoch=1.5 * period_s, dv=np.zeros(3))]
    with pytest.raises(ValueError, match="must lie in"):
        prop.propagate_controlled(x0, 0.0, period_s, outside, cfg, model)


def test_linear_impulse_prediction_first_order(cfg, model):
    """Linear STM impulse mapping converges quadratically to the true flow."""
    x0, period_s, _, _ = eccentric_ellipse()
    t_burn = 0.2 * period_s
    t_end = 0.8 * period_s
    x_burn = prop.propagate(x0, 0.0, t_burn, cfg, model)
    free_end, phi = prop.propagate_with_stm(x_burn, t_burn, t_end, cfg, model)
    vu_per_ms = 1e-3 / model.scales.vu  # 1 m/s in canonical units
    u_hat = np.array([0.3, -0.8, 0.52])
    u_hat /= np.linalg.norm(u_hat)
    errors = []
    for mag in (1.0, 0.5, 0.25):
        u = mag * vu_per_ms * u_hat
        nonlinear = prop.propagate_controlled(
            x_burn, t_burn, t_end,
            [prop.ImpulsiveManeuver(epoch=t_burn, dv=u)], cfg, model)
        linear = free_end.as_array() + np.vstack([phi.rv, phi.vv]) @ u
        errors.append(np.linalg.norm(nonlinear.as_array() - linear))
    assert errors[1] <= 0.30 * errors[0]
    assert errors[2] <= 0.30 * errors[1]

import math

import numpy as np
import pytest

from nrhosk import baseline as bl
from nrhosk.dynamics import osculating_true_anomaly
from nrhosk.propagation import APOLUNE, PERILUNE, IntegratorConfig, propagate
from nrhosk.state import StateVector


@pytest.fixture(scope="module")
def cfg():
    return IntegratorConfig()


def test_refinement_rejects_short_stacks(nrho_orbit, model, cfg):
    with pytest.raises(ValueError, match="at least 10"):
        bl.refine_baseline(nrho_orbit, 3, cfg, model)


def test_segment_joints_closed(small_baseline, model, cfg):
    """Re-propagating across joint regions stays within the defect budget."""
    b = small_baseline
    for t_apo in b.apolune_epochs[1:4]:
        t0, t1 = t_apo - 2 * 86400.0, t_apo + 2 * 86400.0
        x0 = bl.reference_state(b, t0)
        xf = propagate(x0, t0, t1, cfg, model)
        ref = bl.reference_state(b, t1)
        assert np.linalg.norm(xf.r - ref.r) * model.scales.lu <= 1e-3   # 1 m
        assert np.linalg.norm(xf.v - ref.v) * model.scales.vu <= 1e-6   # 1 mm/s


def test_one_apolune_per_revolution(small_baseline):
    b = small_baseline
    assert b.apolune_epochs.size == b.metadata["revolutions"]
    assert b.perilune_epochs.size == b.metadata["revolutions"]
    period = b.mean_period()
    for gaps in (np.diff(b.apolune_epochs), np.diff(b.perilune_epochs)):
        assert np.all(np.abs(gaps - period) <= 0.1 * period)


def test_perilune_radius_spread(small_baseline, model):
    radii = [np.linalg.norm(bl.reference_state(small_baseline, t).r)
             for t in small_baseline.perilune_epochs]
    spread = (max(radii) - min(radii)) / np.mean(radii)
    assert spread < 0.20


def test_reference_state_exact_at_knots(small_baseline):
    b = small_baseline
    for i in (0, 100, b.epochs.size // 2, b.epochs.size - 1):
        got = bl.reference_state(b, b.epochs[i])
        np.testing.assert_array_almost_equal(got.as_array(), b.states[i], decimal=14)


def test_reference_state_matches_propagation(small_baseline, model, cfg, rng):
    """Interpolation error against direct propagation from the nearest knot."""
    b = small_baseline
    worst_km = 0.0
    for _ in range(20):
        i = int(rng.integers(5, b.epochs.size - 5))
        tq = float(rng.uniform(b.epochs[i], b.epochs[i + 1]))
        direct = propagate(StateVector.from_array(b.states[i]), b.epochs[i],
                           tq, cfg, model)
        interp = bl.reference_state(b, tq)
        worst_km = max(worst_km,
                       np.linalg.norm(direct.r - interp.r) * model.scales.lu)
    assert worst_km <= 0.01   # 10 m budget, typically millimetres


def test_reference_state_continuity(small_baseline):
    b = small_baseline
    ts = np.linspace(b.epochs[0], b.epochs[-1], 4000)
    states = bl.reference_states(b, ts)
    steps = np.linalg.norm(np.diff(states[:, :3], axis=0), axis=1)
    # no jump larger than the worst knot spacing sweep at perilune speed
    vmax = np.abs(states[:, 3:]).max() * 3.0
    assert steps.max() <= vmax * (ts[1] - ts[0]) / b.metadata["tu_s"] + 1e-9


def test_reference_state_out_of_range(small_baseline):
    b = small_baseline
    with pytest.raises(bl.BaselineRangeError):
        bl.reference_state(b, b.epochs[0] - 10.0)
    with pytest.raises(bl.BaselineRangeError):
        bl.reference_state(b, b.epochs[-1] + 10.0)


def test_apsis_theta_values(small_baseline):
    for t in small_baseline.apolune_epochs:
        theta = osculating_true_anomaly(bl.reference_state(small_baseline, t))
        assert abs(theta - math.pi) <= 1e-6
    for t in small_baseline.perilune_epochs:
        theta = osculating_true_anomaly(bl.reference_state(small_baseline, t))
        assert min(theta, 2 * math.pi - theta) <= 1e-6


def test_apsis_epochs_queries(small_baseline):
    b = small_baseline
    full = bl.apsis_epochs(b, APOLUNE, b.span)
    assert full.size == b.metadata["revolutions"]
    assert np.all(np.diff(full) > 0)
    period = b.mean_period()
    short = bl.apsis_epochs(b, APOLUNE, (b.span[0], b.span[0] + 0.9 * period))
    assert short.size in (0, 1)
    empty = bl.apsis_epochs(
        b, PERILUNE, (b.apolune_epochs[0] + 1.0, b.apolune_epochs[0] + 2.0))
    assert empty.size == 0
    with pytest.raises(bl.BaselineRangeError):
        bl.apsis_epochs(b, APOLUNE, (b.span[1] + 1e6, b.span[1] + 2e6))
    with pytest.raises(ValueError, match="apsis kind"):
        bl.apsis_epochs(b, "equator", b.span)


def test_apolune_near_invariance_in_rotating_frame(small_baseline, model):
    """Consecutive apolune states stay close in the rotating frame."""
    from nrhosk.ephem import em_rotating_frame

    b = small_baseline
    states = []
    for t in b.apolune_epochs:
        ft = em_rotating_frame(t, model.ephemeris)
        states.append(ft.apply_to_state(bl.reference_state(b, t)).as_array())
    states = np.asarray(states)
    amplitude = np.linalg.norm(states[:, :3], axis=1).mean()
    for a, b_ in zip(states[:-1], states[1:]):
        assert np.linalg.norm(a[:3] - b_[:3]) <= 0.05 * amplitude


def test_save_load_round_trip(small_baseline, tmp_path):
    path = tmp_path / "ref.txt"
    bl.save_baseline(small_baseline, path)
    again = bl.load_baseline(path)
    assert np.array_equal(again.epochs, small_baseline.epochs)
    assert np.array_equal(again.states, small_baseline.states)
    assert np.array_equal(again.accelerations, small_baseline.accelerations)
    assert np.array_equal(again.apolune_epochs, small_baseline.apolune_epochs)
    assert np.array_equal(again.perilune_epochs, small_baseline.perilune_epochs)
    # identical bytes when saved twice
    path2 = tmp_path / "ref2.txt"
    bl.save_baseline(again, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_foreign_files(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("just some text\n")
    with pytest.raises(ValueError, match="not a baseline"):
        bl.load_baseline(bad)

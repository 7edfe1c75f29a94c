import math

import numpy as np
import pytest

from nrhosk import skmpc
from nrhosk.baseline import reference_state
from nrhosk.ephem import em_rotating_frame
from nrhosk.propagation import (
    TRUE_ANOMALY,
    EventSpec,
    ImpulsiveManeuver,
    IntegratorConfig,
    find_event,
    propagate_controlled,
    propagate_with_stm,
)
from nrhosk.state import StateVector


@pytest.fixture(scope="module")
def icfg():
    return IntegratorConfig()


@pytest.fixture(scope="module")
def cfg():
    return skmpc.SkmpcConfig()


@pytest.fixture(scope="module")
def man_crossing(small_baseline, model, icfg, cfg):
    """Epoch and reference state at a maneuver-anomaly crossing."""
    t_start = small_baseline.apolune_epochs[0]
    res = find_event(reference_state(small_baseline, t_start), t_start,
                     EventSpec(kind=TRUE_ANOMALY, target_angle=cfg.theta_man),
                     1.2 * small_baseline.mean_period(), icfg, model)
    assert res.found
    return res.epoch, res.state


def em_state(t, x, model):
    ft = em_rotating_frame(t, model.ephemeris)
    m = ft.state_matrix()
    m[3:, :3] *= model.scales.tu
    return m @ x.as_array()


# --- config -----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError, match="K <= N"):
        skmpc.SkmpcConfig(k_maneuvers=7, n_target_revs=6)
    with pytest.raises(ValueError, match="trigger"):
        skmpc.SkmpcConfig(eps_r_km=200.0)
    with pytest.raises(ValueError, match="u_max"):
        skmpc.SkmpcConfig(u_max_ms=-1.0)


# --- horizon ------------------------------------------------------------------

def test_plan_horizon_spacing(man_crossing, small_baseline, model, icfg, cfg):
    t0, x0 = man_crossing
    epochs, t_target = skmpc.plan_horizon(t0, cfg, x0, small_baseline, icfg, model)
    period = small_baseline.mean_period()
    assert epochs.size == cfg.k_maneuvers
    assert epochs[0] == t0
    assert abs((epochs[1] - epochs[0]) - period) <= 0.1 * period
    assert abs((t_target - t0) - cfg.n_target_revs * period) <= 0.1 * cfg.n_target_revs * period


def test_plan_horizon_exhausted_reference(man_crossing, small_baseline, model,
                                          icfg, cfg):
    t_late = small_baseline.apolune_epochs[-2]
    x_late = reference_state(small_baseline, t_late)
    with pytest.raises(skmpc.HorizonError):
        skmpc.plan_horizon(t_late, cfg, x_late, small_baseline, icfg, model)


# --- trigger --------------------------------------------------------------------

def test_trigger_zero_difference(cfg, model):
    x = np.arange(6.0)
    assert skmpc.check_trigger(x, x, cfg, model)


def test_trigger_boundary_inclusive(cfg, model):
    ref = np.zeros(6)
    drift = np.zeros(6)
    drift[0] = cfg.eps_r_trig_km / model.scales.lu   # exactly on the boundary
    assert skmpc.check_trigger(drift, ref, cfg, model)


def test_trigger_velocity_outside(cfg, model):
    ref = np.zeros(6)
    drift = np.zeros(6)
    drift[3] = 2.0 * cfg.eps_v_trig_ms * 1e-3 / model.scales.vu
    assert not skmpc.check_trigger(drift, ref, cfg, model)


# --- assembly --------------------------------------------------------------------

def identity_blocks(k, c=1.0):
    return [(c * np.eye(3), c * np.eye(3)) for _ in range(k)]


def test_assemble_counts_and_units(cfg, model):
    drift = np.zeros(6)
    ref = np.zeros(6)
    p = skmpc.assemble_socp(drift, ref, identity_blocks(2), cfg, model)
    assert p.k_maneuvers == 2
    assert p.eps_r == pytest.approx(cfg.eps_r_km / model.scales.lu)
    assert p.eps_v == pytest.approx(cfg.eps_v_ms * 1e-3 / model.scales.vu)
    assert p.u_max == pytest.approx(cfg.u_max_ms * 1e-3 / model.scales.vu)
    with pytest.raises(ValueError, match="block pair"):
        skmpc.assemble_socp(drift, ref, identity_blocks(3), cfg, model)


def test_assemble_zero_control_feasible_when_inside(cfg, model):
    ref = np.zeros(6)
    drift = np.zeros(6)
    drift[1] = 0.5 * cfg.eps_r_km / model.scales.lu
    p = skmpc.assemble_socp(drift, ref, identity_blocks(2), cfg, model)
    assert skmpc.verify_solution(p, np.zeros((2, 3)))


# --- solver ---------------------------------------------------------------------

def test_solve_zero_when_inside(cfg, model):
    drift = np.zeros(6)
    drift[2] = 0.9 * cfg.eps_r_km / model.scales.lu
    p = skmpc.assemble_socp(drift, np.zeros(6), identity_blocks(2), cfg, model)
    sol = skmpc.solve_socp(p)
    assert sol.status == skmpc.OPTIMAL
    assert sol.objective <= 1e-9


def test_solve_reports_infeasible_for_tiny_u_max(model):
    cfg = skmpc.SkmpcConfig(u_max_ms=1e-12 * 1e3 * model.scales.vu)
    drift = np.zeros(6)
    drift[0] = 500.0 / model.scales.lu   # far outside the 25 km window
    p = skmpc.assemble_socp(drift, np.zeros(6), identity_blocks(2), cfg, model)
    sol = skmpc.solve_socp(p)
    assert sol.status == skmpc.INFEASIBLE


def test_solve_deterministic(cfg, model, rng):
    drift = rng.normal(size=6) * 1e-3
    p = skmpc.assemble_socp(drift, np.zeros(6), identity_blocks(2), cfg, model)
    a = skmpc.solve_socp(p)
    b = skmpc.solve_socp(p)
    assert a.status == b.status == skmpc.OPTIMAL
    assert np.array_equal(a.controls, b.controls)


def grid_search_velocity_only(dv, eps_v, c, passes=4, width=None):
    """Refining dense grid over a single 3-vector control."""
    center = np.zeros(3)
    width = width if width is not None else 2.0 * np.linalg.norm(dv) / c
    best = None
    for _ in range(passes):
        axes = [np.linspace(center[i] - width, center[i] + width, 21)
                for i in range(3)]
        for ux in axes[0]:
            for uy in axes[1]:
                for uz in axes[2]:
                    u = np.array([ux, uy, uz])
                    if np.linalg.norm(c * u + dv) <= eps_v:
                        cost = np.linalg.norm(u)
                        if best is None or cost < best[0]:
                            best = (cost, u)
        if best is None:
            width *= 2.0
            continue
        center = best[1]
        width /= 8.0
    return best


def test_velocity_only_instance_matches_grid_search(model):
    """Reduced problem with a closed form; the grid search is the oracle."""
    c = 0.8
    cfg = skmpc.SkmpcConfig(k_maneuvers=2, eps_r_km=1e7, eps_r_trig_km=4e7,
                            u_max_ms=1e4)
    dv = np.array([1.2e-2, -0.8e-2, 0.5e-2])
    drift = np.concatenate([np.zeros(3), dv])
    blocks = [(np.eye(3), c * np.eye(3)), (np.zeros((3, 3)), np.zeros((3, 3)))]
    p = skmpc.assemble_socp(drift, np.zeros(6), blocks, cfg, model)
    sol = skmpc.solve_socp(p)
    assert sol.status == skmpc.OPTIMAL

    analytic = max(0.0, np.linalg.norm(dv) - p.eps_v) / c
    assert sol.objective == pytest.approx(analytic, abs=1e-9)

    cost, u_grid = grid_search_velocity_only(dv, p.eps_v, c)
    assert sol.objective <= cost + 1e-6
    assert abs(np.linalg.norm(u_grid) - analytic) <= 1e-4   # grid resolution
    assert skmpc.verify_solution(p, sol.controls)


def test_optimal_solutions_pass_reverification(cfg, model, rng):
    for _ in range(10):
        drift = np.zeros(6)
        drift[:3] = rng.normal(size=3) * 2e-3
        drift[3:] = rng.normal(size=3) * 5e-3
        blocks = [(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
                  for _ in range(2)]
        p = skmpc.assemble_socp(drift, np.zeros(6), blocks, cfg, model)
        sol = skmpc.solve_socp(p)
        if sol.status == skmpc.OPTIMAL:
            assert skmpc.verify_solution(p, sol.controls)


# --- controllability ---------------------------------------------------------------

def test_single_maneuver_rank_bounded(rng):
    block = (rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
    assert skmpc.controllability_rank([block]) <= 3


def test_duplicated_blocks_rank_three(rng):
    block = (rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
    assert skmpc.controllability_rank([block, block]) == 3


def test_consecutive_crossing_blocks_full_rank(man_crossing, small_baseline,
                                               model, icfg, cfg):
    t0, x0 = man_crossing
    epochs, t_target = skmpc.plan_horizon(t0, cfg, x0, small_baseline, icfg, model)
    blocks = []
    for t in epochs:
        x_at = reference_state(small_baseline, t)
        _, phi = propagate_with_stm(x_at, t, t_target, icfg, model)
        blocks.append((phi.rv, phi.vv))
    assert skmpc.controllability_rank(blocks) == 6


# --- sequential planner ---------------------------------------------------------------

def test_sequential_zero_perturbation_short_circuits(man_crossing, small_baseline,
                                                     model, icfg, cfg):
    t0, x0 = man_crossing
    plan = skmpc.sequential_skmpc(t0, x0, small_baseline, cfg, icfg, model)
    assert plan.converged
    assert plan.iterations_used == 0
    assert np.linalg.norm(plan.controls) == 0.0


def test_sequential_converges_from_perturbed_state(man_crossing, small_baseline,
                                                   model, icfg, cfg, rng):
    t0, x0 = man_crossing
    dr = rng.normal(size=3)
    dr *= (10.0 / model.scales.lu) / np.linalg.norm(dr)
    dv = rng.normal(size=3)
    dv *= (0.01e-3 / model.scales.vu) / np.linalg.norm(dv)
    x_pert = StateVector(r=x0.r + dr, v=x0.v + dv)
    plan = skmpc.sequential_skmpc(t0, x_pert, small_baseline, cfg, icfg, model)
    assert plan.converged
    assert plan.iterations_used <= cfg.max_iterations

    # the planner's convergence claim must hold under independent propagation
    maneuvers = [ImpulsiveManeuver(epoch=e, dv=u)
                 for e, u in zip(plan.epochs, plan.controls)]
    x_final = propagate_controlled(x_pert, t0, plan.target_epoch, maneuvers,
                                   icfg, model)
    x_em = em_state(plan.target_epoch, x_final, model)
    ref_em = em_state(plan.target_epoch,
                      reference_state(small_baseline, plan.target_epoch), model)
    assert np.linalg.norm(x_em[:3] - ref_em[:3]) <= cfg.eps_r_km / model.scales.lu
    assert np.linalg.norm(x_em[3:] - ref_em[3:]) <= cfg.eps_v_ms * 1e-3 / model.scales.vu


def test_sequential_residuals_decrease(man_crossing, small_baseline, model,
                                       icfg, cfg, rng):
    t0, x0 = man_crossing
    dr = rng.normal(size=3)
    dr *= (20.0 / model.scales.lu) / np.linalg.norm(dr)
    x_pert = StateVector(r=x0.r + dr, v=x0.v.copy())
    plan = skmpc.sequential_skmpc(t0, x_pert, small_baseline, cfg, icfg, model)
    residuals = plan.diagnostics["residuals_canonical"]
    assert len(residuals) >= 2
    for earlier, later in zip(residuals[:-1], residuals[1:]):
        assert later[0] <= earlier[0]

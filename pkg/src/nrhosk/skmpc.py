"""Station-keeping model predictive controller.

Plans impulsive maneuvers at fixed true-anomaly stations so the state
reaches an ellipsoidal window about the reference orbit several revolutions
downstream. The finite-horizon problem is a small second-order cone program
in Earth-Moon rotating coordinates (where the target window is nearly
stationary); sequential relinearization about the steered trajectory
removes the linear prediction error. Only the first maneuver of a plan is
ever executed; the next invocation replans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from cvxopt import matrix as cvx_matrix
from cvxopt import solvers as cvx_solvers

from .baseline import BaselineOrbit, apsis_epochs, reference_state
from .dynamics import DynamicsModel
from .ephem import FrameTransform, em_rotating_frame
from .propagation import (
    APOLUNE,
    TRUE_ANOMALY,
    EventSpec,
    IntegratorConfig,
    apply_impulse,
    find_event,
    propagate,
    propagate_with_stm,
)
from .state import Epoch, StateVector

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"
NUMERICAL_FAILURE = "numerical-failure"

_SOLVER_OPTIONS = {
    "show_progress": False,
    "abstol": 1e-9,
    "reltol": 1e-9,
    "feastol": 1e-9,
    "maxiters": 200,
}


class HorizonError(RuntimeError):
    """The reference orbit does not cover the requested planning horizon."""


@dataclass(frozen=True)
class SkmpcConfig:
    """Controller tuning; lengths km, speeds m/s, angles rad."""

    k_maneuvers: int = 2
    n_target_revs: int = 6
    theta_man: float = math.radians(200.0)
    eps_r_km: float = 25.0
    eps_v_ms: float = 5.0
    eps_r_trig_km: float = 100.0
    eps_v_trig_ms: float = 20.0
    u_max_ms: float = 1.0
    max_iterations: int = 10
    trust_region_pos_km: float = 50.0
    trust_region_vel_ms: float = 0.5

    def __post_init__(self):
        if not 2 <= self.k_maneuvers <= self.n_target_revs:
            raise ValueError("need 2 <= K <= N")
        if self.eps_r_km >= self.eps_r_trig_km or self.eps_v_ms >= self.eps_v_trig_ms:
            raise ValueError("terminal radii must sit inside the trigger radii")
        if self.u_max_ms <= 0.0 or self.max_iterations < 1:
            raise ValueError("u_max must be positive and max_iterations >= 1")


@dataclass(frozen=True)
class SocpProblem:
    """Standard-form cone program data, all canonical, rotating-frame resolved."""

    phi_rv_blocks: np.ndarray      # (K, 3, 3)
    phi_vv_blocks: np.ndarray      # (K, 3, 3)
    drift_terminal: np.ndarray     # (6,)
    reference_terminal: np.ndarray  # (6,)
    eps_r: float
    eps_v: float
    u_max: float

    def __post_init__(self):
        k = self.phi_rv_blocks.shape[0]
        if self.phi_rv_blocks.shape != (k, 3, 3) or self.phi_vv_blocks.shape != (k, 3, 3):
            raise ValueError("maneuver block shapes inconsistent")
        for name in ("phi_rv_blocks", "phi_vv_blocks", "drift_terminal",
                     "reference_terminal"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def k_maneuvers(self) -> int:
        return self.phi_rv_blocks.shape[0]


@dataclass(frozen=True)
class SocpSolution:
    controls: np.ndarray           # (K, 3) rotating-frame resolved, canonical
    objective: float               # sum of control norms, canonical
    status: str
    iterations: int
    duality_gap: float


@dataclass(frozen=True)
class ManeuverPlan:
    """Cumulative planned impulses (canonical, inertial) and diagnostics."""

    epochs: np.ndarray             # (K,) seconds
    controls: np.ndarray           # (K, 3)
    target_epoch: Epoch
    iterations_used: int
    converged: bool
    failure: str | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def first_control(self) -> np.ndarray:
        return self.controls[0]


def plan_horizon(t_invoked: Epoch, cfg: SkmpcConfig, x0: StateVector,
                 baseline: BaselineOrbit, icfg: IntegratorConfig,
                 model: DynamicsModel):
    """Maneuver epochs on the free-drift path and the target apolune epoch.

    The first maneuver is at the invocation epoch itself (the caller invokes
    at the maneuver anomaly); later ones sit at the next crossings of that
    anomaly along the unsteered prediction.
    """
    span = baseline.span
    apolunes = apsis_epochs(baseline, APOLUNE, (t_invoked, span[1]))
    apolunes = apolunes[apolunes > t_invoked]
    if apolunes.size < cfg.n_target_revs:
        raise HorizonError(
            f"reference orbit ends before the {cfg.n_target_revs}-th apolune")
    t_target = float(apolunes[cfg.n_target_revs - 1])

    period = baseline.mean_period()
    epochs = [float(t_invoked)]
    x = x0
    t = float(t_invoked)
    spec = EventSpec(kind=TRUE_ANOMALY, target_angle=cfg.theta_man)
    for _ in range(cfg.k_maneuvers - 1):
        # skip half a revolution before searching: the state is at (or within
        # estimation error of) the station anomaly, and the wanted crossing
        # is the one a full revolution downstream
        x = propagate(x, t, t + 0.5 * period, icfg, model)
        t = t + 0.5 * period
        res = find_event(x, t, spec, period, icfg, model)
        if not res.found:
            raise HorizonError("no further maneuver-anomaly crossing found")
        epochs.append(res.epoch)
        x, t = res.state, res.epoch
    if epochs[-1] >= t_target:
        raise HorizonError("maneuver epochs overrun the target apolune")
    return np.asarray(epochs), t_target


def check_trigger(x_drift_terminal: np.ndarray, x_ref_terminal: np.ndarray,
                  cfg: SkmpcConfig, model: DynamicsModel) -> bool:
    """True (skip the maneuver) when the free drift ends inside the trigger set.

    Both states are rotating-frame resolved at the target epoch, canonical.
    """
    dr = np.linalg.norm(x_drift_terminal[:3] - x_ref_terminal[:3])
    dv = np.linalg.norm(x_drift_terminal[3:] - x_ref_terminal[3:])
    eps_r = cfg.eps_r_trig_km / model.scales.lu
    eps_v = cfg.eps_v_trig_ms * 1e-3 / model.scales.vu
    return bool(dr <= eps_r and dv <= eps_v)


def assemble_socp(x_drift_terminal: np.ndarray, x_ref_terminal: np.ndarray,
                  stm_blocks: list[tuple[np.ndarray, np.ndarray]],
                  cfg: SkmpcConfig, model: DynamicsModel) -> SocpProblem:
    """Cone-program data from rotating-frame terminal states and STM blocks.

    ``stm_blocks`` holds one (position, velocity) pair of 3x3 maps per
    maneuver, already rotating-frame realized; radii convert from km and m/s
    on assembly.
    """
    if len(stm_blocks) != cfg.k_maneuvers:
        raise ValueError("one STM block pair required per maneuver")
    phi_rv = np.stack([b[0] for b in stm_blocks])
    phi_vv = np.stack([b[1] for b in stm_blocks])
    return SocpProblem(
        phi_rv_blocks=phi_rv,
        phi_vv_blocks=phi_vv,
        drift_terminal=np.asarray(x_drift_terminal, dtype=float),
        reference_terminal=np.asarray(x_ref_terminal, dtype=float),
        eps_r=cfg.eps_r_km / model.scales.lu,
        eps_v=cfg.eps_v_ms * 1e-3 / model.scales.vu,
        u_max=cfg.u_max_ms * 1e-3 / model.scales.vu,
    )


def solve_socp(problem: SocpProblem) -> SocpSolution:
    """Interior-point solve of the maneuver cone program.

    Variables are the K impulse vectors plus one slack per impulse norm;
    cones are the slack epigraphs, the impulse magnitude caps, and the two
    terminal ellipsoid constraints. Infeasibility is reported in the status,
    never raised.
    """
    k = problem.k_maneuvers
    n_var = 3 * k + k
    c = np.zeros(n_var)
    c[3 * k:] = 1.0

    g_rows: list[np.ndarray] = []
    h_rows: list[np.ndarray] = []
    dims_q: list[int] = []

    def add_cone(g_block: np.ndarray, h_block: np.ndarray):
        g_rows.append(g_block)
        h_rows.append(h_block)
        dims_q.append(g_block.shape[0])

    for j in range(k):
        # ||u_j|| <= s_j
        g = np.zeros((4, n_var))
        g[0, 3 * k + j] = -1.0
        g[1:, 3 * j:3 * j + 3] = -np.eye(3)
        add_cone(g, np.zeros(4))
        # ||u_j|| <= u_max
        g = np.zeros((4, n_var))
        g[1:, 3 * j:3 * j + 3] = -np.eye(3)
        h = np.zeros(4)
        h[0] = problem.u_max
        add_cone(g, h)

    dr = problem.drift_terminal[:3] - problem.reference_terminal[:3]
    dv = problem.drift_terminal[3:] - problem.reference_terminal[3:]
    for blocks, offset, radius in ((problem.phi_rv_blocks, dr, problem.eps_r),
                                   (problem.phi_vv_blocks, dv, problem.eps_v)):
        g = np.zeros((4, n_var))
        for j in range(k):
            g[1:, 3 * j:3 * j + 3] = -blocks[j]
        h = np.zeros(4)
        h[0] = radius
        h[1:] = offset
        add_cone(g, h)

    g_mat = cvx_matrix(np.vstack(g_rows))
    h_vec = cvx_matrix(np.concatenate(h_rows))
    old_options = dict(cvx_solvers.options)
    cvx_solvers.options.update(_SOLVER_OPTIONS)
    try:
        sol = cvx_solvers.conelp(cvx_matrix(c), g_mat, h_vec,
                                 dims={"l": 0, "q": dims_q, "s": []})
    except (ValueError, ArithmeticError, ZeroDivisionError):
        return SocpSolution(controls=np.zeros((k, 3)), objective=float("nan"),
                            status=NUMERICAL_FAILURE, iterations=0,
                            duality_gap=float("nan"))
    finally:
        cvx_solvers.options.clear()
        cvx_solvers.options.update(old_options)

    status_map = {
        "optimal": OPTIMAL,
        "primal infeasible": INFEASIBLE,
        "dual infeasible": NUMERICAL_FAILURE,
        "unknown": MAX_ITER,
    }
    status = status_map.get(sol["status"], NUMERICAL_FAILURE)
    if status != OPTIMAL:
        return SocpSolution(controls=np.zeros((k, 3)), objective=float("nan"),
                            status=status, iterations=int(sol["iterations"]),
                            duality_gap=float(sol["gap"]) if sol["gap"] else float("nan"))
    x = np.asarray(sol["x"]).ravel()
    controls = x[:3 * k].reshape(k, 3)
    objective = float(sum(np.linalg.norm(controls[j]) for j in range(k)))
    return SocpSolution(controls=controls, objective=objective, status=OPTIMAL,
                        iterations=int(sol["iterations"]),
                        duality_gap=float(sol["gap"]))


def verify_solution(problem: SocpProblem, controls: np.ndarray,
                    tol: float = 1e-7) -> bool:
    """Independent constraint re-check of a claimed-optimal control set."""
    scale = max(problem.u_max, problem.eps_r, problem.eps_v)
    for j in range(problem.k_maneuvers):
        if np.linalg.norm(controls[j]) > problem.u_max + tol * scale:
            return False
    dr = problem.drift_terminal[:3] - problem.reference_terminal[:3]
    dv = problem.drift_terminal[3:] - problem.reference_terminal[3:]
    for blocks, offset, radius in ((problem.phi_rv_blocks, dr, problem.eps_r),
                                   (problem.phi_vv_blocks, dv, problem.eps_v)):
        reach = offset + sum(blocks[j] @ controls[j]
                             for j in range(problem.k_maneuvers))
        if np.linalg.norm(reach) > radius + tol * scale:
            return False
    return True


def controllability_rank(stm_blocks: list[tuple[np.ndarray, np.ndarray]]) -> int:
    """Numerical rank of the stacked impulse-to-terminal-state maps."""
    stacked = np.hstack([np.vstack([rv, vv]) for rv, vv in stm_blocks])
    sigma = np.linalg.svd(stacked, compute_uv=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.sum(sigma > 1e-10 * sigma[0]))


def _em_state_matrix(t: Epoch, model: DynamicsModel) -> tuple[FrameTransform, np.ndarray]:
    ft = em_rotating_frame(t, model.ephemeris)
    m = ft.state_matrix().copy()
    # canonical state carries velocity in VU; the transport term omega x r is
    # per second, so rescale that block
    m[3:, :3] *= model.scales.tu
    return ft, m


def _propagate_plan(x0: StateVector, epochs: np.ndarray, controls: np.ndarray,
                    t_target: Epoch, icfg: IntegratorConfig,
                    model: DynamicsModel):
    """Piecewise flow with impulses at the plan epochs, STMs per segment.

    Returns the terminal state and the transition matrix from each maneuver
    epoch to the target epoch.
    """
    k = epochs.size
    seg_stms = []
    x = x0
    for j in range(k):
        x = apply_impulse(x, controls[j])
        t_end = epochs[j + 1] if j + 1 < k else t_target
        x, phi = propagate_with_stm(x, epochs[j], t_end, icfg, model)
        seg_stms.append(phi.matrix)
    stms_to_target = [None] * k
    acc = np.eye(6)
    for j in range(k - 1, -1, -1):
        acc = acc @ seg_stms[j] if j < k - 1 else seg_stms[j]
        stms_to_target[j] = acc.copy()
    return x, stms_to_target


def sequential_skmpc(t0: Epoch, x0: StateVector, baseline: BaselineOrbit,
                     cfg: SkmpcConfig, icfg: IntegratorConfig,
                     model: DynamicsModel) -> ManeuverPlan:
    """Sequentially relinearized maneuver planning from the current estimate.

    Cumulative controls start at zero; each pass propagates the steered
    trajectory with its transition matrices, stops once the nonlinear
    terminal state sits inside the target window, and otherwise solves the
    cone program about the steered path and accumulates the correction.
    """
    epochs, t_target = plan_horizon(t0, cfg, x0, baseline, icfg, model)
    k = cfg.k_maneuvers
    controls = np.zeros((k, 3))

    ft_target, m_target = _em_state_matrix(t_target, model)
    ref_em = m_target @ reference_state(baseline, t_target).as_array()
    rotations = [em_rotating_frame(t, model.ephemeris).rotation for t in epochs]

    eps_r = cfg.eps_r_km / model.scales.lu
    eps_v = cfg.eps_v_ms * 1e-3 / model.scales.vu
    margin = 1e-9
    trust_pos = cfg.trust_region_pos_km / model.scales.lu
    trust_vel = cfg.trust_region_vel_ms * 1e-3 / model.scales.vu

    residual_log: list[tuple[float, float]] = []
    socp_log: list[str] = []
    trust_flags: list[bool] = []
    linear_prediction: np.ndarray | None = None
    iterations_used = 0
    converged = False
    failure = None

    for _ in range(cfg.max_iterations):
        x_terminal, stms = _propagate_plan(x0, epochs, controls, t_target,
                                           icfg, model)
        x_term_arr = x_terminal.as_array()
        if linear_prediction is not None:
            gap = np.abs(x_term_arr - linear_prediction)
            trust_flags.append(bool(np.any(gap[:3] > trust_pos)
                                    or np.any(gap[3:] > trust_vel)))
        x_em = m_target @ x_term_arr
        res_r = float(np.linalg.norm(x_em[:3] - ref_em[:3]))
        res_v = float(np.linalg.norm(x_em[3:] - ref_em[3:]))
        residual_log.append((res_r, res_v))
        if res_r <= eps_r - margin and res_v <= eps_v - margin:
            converged = True
            break

        blocks = []
        for j in range(k):
            b_em = m_target @ stms[j][:, 3:] @ rotations[j].T
            blocks.append((b_em[:3], b_em[3:]))
        problem = assemble_socp(x_em, ref_em, blocks, cfg, model)
        solution = solve_socp(problem)
        socp_log.append(solution.status)
        if solution.status != OPTIMAL:
            failure = f"cone program returned {solution.status}"
            break
        iterations_used += 1
        delta_inertial = np.stack([
            rotations[j].T @ solution.controls[j] for j in range(k)])
        controls = controls + delta_inertial
        linear_prediction = x_term_arr + sum(
            stms[j][:, 3:] @ delta_inertial[j] for j in range(k))

    diagnostics = {
        "residuals_canonical": residual_log,
        "socp_statuses": socp_log,
        "trust_region_exceeded": trust_flags,
        "target_epoch": float(t_target),
        "maneuver_epochs": [float(t) for t in epochs],
    }
    return ManeuverPlan(
        epochs=epochs, controls=controls, target_epoch=t_target,
        iterations_used=iterations_used, converged=converged,
        failure=failure, diagnostics=diagnostics)

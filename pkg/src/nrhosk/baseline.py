"""Reference orbit generation, storage, and interpolation.

The reference NRHO is built in two stages: a periodic orbit from the
restricted problem seeds node states, and full-model multiple shooting pulls
the stacked revolutions onto a continuous trajectory of the real force
model. Knots (state plus acceleration on the integrator's accepted steps)
support quintic Hermite interpolation; apsis tables are event-refined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .cr3bp import Cr3bpOrbit
from .dynamics import DynamicsModel
from .ephem import em_rotating_frame
from .propagation import (
    APOLUNE,
    PERILUNE,
    EventSpec,
    IntegratorConfig,
    find_event,
    propagate,
    propagate_trajectory,
    propagate_with_stm,
)
from .state import Epoch, StateVector

FORMAT_VERSION = 1

# Joint continuity requirements on the corrected baseline.
JOINT_POSITION_TOL_KM = 1e-3   # 1 m
JOINT_VELOCITY_TOL_KMS = 1e-6  # 1 mm/s


class RefinementError(RuntimeError):
    """Multiple shooting failed to converge; reports the worst joint defect."""

    def __init__(self, message: str, worst_position_km: float,
                 worst_velocity_kms: float):
        super().__init__(message)
        self.worst_position_km = worst_position_km
        self.worst_velocity_kms = worst_velocity_kms


class BaselineRangeError(ValueError):
    """Query epoch outside the baseline span."""


@dataclass(frozen=True)
class BaselineOrbit:
    """Reference trajectory: dense knots plus apsis tables (canonical units)."""

    epochs: np.ndarray          # knot epochs, s, strictly increasing
    states: np.ndarray          # (n, 6)
    accelerations: np.ndarray   # (n, 3)
    apolune_epochs: np.ndarray  # s
    perilune_epochs: np.ndarray  # s
    metadata: dict

    def __post_init__(self):
        if np.any(np.diff(self.epochs) <= 0.0):
            raise ValueError("knot epochs must be strictly increasing")
        if self.states.shape != (self.epochs.size, 6):
            raise ValueError("states shape mismatch")
        if self.accelerations.shape != (self.epochs.size, 3):
            raise ValueError("accelerations shape mismatch")

    @property
    def span(self) -> tuple[float, float]:
        return float(self.epochs[0]), float(self.epochs[-1])

    def mean_period(self) -> float:
        gaps = np.diff(self.apolune_epochs)
        return float(np.mean(gaps))


def cr3bp_seed_nodes(orbit: Cr3bpOrbit, revolutions: int, model: DynamicsModel,
                     t_start: Epoch = 0.0, segments_per_half_rev: int = 4):
    """Node epochs and inertial canonical states stacked from the seed orbit.

    Rotating-frame states map through the instantaneous Earth-Moon frame in
    the pulsating convention: lengths scale with the actual separation, and
    velocities pick up the instantaneous frame rate plus the radial stretch
    term. Exact for a circular ephemeris, a controlled approximation
    otherwise.
    """
    from .cr3bp import propagate_cr3bp
    from .ephem import body_state

    mu = orbit.mass_ratio
    moon = np.array([1.0 - mu, 0.0, 0.0])
    n_mean = model.constants.earth_orbit.mean_motion   # rad/s
    scales = model.scales
    dense = propagate_cr3bp(orbit.initial_state, orbit.period, mu, dense=True)

    # Half-segment phase offset keeps nodes away from perilune, where both
    # the seed mapping and the Newton geometry degrade badly.
    per_rev = 2 * segments_per_half_rev
    phases = (np.arange(revolutions * per_rev + 1) + 0.5) * (orbit.period / per_rev)
    epochs = t_start + phases / n_mean
    nodes = np.empty((epochs.size, 6))
    for k, (tau, t) in enumerate(zip(phases, epochs)):
        rot_state = dense.sol(tau % orbit.period)
        ft = em_rotating_frame(t, model.ephemeris)
        e_r, e_v = body_state("earth", t, model.ephemeris)
        sep = float(np.linalg.norm(e_r))
        rate = float(np.linalg.norm(np.cross(e_r, e_v))) / sep**2
        stretch = float(e_r @ e_v) / sep
        r_em_km = (rot_state[:3] - moon) * sep
        v_em_kms = rot_state[3:] * sep * rate + r_em_km * (stretch / sep)
        inertial = ft.state_to_inertial(StateVector(r=r_em_km, v=v_em_kms))
        nodes[k, :3] = inertial.r / scales.lu
        nodes[k, 3:] = inertial.v / scales.vu
    return epochs, nodes


def _propagate_segments(epochs, nodes, cfg, model, with_stm=True):
    """Propagate every shooting segment; optionally carry the STMs."""
    n_seg = epochs.size - 1
    finals = np.empty((n_seg, 6))
    stms = np.empty((n_seg, 6, 6)) if with_stm else None
    for j in range(n_seg):
        x0 = StateVector.from_array(nodes[j])
        if with_stm:
            xf, phi = propagate_with_stm(x0, epochs[j], epochs[j + 1], cfg, model)
            stms[j] = phi.matrix
        else:
            xf = propagate(x0, epochs[j], epochs[j + 1], cfg, model)
        finals[j] = xf.as_array()
    return finals, stms


def _defects(finals, nodes):
    return finals - nodes[1:]


def _worst_defects(d, model):
    pos_km = np.abs(d[:, :3]).max() * model.scales.lu
    vel_kms = np.abs(d[:, 3:]).max() * model.scales.vu
    return pos_km, vel_kms


def _min_norm_step(stms, d, f_dep, f_arr, weights, time_scale,
                   damping: float = 0.0):
    """Regularized least-norm update for the shooting chain with free times.

    Unknowns are node state corrections plus node epoch shifts; freeing the
    epochs supplies the along-track slack that fixed-time shooting lacks on
    quasi-periodic orbits (phase stiffness otherwise stalls the velocity
    defects). Defect rows are scaled by ``weights`` so the step descends the
    same metric the convergence test uses; epoch columns are scaled by
    ``time_scale``. Solves (J J^T + damping^2 I) mult = -W d on the block
    tridiagonal normal matrix and maps back through J^T. Zero damping is
    the exact minimum-norm step; positive damping shortens it toward
    steepest descent, keeping corrections inside the linearization's trust
    region near perilune where the segment maps are stiff.

    Departure/arrival time columns use the autonomous-flow approximation
    (-Phi_j f_dep, +f_arr); the ephemeris epoch sensitivity they omit is
    second order and Newton absorbs it.

    Returns (dx nodes x 6, dt nodes).
    """
    n_seg = d.shape[0]
    w = np.asarray(weights, dtype=float)
    # per-row blocks: R_j acts on node j (state + epoch), S_j on node j+1
    r_blocks = []
    s_blocks = []
    for j in range(n_seg):
        r = np.empty((6, 7))
        r[:, :6] = w[:, None] * stms[j]
        r[:, 6] = -(w * (stms[j] @ f_dep[j])) * time_scale
        s = np.empty((6, 7))
        s[:, :6] = -np.diag(w)
        s[:, 6] = (w * f_arr[j]) * time_scale
        r_blocks.append(r)
        s_blocks.append(s)

    reg = damping**2 * np.eye(6)
    rows, cols, vals = [], [], []

    def put(bi, bj, block):
        for a in range(6):
            for b in range(6):
                rows.append(6 * bi + a)
                cols.append(6 * bj + b)
                vals.append(block[a, b])

    for j in range(n_seg):
        put(j, j, r_blocks[j] @ r_blocks[j].T + s_blocks[j] @ s_blocks[j].T + reg)
        if j + 1 < n_seg:
            upper = s_blocks[j] @ r_blocks[j + 1].T
            put(j, j + 1, upper)
            put(j + 1, j, upper.T)
    normal = scipy.sparse.csc_matrix(
        (vals, (rows, cols)), shape=(6 * n_seg, 6 * n_seg))
    rhs = -(d * w[None, :]).ravel()
    mult = scipy.sparse.linalg.spsolve(normal, rhs).reshape(n_seg, 6)

    dq = np.zeros((n_seg + 1, 7))
    for j in range(n_seg):
        dq[j] += r_blocks[j].T @ mult[j]
        dq[j + 1] += s_blocks[j].T @ mult[j]
    return dq[:, :6], dq[:, 6] * time_scale


def _node_rhs(epochs, states, model):
    """Canonical RHS at (epoch, state) pairs, per unit canonical time."""
    from ._kernels import rhs_state

    tu = model.scales.tu
    out = np.empty_like(states)
    for j in range(states.shape[0]):
        out[j] = rhs_state(epochs[j] / tu, states[j], model.pack)
    return out


def _newton_sweep(epochs, nodes, cfg, model, pos_tol_km, vel_tol_kms,
                  max_iter):
    """Levenberg-damped least-norm Newton on the continuity defects.

    Node epochs are free alongside node states. Trial evaluations propagate
    states only; the transition matrices are rebuilt once per accepted
    iterate, and the Levenberg parameter persists across iterations.
    Returns (epochs, nodes, converged, iterations).
    """
    pos_scale = JOINT_POSITION_TOL_KM / model.scales.lu
    vel_scale = JOINT_VELOCITY_TOL_KMS / model.scales.vu
    weights = np.array(3 * [1.0 / pos_scale] + 3 * [1.0 / vel_scale])
    weights /= weights.max()
    tu = model.scales.tu
    time_scale = 0.1  # canonical; epoch moves this size cost one state unit

    def merit(d):
        return math.hypot(np.linalg.norm(d[:, :3] / pos_scale),
                          np.linalg.norm(d[:, 3:] / vel_scale))

    finals, _ = _propagate_segments(epochs, nodes, cfg, model, with_stm=False)
    d = _defects(finals, nodes)
    damping = 0.0
    for it in range(max_iter):
        worst_pos, worst_vel = _worst_defects(d, model)
        if worst_pos <= pos_tol_km and worst_vel <= vel_tol_kms:
            return epochs, nodes, True, it
        _, stms = _propagate_segments(epochs, nodes, cfg, model, with_stm=True)
        f_dep = _node_rhs(epochs[:-1], nodes[:-1], model)
        f_arr = _node_rhs(epochs[1:], finals, model)
        base = merit(d)
        min_gap = np.diff(epochs).min()
        accepted = False
        for _ in range(9):
            dx, dt_tu = _min_norm_step(stms, d, f_dep, f_arr, weights,
                                       time_scale, damping)
            dt = dt_tu * tu
            # keep epochs strictly increasing: shrink the whole step if an
            # epoch shift approaches the smallest segment duration
            worst_shift = np.abs(np.diff(dt)).max() if dt.size > 1 else 0.0
            if worst_shift > 0.3 * min_gap:
                scale = 0.3 * min_gap / worst_shift
                dx = dx * scale
                dt = dt * scale
            trial_nodes = nodes + dx
            trial_epochs = epochs + dt
            try:
                finals_t, _ = _propagate_segments(trial_epochs, trial_nodes,
                                                  cfg, model, with_stm=False)
            except Exception:
                damping = max(4.0 * damping, 1.0)
                continue
            d_t = _defects(finals_t, trial_nodes)
            if merit(d_t) < base:
                accepted = True
                damping = 0.0 if damping < 0.5 else damping / 4.0
                break
            damping = max(4.0 * damping, 1.0)
        if not accepted:
            return epochs, nodes, False, it + 1
        epochs, nodes, d = trial_epochs, trial_nodes, d_t
        finals = finals_t
    worst_pos, worst_vel = _worst_defects(d, model)
    return epochs, nodes, (worst_pos <= pos_tol_km
                           and worst_vel <= vel_tol_kms), max_iter


def _with_earth_ecc(model: DynamicsModel, ecc: float) -> DynamicsModel:
    from dataclasses import replace

    constants = replace(model.constants,
                        earth_orbit=replace(model.constants.earth_orbit, ecc=ecc))
    return DynamicsModel(
        constants=constants, scales=model.scales, spacecraft=model.spacecraft,
        include_j2=model.include_j2, include_earth=model.include_earth,
        include_sun=model.include_sun, include_srp=model.include_srp)


def refine_baseline(seed: Cr3bpOrbit, revolutions: int, cfg: IntegratorConfig,
                    model: DynamicsModel, t_start: Epoch = 0.0,
                    knots_per_rev: int = 220, segments_per_half_rev: int = 4,
                    extra_metadata: dict | None = None) -> BaselineOrbit:
    """Multiple-shooting correction of stacked seed revolutions.

    The restricted-problem seed is first converged against a circularized
    Earth ephemeris (where the seed mapping is nearly exact), then walked to
    the configured eccentricity by an adaptive homotopy; each stage runs at
    a coarse integrator tolerance with loose joint targets, and a final
    polish at the operational tolerance closes every joint to 1 m and
    1 mm/s. Knots and apsis tables are rebuilt from the corrected segments.
    """
    if revolutions < 10:
        raise ValueError("baseline refinement expects at least 10 revolutions")
    coarse = IntegratorConfig(rel_tol=1e-9, abs_tol=1e-9,
                              max_step=cfg.max_step, min_step=cfg.min_step)
    stage_pos_km, stage_vel_kms = 0.05, 5e-8   # 50 m, 0.05 mm/s

    ecc_target = model.constants.earth_orbit.ecc
    model0 = _with_earth_ecc(model, 0.0) if ecc_target else model
    epochs, nodes = cr3bp_seed_nodes(seed, revolutions, model0, t_start,
                                     segments_per_half_rev)
    epochs, nodes, ok, _ = _newton_sweep(epochs, nodes, coarse, model0,
                                         stage_pos_km, stage_vel_kms,
                                         max_iter=15)
    if not ok:
        finals, _ = _propagate_segments(epochs, nodes, coarse, model0, False)
        wp, wv = _worst_defects(_defects(finals, nodes), model0)
        raise RefinementError(
            "circular-ephemeris bootstrap did not converge", wp, wv)

    ecc = 0.0
    step = 0.004
    while ecc < ecc_target:
        ecc_try = min(ecc + step, ecc_target)
        stage_model = _with_earth_ecc(model, ecc_try)
        ep_c, cand, ok, iters = _newton_sweep(epochs.copy(), nodes.copy(),
                                              coarse, stage_model,
                                              stage_pos_km, stage_vel_kms,
                                              max_iter=8)
        if ok:
            epochs, nodes, ecc = ep_c, cand, ecc_try
            if iters <= 4:
                step = min(step * 1.6, 0.008)
        else:
            step *= 0.5
            if step < 2e-4:
                finals, _ = _propagate_segments(ep_c, cand, coarse,
                                                stage_model, False)
                wp, wv = _worst_defects(_defects(finals, cand), stage_model)
                raise RefinementError(
                    f"eccentricity homotopy stalled at e = {ecc:.4f}", wp, wv)

    epochs, nodes, ok, _ = _newton_sweep(epochs, nodes, cfg, model,
                                         JOINT_POSITION_TOL_KM,
                                         JOINT_VELOCITY_TOL_KMS, max_iter=12)
    if not ok:
        finals, _ = _propagate_segments(epochs, nodes, cfg, model, False)
        wp, wv = _worst_defects(_defects(finals, nodes), model)
        raise RefinementError("final polish did not converge", wp, wv)

    return _assemble(seed, revolutions, epochs, nodes, cfg, model,
                     knots_per_rev, t_start, extra_metadata)


def _assemble(seed, revolutions, epochs, nodes, cfg, model, knots_per_rev,
              t_start, extra_metadata) -> BaselineOrbit:
    period_s = seed.period / model.constants.earth_orbit.mean_motion
    max_step_tu = (period_s / model.scales.tu) / knots_per_rev
    knot_t, knot_x, knot_a = [], [], []
    for j in range(epochs.size - 1):
        traj = propagate_trajectory(StateVector.from_array(nodes[j]),
                                    epochs[j], epochs[j + 1], cfg, model,
                                    max_step_tu=max_step_tu)
        last = None if j == epochs.size - 2 else -1  # node owns the joint
        knot_t.append(traj.epochs[:last])
        knot_x.append(traj.states[:last])
        knot_a.append(traj.accelerations[:last])
    t = np.concatenate(knot_t)
    x = np.concatenate(knot_x)
    a = np.concatenate(knot_a)

    apolunes, perilunes = _apsis_tables(t, x, cfg, model)
    meta = {
        "format_version": FORMAT_VERSION,
        "mass_ratio": seed.mass_ratio,
        "cr3bp_period": seed.period,
        "revolutions": revolutions,
        "t_start_s": float(t_start),
        "knots_per_rev": knots_per_rev,
        "lu_km": model.scales.lu,
        "vu_kms": model.scales.vu,
        "tu_s": model.scales.tu,
    }
    if extra_metadata:
        meta.update(extra_metadata)
    return BaselineOrbit(epochs=t, states=x, accelerations=a,
                         apolune_epochs=apolunes, perilune_epochs=perilunes,
                         metadata=meta)


def _apsis_tables(t, x, cfg, model):
    """Event-refined apsis epochs located from radial-rate sign changes."""
    rn = np.linalg.norm(x[:, :3], axis=1)
    vr = np.einsum("ij,ij->i", x[:, :3], x[:, 3:]) / rn
    apolunes, perilunes = [], []
    sign_flips = np.nonzero(vr[:-1] * vr[1:] < 0.0)[0]
    for i in sign_flips:
        kind = APOLUNE if vr[i] > 0.0 else PERILUNE
        horizon = (t[i + 1] - t[i]) * 1.5 + 1.0
        res = find_event(StateVector.from_array(x[i]), t[i],
                         EventSpec(kind=kind), horizon, cfg, model)
        if not res.found:
            continue
        (apolunes if kind == APOLUNE else perilunes).append(res.epoch)
    return np.asarray(apolunes), np.asarray(perilunes)


# --- interpolation -----------------------------------------------------------

def _quintic_weights(s: np.ndarray):
    s2 = s * s
    s3 = s2 * s
    s4 = s3 * s
    s5 = s4 * s
    h0 = 1.0 - 10.0 * s3 + 15.0 * s4 - 6.0 * s5
    h1 = s - 6.0 * s3 + 8.0 * s4 - 3.0 * s5
    h2 = 0.5 * s2 - 1.5 * s3 + 1.5 * s4 - 0.5 * s5
    h3 = 0.5 * s3 - s4 + 0.5 * s5
    h4 = -4.0 * s3 + 7.0 * s4 - 3.0 * s5
    h5 = 10.0 * s3 - 15.0 * s4 + 6.0 * s5
    d0 = -30.0 * s2 + 60.0 * s3 - 30.0 * s4
    d1 = 1.0 - 18.0 * s2 + 32.0 * s3 - 15.0 * s4
    d2 = s - 4.5 * s2 + 6.0 * s3 - 2.5 * s4
    d3 = 1.5 * s2 - 4.0 * s3 + 2.5 * s4
    d4 = -12.0 * s2 + 28.0 * s3 - 15.0 * s4
    d5 = 30.0 * s2 - 60.0 * s3 + 30.0 * s4
    return (h0, h1, h2, h3, h4, h5), (d0, d1, d2, d3, d4, d5)


def reference_state(b: BaselineOrbit, t: Epoch) -> StateVector:
    """Quintic-Hermite interpolated reference state at epoch t (canonical)."""
    return StateVector.from_array(reference_states(b, np.array([float(t)]))[0])


def reference_states(b: BaselineOrbit, ts: np.ndarray) -> np.ndarray:
    """Vectorized interpolation; rows are 6-vector states (canonical)."""
    ts = np.asarray(ts, dtype=float)
    t0, t1 = b.span
    if np.any(ts < t0) or np.any(ts > t1):
        raise BaselineRangeError(
            f"epoch outside baseline span [{t0:.3f}, {t1:.3f}] s")
    idx = np.searchsorted(b.epochs, ts, side="right") - 1
    idx = np.clip(idx, 0, b.epochs.size - 2)
    ta = b.epochs[idx]
    h = b.epochs[idx + 1] - ta
    s = (ts - ta) / h
    (h0, h1, h2, h3, h4, h5), (d0, d1, d2, d3, d4, d5) = _quintic_weights(s)

    tu = b.metadata["tu_s"]
    p0 = b.states[idx, :3]
    p1 = b.states[idx + 1, :3]
    # knot derivatives in per-second units of the epoch axis
    v0 = b.states[idx, 3:] / tu
    v1 = b.states[idx + 1, 3:] / tu
    a0 = b.accelerations[idx] / tu**2
    a1 = b.accelerations[idx + 1] / tu**2

    hcol = h[:, None]
    pos = (h0[:, None] * p0 + h1[:, None] * hcol * v0
           + h2[:, None] * hcol**2 * a0 + h3[:, None] * hcol**2 * a1
           + h4[:, None] * hcol * v1 + h5[:, None] * p1)
    vel = (d0[:, None] * p0 / hcol + d1[:, None] * v0
           + d2[:, None] * hcol * a0 + d3[:, None] * hcol * a1
           + d4[:, None] * v1 + d5[:, None] * p1 / hcol)
    out = np.empty((ts.size, 6))
    out[:, :3] = pos
    out[:, 3:] = vel * tu   # back to canonical velocity
    return out


def apsis_epochs(b: BaselineOrbit, kind: str, window: tuple[Epoch, Epoch]) -> np.ndarray:
    """Stored apsis epochs inside [window[0], window[1]], ascending."""
    if kind == APOLUNE:
        table = b.apolune_epochs
    elif kind == PERILUNE:
        table = b.perilune_epochs
    else:
        raise ValueError(f"unknown apsis kind {kind!r}")
    lo, hi = window
    t0, t1 = b.span
    if lo > t1 or hi < t0:
        raise BaselineRangeError("window outside baseline span")
    return table[(table >= lo) & (table <= hi)].copy()


# --- file format ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_baseline(b: BaselineOrbit, path: str | Path):
    """Write the line-oriented text container; atomic via temp-file rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tu = b.metadata["tu_s"]
    lines = ["# nrhosk baseline"]
    for key in sorted(b.metadata):
        lines.append(f"{key} = {b.metadata[key]}")
    lines.append(f"knots {b.epochs.size}")
    for i in range(b.epochs.size):
        row = [b.epochs[i] / tu, *b.states[i], *b.accelerations[i]]
        lines.append(" ".join(_fmt(v) for v in row))
    for name, table in (("apolunes", b.apolune_epochs),
                        ("perilunes", b.perilune_epochs)):
        lines.append(f"{name} {table.size}")
        for v in table:
            lines.append(_fmt(v / tu))
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def load_baseline(path: str | Path) -> BaselineOrbit:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# nrhosk baseline"):
        raise ValueError(f"{path} is not a baseline file")
    meta: dict = {}
    i = 1
    while "=" in lines[i]:
        key, _, val = lines[i].partition("=")
        key = key.strip()
        val = val.strip()
        try:
            num = float(val)
            meta[key] = int(num) if num == int(num) and "." not in val and "e" not in val.lower() else num
        except ValueError:
            meta[key] = val
        i += 1
    if int(meta.get("format_version", -1)) != FORMAT_VERSION:
        raise ValueError("unsupported baseline format version")
    tu = meta["tu_s"]

    def read_block(header: str):
        nonlocal i
        name, count = lines[i].split()
        if name != header:
            raise ValueError(f"expected block {header!r}, found {name!r}")
        n = int(count)
        block = lines[i + 1:i + 1 + n]
        i += 1 + n
        return block

    knot_lines = read_block("knots")
    data = np.array([[float(v) for v in ln.split()] for ln in knot_lines])
    apolunes = np.array([float(v) for v in read_block("apolunes")])
    perilunes = np.array([float(v) for v in read_block("perilunes")])
    return BaselineOrbit(
        epochs=data[:, 0] * tu,
        states=data[:, 1:7],
        accelerations=data[:, 7:10],
        apolune_epochs=apolunes * tu,
        perilune_epochs=perilunes * tu,
        metadata=meta,
    )

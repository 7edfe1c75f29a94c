"""Circular restricted three-body problem machinery.

Generates members of the L2 halo family in the rotating barycentric frame
by differential correction of perpendicular xz-plane crossings, walked with
pseudo-arclength continuation into the near-rectilinear range. These orbits
seed the full-model baseline; they are never used directly for control.

All quantities are nondimensional (distance = primary separation,
time = 1 / mean motion).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.integrate import solve_ivp


class GenerationError(RuntimeError):
    """Family generation failed; carries the last good member when available."""

    def __init__(self, message: str, last_member: "Cr3bpOrbit | None" = None):
        super().__init__(message)
        self.last_member = last_member


@dataclass(frozen=True)
class Cr3bpOrbit:
    """A corrected periodic orbit anchored at a perpendicular xz-crossing.

    Generation normalizes the anchor to the apolune-side crossing (the far
    one), so the half-period crossing is the perilune pass.
    """

    mass_ratio: float
    initial_state: np.ndarray    # (x, y, z, vx, vy, vz) at the anchor crossing
    period: float

    def __post_init__(self):
        arr = np.asarray(self.initial_state, dtype=float)
        if arr.shape != (6,):
            raise ValueError("initial_state must be a 6-vector")
        object.__setattr__(self, "initial_state", arr)

    def moon_distance(self, state: np.ndarray) -> float:
        moon = np.array([1.0 - self.mass_ratio, 0.0, 0.0])
        return float(np.linalg.norm(state[:3] - moon))

    def perilune_radius(self) -> float:
        half = half_period_state(self.initial_state, self.mass_ratio)
        return min(self.moon_distance(half), self.moon_distance(self.initial_state))

    def apolune_radius(self) -> float:
        half = half_period_state(self.initial_state, self.mass_ratio)
        return max(self.moon_distance(half), self.moon_distance(self.initial_state))


@njit(cache=True)
def _cr3bp_rhs(t, y, mu):
    dy = np.empty(6)
    x, yy, z = y[0], y[1], y[2]
    r1 = np.sqrt((x + mu) ** 2 + yy * yy + z * z)
    r2 = np.sqrt((x - 1.0 + mu) ** 2 + yy * yy + z * z)
    omx = x - (1.0 - mu) * (x + mu) / r1**3 - mu * (x - 1.0 + mu) / r2**3
    omy = yy - (1.0 - mu) * yy / r1**3 - mu * yy / r2**3
    omz = -(1.0 - mu) * z / r1**3 - mu * z / r2**3
    dy[0] = y[3]
    dy[1] = y[4]
    dy[2] = y[5]
    dy[3] = 2.0 * y[4] + omx
    dy[4] = -2.0 * y[3] + omy
    dy[5] = omz
    return dy


@njit(cache=True)
def _cr3bp_jacobian(y, mu):
    """6x6 system matrix: potential Hessian plus Coriolis coupling."""
    x, yy, z = y[0], y[1], y[2]
    a = np.zeros((6, 6))
    for i in range(3):
        a[i, 3 + i] = 1.0
    rho1 = np.array([x + mu, yy, z])
    rho2 = np.array([x - 1.0 + mu, yy, z])
    h = np.zeros((3, 3))
    h[0, 0] = 1.0
    h[1, 1] = 1.0
    for rho, m in ((rho1, 1.0 - mu), (rho2, mu)):
        rn2 = rho[0] ** 2 + rho[1] ** 2 + rho[2] ** 2
        rn = np.sqrt(rn2)
        c1 = 3.0 * m / rn**5
        c2 = m / rn**3
        for i in range(3):
            for j in range(3):
                h[i, j] += c1 * rho[i] * rho[j]
            h[i, i] -= c2
    a[3:, :3] = h
    a[3, 4] = 2.0
    a[4, 3] = -2.0
    return a


@njit(cache=True)
def _cr3bp_rhs_stm(t, y, mu):
    dy = np.empty(42)
    dy[:6] = _cr3bp_rhs(t, y[:6], mu)
    a = _cr3bp_jacobian(y[:6], mu)
    phi = np.ascontiguousarray(y[6:]).reshape(6, 6)
    dphi = a @ phi
    dy[6:] = dphi.ravel()
    return dy


_TOL = 1e-13


def propagate_cr3bp(x0: np.ndarray, t_span: float, mu: float,
                    with_stm: bool = False, dense: bool = False):
    if with_stm:
        y0 = np.concatenate([x0, np.eye(6).ravel()])
        fun = lambda t, y: _cr3bp_rhs_stm(t, y, mu)
    else:
        y0 = np.asarray(x0, dtype=float)
        fun = lambda t, y: _cr3bp_rhs(t, y, mu)
    sol = solve_ivp(fun, (0.0, t_span), y0, method="DOP853",
                    rtol=_TOL, atol=_TOL, dense_output=dense)
    if not sol.success:
        raise GenerationError(f"restricted-problem integration failed: {sol.message}")
    return sol


def l2_position(mass_ratio: float) -> float:
    """Collinear point beyond the smaller primary, by Newton on the x-axis."""
    mu = mass_ratio
    x = 1.0 + (mu / 3.0) ** (1.0 / 3.0)
    for _ in range(100):
        f = x - (1.0 - mu) / (x + mu) ** 2 - mu / (x - 1.0 + mu) ** 2
        df = 1.0 + 2.0 * (1.0 - mu) / (x + mu) ** 3 + 2.0 * mu / (x - 1.0 + mu) ** 3
        step = f / df
        x -= step
        if abs(step) < 1e-15:
            break
    return x


def _next_plane_crossing(x0: np.ndarray, mu: float, with_stm: bool,
                         t_max: float = 10.0):
    """Integrate to the next y = 0 crossing (any direction), past a start nudge."""
    warmup = 1e-2
    sol0 = propagate_cr3bp(x0, warmup, mu, with_stm=with_stm)
    y_start = sol0.y[:, -1]

    def plane(t, y):
        return y[1]

    plane.terminal = True
    plane.direction = 0.0
    if with_stm:
        fun = lambda t, y: _cr3bp_rhs_stm(t, y, mu)
    else:
        fun = lambda t, y: _cr3bp_rhs(t, y, mu)
    sol = solve_ivp(fun, (warmup, t_max), y_start, method="DOP853",
                    rtol=_TOL, atol=_TOL, events=[plane])
    if sol.status != 1:
        raise GenerationError("no xz-plane crossing found")
    return float(sol.t_events[0][0]), sol.y_events[0][0]


def half_period_state(x0: np.ndarray, mu: float) -> np.ndarray:
    _, y = _next_plane_crossing(np.asarray(x0, float), mu, with_stm=False)
    return y[:6]


def _crossing_constraints(x0_full: np.ndarray, mu: float):
    """Residuals (vx, vz) at the next crossing and their sensitivities.

    Returns (residual(2,), jac(2,3), t_half, state_f) with jacobian columns
    ordered (x0, z0, vy0), time-of-flight variation eliminated through the
    crossing condition.
    """
    t_f, yf = _next_plane_crossing(x0_full, mu, with_stm=True)
    state_f = yf[:6]
    phi = yf[6:].reshape(6, 6)
    rhs_f = _cr3bp_rhs(t_f, state_f, mu)
    vy_f = state_f[4]
    if abs(vy_f) < 1e-12:
        raise GenerationError("degenerate crossing: vy = 0")
    residual = np.array([state_f[3], state_f[5]])
    cols = (0, 2, 4)
    jac = np.empty((2, 3))
    for out_i, row in enumerate((3, 5)):
        for out_j, col in enumerate(cols):
            jac[out_i, out_j] = phi[row, col] - rhs_f[row] / vy_f * phi[1, col]
    return residual, jac, t_f, state_f


def correct_halo(x0: float, z0: float, vy0: float, mu: float,
                 tol: float = 1e-12, max_iter: int = 50):
    """Differential correction to the perpendicular-crossing symmetry.

    z0 is held fixed; x0 and vy0 absorb the (vx, vz) residuals at the next
    xz-plane crossing. Returns (orbit, half_period_state). Iterates escaping
    the libration-region box are rejected so Newton cannot wander to distant
    frame-periodic artifacts.
    """
    q = np.array([x0, vy0])
    for _ in range(max_iter):
        if not (0.9 < q[0] < 1.3 and abs(q[1]) < 1.5):
            raise GenerationError("halo correction left the libration region")
        state0 = np.array([q[0], 0.0, z0, 0.0, q[1], 0.0])
        residual, jac, t_half, state_f = _crossing_constraints(state0, mu)
        if np.linalg.norm(residual) < tol:
            orbit = Cr3bpOrbit(mass_ratio=mu, initial_state=state0,
                               period=2.0 * t_half)
            return orbit, state_f
        step = np.linalg.solve(jac[:, [0, 2]], residual)
        q = q - step
    raise GenerationError(f"halo correction did not converge in {max_iter} iterations")


def _find_family_entry(mu: float, z0: float = -0.02):
    """Locate one small-|z| halo member to anchor the family walk.

    Scans perpendicular-launch states near L2 for xz-plane crossings with
    vx = 0 (1D bisection in vy0), keeps the root with the smallest remaining
    |vz|, and hands that seed to the full two-parameter corrector.
    """

    def crossing_velocities(x0, vy0):
        state0 = np.array([x0, 0.0, z0, 0.0, vy0, 0.0])
        yf = half_period_state(state0, mu)
        return yf[3], yf[5]

    best = None  # (|vz|, x0, vy0)
    for x0 in np.linspace(1.06, 1.15, 10):
        vys = np.linspace(0.03, 0.8, 32)
        prev_f = None
        prev_v = None
        for vy0 in vys:
            try:
                vx, _ = crossing_velocities(x0, vy0)
            except GenerationError:
                prev_f = None
                continue
            if prev_f is not None and prev_f * vx <= 0.0:
                a, b, fa = prev_v, vy0, prev_f
                for _ in range(60):
                    mid = 0.5 * (a + b)
                    fm, _ = crossing_velocities(x0, mid)
                    if fa * fm <= 0.0:
                        b = mid
                    else:
                        a, fa = mid, fm
                root = 0.5 * (a + b)
                _, vz = crossing_velocities(x0, root)
                if best is None or abs(vz) < best[0]:
                    best = (abs(vz), x0, root)
            prev_f, prev_v = vx, vy0
    if best is None:
        raise GenerationError("no halo family entry found in the scan window")
    return correct_halo(best[1], z0, best[2], mu)[0]


def _normalize(orbit: Cr3bpOrbit) -> Cr3bpOrbit:
    """Anchor at the apolune-side crossing, southern orientation, re-polished.

    The apolune crossing is the numerically gentler anchor (small velocity),
    and the southern branch has its apolune below the orbit plane.
    """
    mu = orbit.mass_ratio
    half = half_period_state(orbit.initial_state, mu)
    if orbit.moon_distance(half) > orbit.moon_distance(orbit.initial_state):
        anchor = np.array([half[0], 0.0, half[2], 0.0, half[4], 0.0])
    else:
        anchor = orbit.initial_state.copy()
    if anchor[2] > 0.0:
        anchor[2] = -anchor[2]
        anchor[5] = -anchor[5]
    polished, _ = correct_halo(anchor[0], anchor[2], anchor[4], mu, tol=1e-13)
    return polished


def _correct_arclength(q_pred: np.ndarray, q_anchor: np.ndarray,
                       tangent: np.ndarray, ds: float, mu: float,
                       tol: float = 1e-12, max_iter: int = 50):
    """Newton on (vx_f, vz_f, arclength) with unknowns (x0, z0, vy0)."""
    q = q_pred.copy()
    for _ in range(max_iter):
        state0 = np.array([q[0], 0.0, q[1], 0.0, q[2], 0.0])
        residual2, jac2, t_half, state_f = _crossing_constraints(state0, mu)
        arc = (q - q_anchor) @ tangent - ds
        residual = np.array([residual2[0], residual2[1], arc])
        if np.linalg.norm(residual[:2]) < tol and abs(arc) < 1e-10:
            orbit = Cr3bpOrbit(mass_ratio=mu, initial_state=state0,
                               period=2.0 * t_half)
            return orbit, state_f
        jac = np.vstack([jac2, tangent])
        q = q - np.linalg.solve(jac, residual)
    raise GenerationError("arclength correction did not converge")


def _member_params(orbit: Cr3bpOrbit) -> np.ndarray:
    s = orbit.initial_state
    return np.array([s[0], s[2], s[4]])


def continue_family(entry: Cr3bpOrbit, stop_metric, target: float,
                    refine_tol: float, mu: float, max_steps: int = 400):
    """Walk the family until ``stop_metric`` crosses ``target``, then refine.

    ``stop_metric(orbit) -> float`` must vary monotonically near the target
    (perilune radius and period both do on the near-rectilinear branch).
    """
    # second member: small step in -z to define the initial tangent
    q0 = _member_params(entry)
    second, _ = correct_halo(q0[0], q0[1] - 2e-3, q0[2], mu)
    members = [entry, second]
    f_prev = stop_metric(entry)
    f_cur = stop_metric(second)
    if abs(f_cur - target) <= refine_tol:
        return second
    ds = 5e-3
    for _ in range(max_steps):
        qa = _member_params(members[-2])
        qb = _member_params(members[-1])
        tangent = qb - qa
        tangent /= np.linalg.norm(tangent)
        try:
            nxt, _ = _correct_arclength(qb + ds * tangent, qb, tangent, ds, mu)
        except (GenerationError, np.linalg.LinAlgError):
            ds *= 0.5
            if ds < 1e-6:
                raise GenerationError("continuation stalled",
                                      last_member=members[-1])
            continue
        f_nxt = stop_metric(nxt)
        if (f_cur - target) * (f_nxt - target) <= 0.0:
            # bracketed: bisect on the arclength parameter from members[-1]
            lo, hi = 0.0, ds
            f_lo = f_cur
            orbit_hi = nxt
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                cand, _ = _correct_arclength(qb + mid * tangent, qb, tangent,
                                             mid, mu)
                f_mid = stop_metric(cand)
                if abs(f_mid - target) <= refine_tol:
                    return cand
                if (f_lo - target) * (f_mid - target) <= 0.0:
                    hi = mid
                    orbit_hi = cand
                else:
                    lo, f_lo = mid, f_mid
            return orbit_hi
        members.append(nxt)
        f_cur = f_nxt
        ds = min(ds * 1.4, 0.05)
    raise GenerationError("family walk exhausted without reaching the target",
                          last_member=members[-1])


def generate_cr3bp_nrho(mass_ratio: float,
                        perilune_radius_target: float) -> Cr3bpOrbit:
    """Southern L2 halo-family member at the requested perilune radius.

    The target radius is nondimensional (primary-separation units) and must
    sit inside the near-rectilinear part of the family.
    """
    if not 0.0 < mass_ratio < 0.5:
        raise ValueError("mass_ratio must be in (0, 0.5)")
    if not 1e-4 < perilune_radius_target < 0.1:
        raise ValueError("perilune radius target outside the family range")
    entry = _find_family_entry(mass_ratio)

    def metric(orbit: Cr3bpOrbit) -> float:
        return orbit.perilune_radius()

    member = continue_family(entry, metric, perilune_radius_target,
                             refine_tol=1e-6, mu=mass_ratio)
    return _normalize(member)


def find_nrho_by_period(mass_ratio: float, period_target: float) -> Cr3bpOrbit:
    """Southern L2 family member whose period matches ``period_target`` (nondim)."""
    entry = _find_family_entry(mass_ratio)

    def metric(orbit: Cr3bpOrbit) -> float:
        return orbit.period

    member = continue_family(entry, metric, period_target,
                             refine_tol=1e-9, mu=mass_ratio)
    return _normalize(member)

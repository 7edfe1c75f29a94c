"""Numerical propagation of the perturbed dynamics and their variations.

Integration uses the adaptive 8th-order Dormand-Prince pair (scipy's DOP853)
at tight tolerances; the state-transition matrix rides along as 36 extra
first-order equations. Events (true-anomaly and apsis crossings) are located
by sign-change bracketing on the accepted steps with root refinement on the
step interpolant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from ._kernels import rhs_state, rhs_state_stm
from .dynamics import DynamicsModel, osculating_true_anomaly
from .state import Epoch, StateVector, Stm

_TWO_PI = 2.0 * math.pi

# Event kinds
TRUE_ANOMALY = "true-anomaly"
APOLUNE = "apolune"
PERILUNE = "perilune"


class PropagationError(RuntimeError):
    """Integration failed (step underflow or non-finite state).

    Carries the last valid epoch (s) and canonical state reached.
    """

    def __init__(self, message: str, last_epoch: float, last_state: StateVector):
        super().__init__(message)
        self.last_epoch = last_epoch
        self.last_state = last_state


@dataclass(frozen=True)
class IntegratorConfig:
    """Tolerances and step bounds; max_step/min_step are canonical time."""

    rel_tol: float = 1e-12
    abs_tol: float = 1e-12
    max_step: float = 0.2
    min_step: float = 1e-13

    def __post_init__(self):
        if self.rel_tol <= 0.0 or self.abs_tol <= 0.0:
            raise ValueError("tolerances must be positive")
        if not 0.0 < self.min_step < self.max_step:
            raise ValueError("require 0 < min_step < max_step")


@dataclass(frozen=True)
class EventSpec:
    """A trajectory event: true-anomaly crossing or apsis passage."""

    kind: str
    target_angle: float = 0.0
    direction: str = "increasing"

    def __post_init__(self):
        if self.kind not in (TRUE_ANOMALY, APOLUNE, PERILUNE):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if not 0.0 <= self.target_angle < _TWO_PI:
            raise ValueError("target_angle must be in [0, 2*pi)")
        if self.direction not in ("increasing", "any"):
            raise ValueError("direction must be 'increasing' or 'any'")


@dataclass(frozen=True)
class ImpulsiveManeuver:
    """Instantaneous velocity change (canonical VU, inertial frame)."""

    epoch: Epoch
    dv: np.ndarray

    def __post_init__(self):
        dv = np.asarray(self.dv, dtype=float)
        if dv.shape != (3,) or not np.all(np.isfinite(dv)):
            raise ValueError("dv must be a finite 3-vector")
        object.__setattr__(self, "dv", dv)


@dataclass(frozen=True)
class EventResult:
    """Outcome of an event search; when not found, carries the horizon state."""

    found: bool
    epoch: Epoch
    state: StateVector


@dataclass(frozen=True)
class Trajectory:
    """Accepted-step samples of one propagation arc (canonical units)."""

    epochs: np.ndarray        # seconds, shape (n,)
    states: np.ndarray        # shape (n, 6)
    accelerations: np.ndarray  # shape (n, 3)


def _integrate(y0: np.ndarray, t0_s: float, t1_s: float, cfg: IntegratorConfig,
               model: DynamicsModel, with_stm: bool, events=None,
               max_step_tu: float | None = None, dense: bool = False):
    tu = model.scales.tu
    pack = model.pack
    rhs = rhs_state_stm if with_stm else rhs_state
    fun = lambda t, y: rhs(t, y, pack)
    sol = solve_ivp(
        fun, (t0_s / tu, t1_s / tu), y0, method="DOP853",
        rtol=cfg.rel_tol, atol=cfg.abs_tol,
        max_step=max_step_tu if max_step_tu is not None else cfg.max_step,
        events=events, dense_output=dense)
    if sol.status == -1:
        raise PropagationError(
            f"integration failed: {sol.message}",
            last_epoch=float(sol.t[-1]) * tu,
            last_state=StateVector.from_array(sol.y[:6, -1]))
    return sol


def propagate(x0: StateVector, t0: Epoch, t1: Epoch, cfg: IntegratorConfig,
              model: DynamicsModel) -> StateVector:
    """Flow the state from t0 to t1 (either direction)."""
    if t1 == t0:
        return x0
    sol = _integrate(x0.as_array(), t0, t1, cfg, model, with_stm=False)
    return StateVector.from_array(sol.y[:, -1])


def propagate_with_stm(x0: StateVector, t0: Epoch, t1: Epoch,
                       cfg: IntegratorConfig,
                       model: DynamicsModel) -> tuple[StateVector, Stm]:
    """Flow the state and the transition matrix Phi(t1, t0) together."""
    if t1 == t0:
        return x0, Stm.identity()
    y0 = np.concatenate([x0.as_array(), np.eye(6).ravel()])
    sol = _integrate(y0, t0, t1, cfg, model, with_stm=True)
    yf = sol.y[:, -1]
    return StateVector.from_array(yf[:6]), Stm(yf[6:].reshape(6, 6))


def propagate_trajectory(x0: StateVector, t0: Epoch, t1: Epoch,
                         cfg: IntegratorConfig, model: DynamicsModel,
                         max_step_tu: float | None = None) -> Trajectory:
    """Propagate and keep every accepted step, with accelerations."""
    sol = _integrate(x0.as_array(), t0, t1, cfg, model, with_stm=False,
                     max_step_tu=max_step_tu)
    tu = model.scales.tu
    states = sol.y.T.copy()
    accels = np.empty((states.shape[0], 3))
    for i, (t, y) in enumerate(zip(sol.t, states)):
        accels[i] = rhs_state(t, y, model.pack)[3:]
    return Trajectory(epochs=sol.t * tu, states=states, accelerations=accels)


def apply_impulse(x: StateVector, dv: np.ndarray) -> StateVector:
    """Add an impulsive velocity change; position is untouched."""
    dv = np.asarray(dv, dtype=float)
    if not np.all(np.isfinite(dv)):
        raise ValueError("impulse must be finite")
    return StateVector(r=x.r.copy(), v=x.v + dv)


def _wrap_angle(x: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(x + math.pi, _TWO_PI)
    if w <= 0.0:
        w += _TWO_PI
    return w - math.pi


def _event_function(spec: EventSpec):
    if spec.kind == TRUE_ANOMALY:
        target = spec.target_angle

        def g(t, y):
            theta = osculating_true_anomaly(StateVector.from_array(y[:6]))
            return _wrap_angle(theta - target)

        direction = 1.0 if spec.direction == "increasing" else 0.0
        tol = 1e-9
    else:
        # Radial rate crosses zero at apses: downward at apolune (r maximal),
        # upward at perilune.
        def g(t, y):
            rn = math.sqrt(y[0] ** 2 + y[1] ** 2 + y[2] ** 2)
            return (y[0] * y[3] + y[1] * y[4] + y[2] * y[5]) / rn

        direction = -1.0 if spec.kind == APOLUNE else 1.0
        if spec.direction == "any":
            direction = 0.0
        tol = 1e-9
    return g, direction, tol


def find_event(x0: StateVector, t0: Epoch, spec: EventSpec,
               search_horizon: float, cfg: IntegratorConfig,
               model: DynamicsModel) -> EventResult:
    """Earliest event crossing in (t0, t0 + search_horizon].

    Returns a not-found result carrying the state at the horizon when no
    crossing exists in the window. A crossing exactly at t0 is skipped; the
    next one is reported.
    """
    if search_horizon <= 0.0:
        raise ValueError("search_horizon must be positive")
    tu = model.scales.tu
    g, direction, g_tol = _event_function(spec)

    t_cur = float(t0)
    x_cur = x0
    t_end = float(t0) + float(search_horizon)

    # Step off an exact crossing at the start so the open-interval contract
    # holds (event refinement from a previous search lands exactly on zero).
    nudge = 1e-7 * tu
    attempts = 0
    while abs(g(0.0, x_cur.as_array())) < g_tol and attempts < 8:
        t_next = min(t_cur + nudge, t_end)
        if t_next == t_cur:
            break
        x_cur = propagate(x_cur, t_cur, t_next, cfg, model)
        t_cur = t_next
        nudge *= 4.0
        attempts += 1

    event_cap = min(cfg.max_step, max((t_end - t_cur) / tu / 8.0, 1e-6), 0.05)
    for _ in range(8):
        if t_cur >= t_end:
            break
        ev = lambda t, y: g(t, y)
        ev.terminal = True
        ev.direction = direction
        sol = _integrate(x_cur.as_array(), t_cur, t_end, cfg, model,
                         with_stm=False, events=[ev], max_step_tu=event_cap)
        if sol.status != 1:
            return EventResult(found=False, epoch=float(sol.t[-1]) * tu,
                               state=StateVector.from_array(sol.y[:, -1]))
        t_ev = float(sol.t_events[0][0]) * tu
        y_ev = sol.y_events[0][0]
        if abs(g(0.0, y_ev)) < 1e-6:
            return EventResult(found=True, epoch=t_ev,
                               state=StateVector.from_array(y_ev))
        # Spurious sign change at the angle wrap seam; restart just past it.
        t_cur = t_ev + nudge
        x_cur = propagate(StateVector.from_array(y_ev), t_ev, t_cur, cfg, model)
    return EventResult(found=False, epoch=t_cur, state=x_cur)


def propagate_controlled(x0: StateVector, t0: Epoch, t_end: Epoch,
                         maneuvers: list[ImpulsiveManeuver],
                         cfg: IntegratorConfig,
                         model: DynamicsModel) -> StateVector:
    """Piecewise propagation applying each impulse at its epoch.

    Maneuver epochs must be strictly increasing within [t0, t_end); an
    impulse exactly at t0 is applied before the first coast.
    """
    epochs = [m.epoch for m in maneuvers]
    if any(e2 <= e1 for e1, e2 in zip(epochs, epochs[1:])):
        raise ValueError("maneuver epochs must be strictly increasing")
    if epochs and (epochs[0] < t0 or epochs[-1] >= t_end):
        raise ValueError("maneuver epochs must lie in [t0, t_end)")
    x = x0
    t_cur = float(t0)
    for m in maneuvers:
        if m.epoch > t_cur:
            x = propagate(x, t_cur, m.epoch, cfg, model)
            t_cur = float(m.epoch)
        x = apply_impulse(x, m.dv)
    return propagate(x, t_cur, t_end, cfg, model)

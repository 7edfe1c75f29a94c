"""Extended Kalman filter for Moon-relative orbit determination.

Range and range-rate measurements relative to the Moon's center, unbiased
random-walk process noise, Joseph-form updates, and covariance inflation at
commanded impulses. The filter state is canonical; measurement samples carry
km and km/s at the API boundary and are scaled on entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dynamics import DynamicsModel
from .propagation import IntegratorConfig, propagate_with_stm
from .state import Epoch, StateVector
from .units import CanonicalScales


class FilterDivergenceError(RuntimeError):
    """Innovation covariance lost positive definiteness."""


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def check_covariance(p: np.ndarray, label: str = "covariance"):
    """Symmetry to 1e-12 relative and eigenvalues above -1e-12 * trace."""
    scale = max(np.abs(p).max(), 1e-300)
    if np.abs(p - p.T).max() > 1e-12 * scale:
        raise ValueError(f"{label} is not symmetric")
    min_eig = float(np.linalg.eigvalsh(_symmetrize(p)).min())
    if min_eig < -1e-12 * max(np.trace(p), 1e-300):
        raise ValueError(f"{label} lost positive semidefiniteness")


@dataclass(frozen=True)
class FilterEstimate:
    """State estimate and covariance (canonical units) at an epoch."""

    x_hat: StateVector
    p: np.ndarray
    epoch: Epoch

    def __post_init__(self):
        p = _symmetrize(np.asarray(self.p, dtype=float))
        if p.shape != (6, 6):
            raise ValueError("covariance must be 6x6")
        object.__setattr__(self, "p", p)

    def sigmas(self) -> np.ndarray:
        """Per-axis standard deviations from the covariance diagonal."""
        return np.sqrt(np.clip(np.diag(self.p), 0.0, None))


@dataclass(frozen=True)
class MeasurementSample:
    """One range/range-rate pair (km, km/s) with its diagonal covariance."""

    epoch: Epoch
    range_km: float
    range_rate_kms: float
    sigma_range_km: float
    sigma_range_rate_kms: float

    def __post_init__(self):
        if self.range_km <= 0.0:
            raise ValueError("range must be positive")
        if self.sigma_range_km <= 0.0 or self.sigma_range_rate_kms <= 0.0:
            raise ValueError("measurement sigmas must be positive")


@dataclass(frozen=True)
class ProcessNoiseConfig:
    """Intensity of the unbiased random-walk acceleration noise (canonical)."""

    sigma_p: float = 5e-5

    def __post_init__(self):
        if self.sigma_p < 0.0:
            raise ValueError("sigma_p must be non-negative")


@dataclass(frozen=True)
class TrackingSchedule:
    """Ground-tracking cadence tied to the maneuver epochs (hours)."""

    window_duration_h: float = 1.0
    post_maneuver_offset_h: float = 12.0
    pre_maneuver_offsets_h: tuple = (72.0, 48.0, 7.0)
    n_meas_per_window: int = 10

    def __post_init__(self):
        if self.window_duration_h <= 0.0 or self.post_maneuver_offset_h <= 0.0:
            raise ValueError("window duration and offsets must be positive")
        if any(o <= 0.0 for o in self.pre_maneuver_offsets_h):
            raise ValueError("pre-maneuver offsets must be positive")
        if self.n_meas_per_window < 1:
            raise ValueError("need at least one measurement per window")
        object.__setattr__(self, "pre_maneuver_offsets_h",
                           tuple(self.pre_maneuver_offsets_h))


@dataclass(frozen=True)
class TrackingWindow:
    start: Epoch
    end: Epoch
    n_meas: int
    merged: bool = False

    def measurement_epochs(self) -> np.ndarray:
        if self.n_meas == 1:
            return np.array([0.5 * (self.start + self.end)])
        return np.linspace(self.start, self.end, self.n_meas)


def process_noise(dt: float, noise: ProcessNoiseConfig,
                  scales: CanonicalScales) -> np.ndarray:
    """Random-walk process noise over a gap of ``dt`` seconds (canonical)."""
    if dt < 0.0:
        raise ValueError("dt must be non-negative")
    h = dt / scales.tu
    q = noise.sigma_p**2
    out = np.zeros((6, 6))
    out[:3, :3] = (q * h**3 / 3.0) * np.eye(3)
    out[:3, 3:] = (q * h**2 / 2.0) * np.eye(3)
    out[3:, :3] = out[:3, 3:]
    out[3:, 3:] = (q * h) * np.eye(3)
    return out


def measurement_model(x: StateVector) -> tuple[np.ndarray, np.ndarray]:
    """Range/range-rate prediction h(x) and its 2x6 partials (canonical)."""
    rn = float(np.linalg.norm(x.r))
    if rn == 0.0:
        raise ValueError("measurement model singular at r = 0")
    rate = float(x.r @ x.v) / rn
    h = np.array([rn, rate])
    jac = np.zeros((2, 6))
    jac[0, :3] = x.r / rn
    jac[1, :3] = x.v / rn - x.r * rate / rn**2
    jac[1, 3:] = x.r / rn
    return h, jac


def ekf_predict(est: FilterEstimate, t_to: Epoch, cfg: IntegratorConfig,
                model: DynamicsModel,
                noise: ProcessNoiseConfig) -> FilterEstimate:
    """Propagate the estimate and map the covariance through the STM."""
    if t_to < est.epoch:
        raise ValueError("prediction must move forward in time")
    if t_to == est.epoch:
        return est
    x_new, phi = propagate_with_stm(est.x_hat, est.epoch, t_to, cfg, model)
    q = process_noise(t_to - est.epoch, noise, model.scales)
    p_new = _symmetrize(phi.matrix @ est.p @ phi.matrix.T + q)
    return FilterEstimate(x_hat=x_new, p=p_new, epoch=t_to)


def _measurement_to_canonical(y: MeasurementSample, scales: CanonicalScales):
    z = np.array([y.range_km / scales.lu, y.range_rate_kms / scales.vu])
    r_cov = np.diag([(y.sigma_range_km / scales.lu) ** 2,
                     (y.sigma_range_rate_kms / scales.vu) ** 2])
    return z, r_cov


def ekf_update(est: FilterEstimate, y: MeasurementSample,
               scales: CanonicalScales) -> FilterEstimate:
    """Joseph-form measurement update at the estimate's epoch."""
    if y.epoch != est.epoch:
        raise ValueError("measurement epoch must match the estimate epoch")
    z, r_cov = _measurement_to_canonical(y, scales)
    h, jac = measurement_model(est.x_hat)
    s = _symmetrize(jac @ est.p @ jac.T + r_cov)
    try:
        factor = scipy.linalg.cho_factor(s)
    except np.linalg.LinAlgError as exc:
        raise FilterDivergenceError(
            "innovation covariance not positive definite") from exc
    gain = scipy.linalg.cho_solve(factor, jac @ est.p).T
    innovation = z - h
    joseph = np.eye(6) - gain @ jac
    p_new = _symmetrize(joseph @ est.p @ joseph.T + gain @ r_cov @ gain.T)
    x = est.x_hat.as_array() + gain @ innovation
    return FilterEstimate(x_hat=StateVector.from_array(x), p=p_new,
                          epoch=est.epoch)


def apply_maneuver_to_estimate(est: FilterEstimate, dv_hat: np.ndarray,
                               exec_sigma_abs: float,
                               exec_sigma_rel: float) -> FilterEstimate:
    """Fold a commanded impulse and its execution uncertainty into the filter.

    All quantities canonical; the velocity covariance block grows by
    (sigma_abs + sigma_rel * |dv|)^2 per axis.
    """
    dv_hat = np.asarray(dv_hat, dtype=float)
    if not np.all(np.isfinite(dv_hat)):
        raise ValueError("impulse must be finite")
    x = est.x_hat.as_array()
    x[3:] += dv_hat
    sigma = exec_sigma_abs + exec_sigma_rel * float(np.linalg.norm(dv_hat))
    p_new = est.p.copy()
    p_new[3:, 3:] += sigma**2 * np.eye(3)
    return FilterEstimate(x_hat=StateVector.from_array(x), p=p_new,
                          epoch=est.epoch)


def tracking_windows(t_maneuver_prev: Epoch, t_maneuver_next: Epoch,
                     sched: TrackingSchedule) -> list[TrackingWindow]:
    """Tracking windows between two maneuvers, clipped and merged in order.

    One window opens a fixed offset after the previous maneuver; one per
    configured offset closes ahead of the next. Windows extending outside
    (t_prev, t_next) are clipped; overlapping windows merge and are flagged.
    """
    if t_maneuver_next <= t_maneuver_prev:
        raise ValueError("maneuver epochs must be ordered")
    hours = 3600.0
    duration = sched.window_duration_h * hours
    raw = [(t_maneuver_prev + sched.post_maneuver_offset_h * hours)]
    raw += [t_maneuver_next - off * hours for off in sched.pre_maneuver_offsets_h]
    clipped = []
    for start in sorted(raw):
        end = start + duration
        start = max(start, t_maneuver_prev)
        end = min(end, t_maneuver_next)
        if end <= start:
            continue
        clipped.append([start, end, sched.n_meas_per_window, False])
    merged: list[list] = []
    for win in clipped:
        if merged and win[0] <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], win[1])
            merged[-1][2] += win[2]
            merged[-1][3] = True
        else:
            merged.append(win)
    return [TrackingWindow(start=w[0], end=w[1], n_meas=w[2], merged=w[3])
            for w in merged]

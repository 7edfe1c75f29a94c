"""Closed-loop truth simulation, run metrics, and campaign statistics.

One revolution of the loop: decide (trigger) and plan (cone-program MPC) at
the maneuver anomaly using only the filter estimate, corrupt and execute the
first planned impulse on the truth, then sweep the revolution applying
desaturation impulses at their anomaly stations and processing tracking-
window measurements until the next maneuver-anomaly crossing. Everything is
reproducible from a single seed, including under a process pool.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baseline import BaselineOrbit, apsis_epochs, reference_state
from .dynamics import DynamicsModel, SpacecraftParams
from .ephem import em_rotating_frame
from .errormodels import (
    ErrorModelConfig,
    corrupt_maneuver,
    desaturation_impulse,
    sample_srp_dispersion,
)
from .navigation import (
    FilterEstimate,
    MeasurementSample,
    ProcessNoiseConfig,
    TrackingSchedule,
    apply_maneuver_to_estimate,
    ekf_predict,
    ekf_update,
    measurement_model,
    tracking_windows,
)
from .propagation import (
    APOLUNE,
    PERILUNE,
    TRUE_ANOMALY,
    EventSpec,
    IntegratorConfig,
    PropagationError,
    apply_impulse,
    find_event,
    propagate,
)
from .skmpc import HorizonError, SkmpcConfig, check_trigger, sequential_skmpc
from .state import Epoch, StateVector

TWO_PI = 2.0 * math.pi
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a closed-loop run needs besides the reference orbit."""

    n_revolutions: int
    rng_seed: int
    skmpc: SkmpcConfig = field(default_factory=SkmpcConfig)
    tracking: TrackingSchedule = field(default_factory=TrackingSchedule)
    errors: ErrorModelConfig = field(default_factory=ErrorModelConfig)
    process_noise: ProcessNoiseConfig = field(default_factory=ProcessNoiseConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)

    def __post_init__(self):
        if self.n_revolutions < 1:
            raise ValueError("need at least one revolution")


@dataclass
class ManeuverRecord:
    revolution: int
    epoch: Epoch
    trigger_skip: bool
    commanded: np.ndarray          # canonical, inertial
    executed: np.ndarray
    truth: np.ndarray              # canonical state at decision epoch
    estimate: np.ndarray
    sigma: np.ndarray              # filter-reported per-axis standard deviations
    drift_residual_r_km: float
    drift_residual_v_ms: float
    iterations: int = 0
    converged: bool = True
    failure: str | None = None
    target_epoch: Epoch = 0.0


@dataclass
class DesatRecord:
    revolution: int
    epoch: Epoch
    dv: np.ndarray


@dataclass
class ApsisRecord:
    kind: str
    revolution: int
    epoch: Epoch
    truth: np.ndarray


@dataclass
class FilterRecord:
    epoch: Epoch
    truth: np.ndarray
    estimate: np.ndarray
    sigma: np.ndarray


@dataclass
class RunHistory:
    maneuvers: list[ManeuverRecord] = field(default_factory=list)
    desats: list[DesatRecord] = field(default_factory=list)
    apsides: list[ApsisRecord] = field(default_factory=list)
    filter_history: list[FilterRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    aborted: bool = False
    abort_reason: str | None = None

    def perilune_passes(self) -> list[ApsisRecord]:
        return [a for a in self.apsides if a.kind == PERILUNE]

    def apolune_passes(self) -> list[ApsisRecord]:
        return [a for a in self.apsides if a.kind == APOLUNE]


def em_difference(t: Epoch, delta: np.ndarray, model: DynamicsModel) -> np.ndarray:
    """A canonical state difference resolved in the rotating frame at t."""
    ft = em_rotating_frame(t, model.ephemeris)
    m = ft.state_matrix()
    m[3:, :3] *= model.scales.tu
    return m @ delta


def em_state(t: Epoch, x: np.ndarray, model: DynamicsModel) -> np.ndarray:
    """Absolute canonical state resolved in the rotating frame at t."""
    return em_difference(t, x, model)


class _ClosedLoopRun:
    """Mutable state of one closed-loop sample."""

    def __init__(self, scn: ScenarioConfig, baseline: BaselineOrbit,
                 model: DynamicsModel, rng: np.random.Generator):
        self.scn = scn
        self.baseline = baseline
        self.model = model
        self.rng = rng
        self.history = RunHistory(metadata={
            "n_revolutions": scn.n_revolutions,
            "rng_seed": scn.rng_seed,
            "schema_version": SCHEMA_VERSION,
        })
        scales = model.scales
        err = scn.errors
        self.sigma_exec_abs = (err.dv_sigma_abs_mms / 3.0) * 1e-6 / scales.vu
        self.sigma_exec_rel = err.dv_sigma_rel / 3.0
        self.sigma_range_km = err.range_sigma_m / 3.0 * 1e-3
        self.sigma_rate_kms = err.range_rate_sigma_mms / 3.0 * 1e-6
        self.period = baseline.mean_period()

        # truth force model carries the dispersed SRP properties
        d_am, d_cr = sample_srp_dispersion(err, self.rng)
        self.history.metadata["srp_dispersion"] = [d_am, d_cr]
        nominal = model.spacecraft
        self.truth_model = model.with_spacecraft(SpacecraftParams(
            area_to_mass=nominal.area_to_mass * (1.0 + d_am),
            cr=nominal.cr * (1.0 + d_cr)))

        # revolution agenda: relative anomaly stations between maneuvers
        theta_man = scn.skmpc.theta_man
        stations: dict[float, dict] = {}

        def add_station(theta_abs, action):
            rel = (theta_abs - theta_man) % TWO_PI
            if rel < 1e-12:
                rel = TWO_PI
            key = round(rel, 12)
            entry = stations.setdefault(
                key, {"theta": theta_abs % TWO_PI, "desat": False, "apsis": None})
            if action == "desat":
                entry["desat"] = True
            else:
                entry["apsis"] = action

        for deg in err.desat_anomalies_deg:
            add_station(math.radians(deg), "desat")
        add_station(0.0, PERILUNE)
        add_station(math.pi, APOLUNE)
        self.stations = [stations[k] for k in sorted(stations)]

    # -- initialization -------------------------------------------------

    def initialize(self) -> Epoch:
        """Place truth on the reference at the first maneuver-anomaly crossing."""
        scn, model = self.scn, self.model
        b = self.baseline
        t_from = float(b.apolune_epochs[0])
        res = find_event(reference_state(b, t_from), t_from,
                         EventSpec(kind=TRUE_ANOMALY,
                                   target_angle=scn.skmpc.theta_man),
                         1.5 * self.period, scn.integrator, model)
        if not res.found:
            raise RuntimeError("reference orbit has no maneuver-anomaly crossing")
        t0 = res.epoch
        self.truth = res.state

        err = scn.errors
        sig_r = (err.init_pos_sigma_km / 3.0) / model.scales.lu
        sig_v = (err.init_vel_sigma_mms / 3.0) * 1e-6 / model.scales.vu
        p0 = np.diag([sig_r**2] * 3 + [sig_v**2] * 3)
        draw = self.rng.standard_normal(6)
        x_hat = self.truth.as_array() + draw * np.sqrt(np.diag(p0))
        self.estimate = FilterEstimate(x_hat=StateVector.from_array(x_hat),
                                       p=p0, epoch=t0)
        return t0

    # -- maneuver decision -----------------------------------------------

    def maneuver_decision(self, revolution: int, t0: Epoch):
        scn, model = self.scn, self.model
        est = self.estimate
        record = ManeuverRecord(
            revolution=revolution, epoch=t0, trigger_skip=False,
            commanded=np.zeros(3), executed=np.zeros(3),
            truth=self.truth.as_array().copy(),
            estimate=est.x_hat.as_array().copy(),
            sigma=est.sigmas(), drift_residual_r_km=float("nan"),
            drift_residual_v_ms=float("nan"))

        apolunes = apsis_epochs(self.baseline, APOLUNE,
                                (t0, self.baseline.span[1]))
        apolunes = apolunes[apolunes > t0]
        if apolunes.size < scn.skmpc.n_target_revs:
            raise HorizonError("reference orbit too short for the trigger horizon")
        t_target = float(apolunes[scn.skmpc.n_target_revs - 1])

        drift = propagate(est.x_hat, t0, t_target, scn.integrator, model)
        drift_em = em_state(t_target, drift.as_array(), model)
        ref_em = em_state(t_target,
                          reference_state(self.baseline, t_target).as_array(),
                          model)
        record.drift_residual_r_km = float(
            np.linalg.norm(drift_em[:3] - ref_em[:3]) * model.scales.lu)
        record.drift_residual_v_ms = float(
            np.linalg.norm(drift_em[3:] - ref_em[3:]) * model.scales.vu * 1e3)
        skip = check_trigger(drift_em, ref_em, scn.skmpc, model)
        record.trigger_skip = skip
        record.target_epoch = t_target

        if not skip:
            plan = sequential_skmpc(t0, est.x_hat, self.baseline, scn.skmpc,
                                    scn.integrator, model)
            record.iterations = plan.iterations_used
            record.converged = plan.converged
            record.failure = plan.failure
            record.target_epoch = plan.target_epoch
            if plan.failure is None:
                commanded = plan.first_control
                executed = corrupt_maneuver(commanded, scn.errors, self.rng,
                                            model.scales)
                self.truth = apply_impulse(self.truth, executed)
                self.estimate = apply_maneuver_to_estimate(
                    est, commanded, self.sigma_exec_abs, self.sigma_exec_rel)
                record.commanded = commanded.copy()
                record.executed = executed.copy()
        self.history.maneuvers.append(record)

    # -- measurement handling ----------------------------------------------

    def process_measurement(self, epoch: Epoch):
        model = self.model
        self.estimate = ekf_predict(self.estimate, epoch, self.scn.integrator,
                                    model, self.scn.process_noise)
        h_true, _ = measurement_model(self.truth)
        noise_r = self.rng.normal(0.0, self.sigma_range_km) if self.sigma_range_km else 0.0
        noise_v = self.rng.normal(0.0, self.sigma_rate_kms) if self.sigma_rate_kms else 0.0
        sample = MeasurementSample(
            epoch=epoch,
            range_km=h_true[0] * model.scales.lu + noise_r,
            range_rate_kms=h_true[1] * model.scales.vu + noise_v,
            sigma_range_km=max(self.sigma_range_km, 1e-12),
            sigma_range_rate_kms=max(self.sigma_rate_kms, 1e-15),
        )
        self.estimate = ekf_update(self.estimate, sample, model.scales)
        self.history.filter_history.append(FilterRecord(
            epoch=epoch, truth=self.truth.as_array().copy(),
            estimate=self.estimate.x_hat.as_array().copy(),
            sigma=self.estimate.sigmas()))

    # -- one revolution -----------------------------------------------------

    def sweep_revolution(self, revolution: int, t0: Epoch) -> Epoch:
        """Advance truth and filter from one maneuver crossing to the next."""
        scn, model = self.scn, self.model
        # predict the next maneuver epoch from the estimate, starting the
        # search half a revolution out (the anomaly is at the station now)
        t_half = t0 + 0.5 * self.period
        x_half = propagate(self.estimate.x_hat, t0, t_half, scn.integrator, model)
        pred = find_event(x_half, t_half,
                          EventSpec(kind=TRUE_ANOMALY,
                                    target_angle=scn.skmpc.theta_man),
                          self.period, scn.integrator, model)
        t_next_pred = pred.epoch if pred.found else t0 + self.period
        windows = tracking_windows(t0, t_next_pred, scn.tracking)
        meas_epochs = [float(t) for w in windows for t in w.measurement_epochs()]

        t_cur = t0
        meas_i = 0
        targets = list(self.stations) + [
            {"theta": scn.skmpc.theta_man, "desat": False, "apsis": None,
             "maneuver": True}]
        for station in targets:
            spec = EventSpec(kind=TRUE_ANOMALY, target_angle=station["theta"])
            while True:
                horizon_end = (meas_epochs[meas_i] if meas_i < len(meas_epochs)
                               else t_cur + 2.5 * self.period)
                res = find_event(self.truth, t_cur, spec,
                                 horizon_end - t_cur, scn.integrator,
                                 self.truth_model)
                if res.found:
                    t_cur = res.epoch
                    self.truth = res.state
                    break
                if meas_i >= len(meas_epochs):
                    raise RuntimeError(
                        f"anomaly station {station['theta']:.3f} not reached")
                t_cur = horizon_end
                self.truth = res.state
                self.process_measurement(t_cur)
                meas_i += 1
            if station.get("maneuver"):
                break
            if station["apsis"] is not None:
                self.history.apsides.append(ApsisRecord(
                    kind=station["apsis"], revolution=revolution, epoch=t_cur,
                    truth=self.truth.as_array().copy()))
            if station["desat"]:
                dv = desaturation_impulse(scn.errors, self.rng, model.scales)
                self.truth = apply_impulse(self.truth, dv)
                self.history.desats.append(DesatRecord(
                    revolution=revolution, epoch=t_cur, dv=dv))
        self.estimate = ekf_predict(self.estimate, t_cur, scn.integrator,
                                    model, scn.process_noise)
        return t_cur

    def run(self) -> RunHistory:
        try:
            t_cur = self.initialize()
            for rev in range(1, self.scn.n_revolutions + 1):
                self.maneuver_decision(rev, t_cur)
                t_cur = self.sweep_revolution(rev, t_cur)
        except (PropagationError, HorizonError, RuntimeError) as exc:
            self.history.aborted = True
            self.history.abort_reason = f"{type(exc).__name__}: {exc}"
        return self.history


def run_closed_loop(scn: ScenarioConfig, baseline: BaselineOrbit,
                    model: DynamicsModel,
                    rng: np.random.Generator | None = None) -> RunHistory:
    """One closed-loop sample; deterministic for a fixed seed."""
    span_revs = baseline.apolune_epochs.size
    if span_revs < scn.n_revolutions + scn.skmpc.n_target_revs:
        raise ValueError(
            "reference orbit must cover n_revolutions plus the target horizon")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(scn.rng_seed))
    loop = _ClosedLoopRun(scn, baseline, model, rng)
    return loop.run()


# --- metrics ------------------------------------------------------------------


@dataclass
class PeriluneDeviation:
    truth_epoch: Epoch
    baseline_epoch: Epoch
    epoch_dev_minutes: float
    pos_dev_km: np.ndarray     # rotating-frame components
    vel_dev_ms: np.ndarray


@dataclass
class RunMetrics:
    revolutions: int
    executed_count: int
    commanded_cms: np.ndarray           # per revolution, command magnitude
    cumulative_cms: np.ndarray
    maneuver_epochs: np.ndarray
    per_maneuver_mean_executed_cms: float
    per_maneuver_mean_all_cms: float
    yearly_equivalent_cms: float
    linear_fit_r2: float
    perilune: list[PeriluneDeviation]
    premaneuver_errors_em: np.ndarray   # (n, 6) canonical, after burn-in
    premaneuver_pos_3sigma_km: np.ndarray
    premaneuver_vel_3sigma_cms: np.ndarray
    consistency_fraction: float
    aborted: bool

    def to_dict(self) -> dict:
        worst_pos = max((float(np.linalg.norm(p.pos_dev_km)) for p in self.perilune),
                        default=0.0)
        worst_vel = max((float(np.linalg.norm(p.vel_dev_ms)) for p in self.perilune),
                        default=0.0)
        worst_epoch = max((abs(p.epoch_dev_minutes) for p in self.perilune),
                          default=0.0)
        return {
            "schema_version": SCHEMA_VERSION,
            "revolutions": int(self.revolutions),
            "executed_maneuvers": int(self.executed_count),
            "total_dv_cms": float(self.cumulative_cms[-1]) if self.cumulative_cms.size else 0.0,
            "per_maneuver_mean_executed_cms": float(self.per_maneuver_mean_executed_cms),
            "per_maneuver_mean_all_cms": float(self.per_maneuver_mean_all_cms),
            "yearly_equivalent_cms": float(self.yearly_equivalent_cms),
            "cumulative_cost_r2": float(self.linear_fit_r2),
            "perilune_worst_pos_km": float(worst_pos),
            "perilune_worst_vel_ms": float(worst_vel),
            "perilune_worst_epoch_minutes": float(worst_epoch),
            "premaneuver_pos_3sigma_km": [float(v) for v in self.premaneuver_pos_3sigma_km],
            "premaneuver_vel_3sigma_cms": [float(v) for v in self.premaneuver_vel_3sigma_cms],
            "filter_consistency_fraction": float(self.consistency_fraction),
            "aborted": bool(self.aborted),
        }


def compute_metrics(history: RunHistory, baseline: BaselineOrbit,
                    model: DynamicsModel, burn_in_revs: int = 2) -> RunMetrics:
    """Cost, tracking, and estimation statistics for one run."""
    scales = model.scales
    cms = scales.vu * 1e5   # canonical velocity -> cm/s

    commanded = np.array([np.linalg.norm(m.commanded) * cms
                          for m in history.maneuvers])
    epochs = np.array([m.epoch for m in history.maneuvers])
    executed_mask = np.array([
        (not m.trigger_skip) and m.failure is None
        and np.linalg.norm(m.commanded) > 0.0 for m in history.maneuvers])
    cumulative = np.cumsum(commanded)

    executed_mean = float(commanded[executed_mask].mean()) if executed_mask.any() else 0.0
    all_mean = float(commanded.mean()) if commanded.size else 0.0

    if epochs.size >= 2 and epochs[-1] > epochs[0]:
        span_s = epochs[-1] - epochs[0]
        yearly = float(cumulative[-1] * (365.25 * 86400.0) / span_s)
    else:
        yearly = 0.0

    if epochs.size >= 3 and cumulative[-1] > 0.0:
        coeffs = np.polyfit(epochs, cumulative, 1)
        fit = np.polyval(coeffs, epochs)
        ss_res = float(np.sum((cumulative - fit) ** 2))
        ss_tot = float(np.sum((cumulative - cumulative.mean()) ** 2))
        r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0

    perilune = []
    table = baseline.perilune_epochs
    half_period = 0.5 * baseline.mean_period()
    for rec in history.perilune_passes():
        idx = int(np.argmin(np.abs(table - rec.epoch)))
        gap = table[idx] - rec.epoch
        if abs(gap) > half_period:
            continue
        truth_em = em_state(rec.epoch, rec.truth, model)
        ref_em = em_state(float(table[idx]),
                          reference_state(baseline, float(table[idx])).as_array(),
                          model)
        perilune.append(PeriluneDeviation(
            truth_epoch=rec.epoch,
            baseline_epoch=float(table[idx]),
            epoch_dev_minutes=float(-gap / 60.0),
            pos_dev_km=(truth_em[:3] - ref_em[:3]) * scales.lu,
            vel_dev_ms=(truth_em[3:] - ref_em[3:]) * scales.vu * 1e3,
        ))

    pre_errors = []
    for m in history.maneuvers:
        if m.revolution <= burn_in_revs:
            continue
        pre_errors.append(em_difference(m.epoch, m.estimate - m.truth, model))
    pre_errors = np.asarray(pre_errors) if pre_errors else np.empty((0, 6))
    if pre_errors.shape[0] >= 2:
        pos_3s = 3.0 * pre_errors[:, :3].std(axis=0) * scales.lu
        vel_3s = 3.0 * pre_errors[:, 3:].std(axis=0) * cms
    else:
        pos_3s = np.full(3, float("nan"))
        vel_3s = np.full(3, float("nan"))

    burn_in_epoch = (history.maneuvers[min(burn_in_revs, len(history.maneuvers) - 1)].epoch
                     if history.maneuvers else 0.0)
    inside = 0
    total = 0
    for rec in history.filter_history:
        if rec.epoch < burn_in_epoch:
            continue
        err = np.abs(rec.estimate - rec.truth)
        inside += int(np.sum(err <= 3.0 * rec.sigma))
        total += 6
    consistency = inside / total if total else float("nan")

    return RunMetrics(
        revolutions=len(history.maneuvers),
        executed_count=int(executed_mask.sum()),
        commanded_cms=commanded,
        cumulative_cms=cumulative,
        maneuver_epochs=epochs,
        per_maneuver_mean_executed_cms=executed_mean,
        per_maneuver_mean_all_cms=all_mean,
        yearly_equivalent_cms=yearly,
        linear_fit_r2=r2,
        perilune=perilune,
        premaneuver_errors_em=pre_errors,
        premaneuver_pos_3sigma_km=pos_3s,
        premaneuver_vel_3sigma_cms=vel_3s,
        consistency_fraction=consistency,
        aborted=history.aborted,
    )


# --- Monte Carlo ------------------------------------------------------------------


@dataclass
class MonteCarloSummary:
    n_samples: int
    aborted_samples: int
    per_maneuver_mean_cms: float
    per_maneuver_mean_all_cms: float
    yearly_mean_cms: float
    yearly_std_cms: float
    yearly_p95_cms: float
    perilune_worst_pos_km: float
    perilune_worst_vel_ms: float
    perilune_worst_epoch_minutes: float
    premaneuver_pos_3sigma_km: list
    premaneuver_vel_3sigma_cms: list
    consistency_mean: float
    per_sample: list

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n_samples": self.n_samples,
            "aborted_samples": self.aborted_samples,
            "per_maneuver_mean_cms": self.per_maneuver_mean_cms,
            "per_maneuver_mean_all_cms": self.per_maneuver_mean_all_cms,
            "yearly_mean_cms": self.yearly_mean_cms,
            "yearly_std_cms": self.yearly_std_cms,
            "yearly_p95_cms": self.yearly_p95_cms,
            "perilune_worst_pos_km": self.perilune_worst_pos_km,
            "perilune_worst_vel_ms": self.perilune_worst_vel_ms,
            "perilune_worst_epoch_minutes": self.perilune_worst_epoch_minutes,
            "premaneuver_pos_3sigma_km": self.premaneuver_pos_3sigma_km,
            "premaneuver_vel_3sigma_cms": self.premaneuver_vel_3sigma_cms,
            "filter_consistency_mean": self.consistency_mean,
            "per_sample": self.per_sample,
        }


def _mc_sample(args):
    scn, baseline, model, index, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    history = run_closed_loop(scn, baseline, model, rng=rng)
    metrics = compute_metrics(history, baseline, model)
    return index, metrics


def mc_child_sequences(root_seed: int, n_samples: int) -> list[np.random.SeedSequence]:
    """Independent per-sample seed sequences derived from the root seed."""
    return list(np.random.SeedSequence(root_seed).spawn(n_samples))


def run_monte_carlo(scn: ScenarioConfig, baseline: BaselineOrbit,
                    model: DynamicsModel, n_samples: int,
                    jobs: int = 1) -> MonteCarloSummary:
    """Independent closed-loop samples aggregated into campaign statistics.

    Per-sample seeds spawn from the scenario seed, so results are identical
    at any parallelism level; sample aborts are counted, not fatal.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    children = mc_child_sequences(scn.rng_seed, n_samples)
    tasks = [(scn, baseline, model, i, children[i]) for i in range(n_samples)]
    results: dict[int, RunMetrics] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for index, metrics in pool.map(_mc_sample, tasks):
                results[index] = metrics
    else:
        for task in tasks:
            index, metrics = _mc_sample(task)
            results[index] = metrics

    ordered = [results[i] for i in range(n_samples)]
    good = [m for m in ordered if not m.aborted]
    aborted = n_samples - len(good)
    if not good:
        raise RuntimeError("every sample aborted")

    yearly = np.array([m.yearly_equivalent_cms for m in good])
    exec_means = np.array([m.per_maneuver_mean_executed_cms for m in good])
    all_means = np.array([m.per_maneuver_mean_all_cms for m in good])
    stacks = [m.premaneuver_errors_em for m in good if m.premaneuver_errors_em.size]
    pooled = np.vstack(stacks) if stacks else np.empty((0, 6))
    scales = model.scales
    if pooled.shape[0] >= 2:
        pos_3s = 3.0 * pooled[:, :3].std(axis=0) * scales.lu
        vel_3s = 3.0 * pooled[:, 3:].std(axis=0) * scales.vu * 1e5
    else:
        pos_3s = np.full(3, np.nan)
        vel_3s = np.full(3, np.nan)

    return MonteCarloSummary(
        n_samples=n_samples,
        aborted_samples=aborted,
        per_maneuver_mean_cms=float(exec_means.mean()),
        per_maneuver_mean_all_cms=float(all_means.mean()),
        yearly_mean_cms=float(yearly.mean()),
        yearly_std_cms=float(yearly.std(ddof=1)) if yearly.size > 1 else 0.0,
        yearly_p95_cms=float(np.percentile(yearly, 95)),
        perilune_worst_pos_km=max((m.to_dict()["perilune_worst_pos_km"] for m in good)),
        perilune_worst_vel_ms=max((m.to_dict()["perilune_worst_vel_ms"] for m in good)),
        perilune_worst_epoch_minutes=max((m.to_dict()["perilune_worst_epoch_minutes"] for m in good)),
        premaneuver_pos_3sigma_km=[float(v) for v in pos_3s],
        premaneuver_vel_3sigma_cms=[float(v) for v in vel_3s],
        consistency_mean=float(np.mean([m.consistency_fraction for m in good])),
        per_sample=[m.to_dict() for m in ordered],
    )


# --- serialization -------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: list[list]):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _r(x) -> str:
    """Shortest round-trip decimal form of a scalar."""
    return _r(float(x))


def save_run_history(history: RunHistory, baseline: BaselineOrbit,
                     model: DynamicsModel, out_dir: str | Path) -> RunMetrics:
    """Write the CSV/JSON artifact set for one run; returns its metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scales = model.scales
    metrics = compute_metrics(history, baseline, model)

    rows = []
    for m, cum in zip(history.maneuvers, metrics.cumulative_cms):
        rows.append([
            m.revolution, _r(m.epoch), int(m.trigger_skip),
            *(_r(v) for v in m.commanded),
            *(_r(v) for v in m.executed),
            _r(np.linalg.norm(m.commanded) * scales.vu * 1e5),
            _r(cum), m.iterations, int(m.converged),
            m.failure or "", _r(m.drift_residual_r_km),
            _r(m.drift_residual_v_ms),
        ])
    _write_csv(out / "maneuvers.csv",
               ["revolution", "epoch_s", "trigger_skip",
                "commanded_x", "commanded_y", "commanded_z",
                "executed_x", "executed_y", "executed_z",
                "commanded_cms", "cumulative_cms", "iterations", "converged",
                "failure", "drift_residual_r_km", "drift_residual_v_ms"],
               rows)

    rows = [[_r(p.truth_epoch), _r(p.baseline_epoch),
             _r(p.epoch_dev_minutes),
             *(_r(v) for v in p.pos_dev_km),
             *(_r(v) for v in p.vel_dev_ms),
             _r(float(np.linalg.norm(p.pos_dev_km))),
             _r(float(np.linalg.norm(p.vel_dev_ms)))]
            for p in metrics.perilune]
    _write_csv(out / "perilune_passes.csv",
               ["truth_epoch_s", "baseline_epoch_s", "epoch_dev_minutes",
                "pos_dev_x_km", "pos_dev_y_km", "pos_dev_z_km",
                "vel_dev_x_ms", "vel_dev_y_ms", "vel_dev_z_ms",
                "pos_dev_km", "vel_dev_ms"],
               rows)

    rows = []
    for rec in history.filter_history:
        err = rec.estimate - rec.truth
        rows.append([_r(rec.epoch),
                     *(_r(v) for v in rec.truth),
                     *(_r(v) for v in rec.estimate),
                     *(_r(3.0 * v) for v in rec.sigma),
                     *(_r(v) for v in err)])
    _write_csv(out / "filter_errors.csv",
               ["epoch_s",
                *(f"truth_{a}" for a in "xyzuvw"),
                *(f"estimate_{a}" for a in "xyzuvw"),
                *(f"three_sigma_{a}" for a in "xyzuvw"),
                *(f"error_{a}" for a in "xyzuvw")],
               rows)

    rows = [[d.revolution, _r(d.epoch), *(_r(v) for v in d.dv),
             _r(float(np.linalg.norm(d.dv)) * scales.vu * 1e5)]
            for d in history.desats]
    _write_csv(out / "desaturations.csv",
               ["revolution", "epoch_s", "dv_x", "dv_y", "dv_z", "dv_cms"],
               rows)

    summary = metrics.to_dict()
    summary["abort_reason"] = history.abort_reason
    summary["metadata"] = history.metadata
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return metrics


def save_monte_carlo_summary(summary: MonteCarloSummary, out_dir: str | Path):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "monte_carlo_summary.json").write_text(
        json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")

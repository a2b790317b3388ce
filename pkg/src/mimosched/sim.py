"""Slot-level Monte-Carlo driver for the downlink scheduling experiments.

An :class:`ExperimentConfig` pins everything a run depends on: array and
user-population sizes, SNR grid, scheduling policy, utility target, rate
accounting model, channel family, CSI generation, and the master seed.
``run_experiment`` executes one trial at one SNR and returns a
:class:`RunMetrics`; ``snr_sweep`` farms trials across the SNR grid and
aggregates them.  Every result is a pure function of (config, snr, trial),
so reruns are byte-identical and trials can be farmed to worker processes
without changing any number.

Artifacts (summary CSV, per-run queue traces, JSON report) are written
atomically: content goes to a temp file in the target directory which is
then renamed over the destination, so an interrupted run never leaves a
half-written file behind.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .analysis import (
    BoundReport,
    drift_constant_C,
    erlang_gain_sampler,
    resample_gain_sampler,
    theorem2_bounds,
)
from .channel import (
    CsiModel,
    ScmTrajectory,
    ScmUserParams,
    complex_normal,
)
from .errors import ConfigError
from .phy import (
    IDLE,
    OPTIMISTIC,
    OUTAGE,
    RATE_MODELS,
    SM,
    STC,
    EmpiricalGain,
    ErlangGain,
    check_rate_model,
    realized_rates,
)
from .predictor import RlsConfig, RlsFilterBank, classify_users, grouped_mse
from .scheduler import (
    MismatchedPfsState,
    UtilitySpec,
    mismatched_pfs_slot,
    schedule_slot,
    update_queues,
    virtual_arrivals,
)
from .streams import derive_seed, stream

NEW_PFS = "new-pfs"
NEW_HFS = "new-hfs"
MISMATCHED_PFS = "mismatched-pfs"
POLICIES = (NEW_PFS, NEW_HFS, MISMATCHED_PFS)

RAYLEIGH = "rayleigh"
SCM = "scm"
CHANNEL_KINDS = (RAYLEIGH, SCM)

CSI_FIXED = "models"
CSI_PREDICTOR = "predictor"

# Spatial-multiplexing allocations are nudged below the measured mutual
# information by one part in 1e9 by default.  A codeword pinned exactly at
# the channel's mutual information sits on the decodability boundary and is
# counted as lost under the strict outage rule; backing off by a hair keeps
# the operating point achievable while changing the rate by an invisible
# relative amount.
DEFAULT_SM_BACK_OFF = 1.0 - 1e-9

# Block sizes for pregenerated channel / noise draws.  Fixed constants:
# they are part of the sampling definition, so a given (config, seed)
# always consumes the random streams in the same order.
_CHUNK_RAYLEIGH = 512
_CHUNK_SCM = 128

_MIN_CAL_SLOTS = 1000  # also the empirical gain law's minimum sample count


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScmUserSpec:
    """Fixed per-user geometry for the sum-of-sinusoids channel.

    Ray amplitudes are not part of the config: they are redrawn each trial
    (equal power, uniform phases) so trial averaging covers the amplitude
    ensemble while angles, speed and carrier stay pinned.
    """

    aoas: tuple
    travel_azimuth: float
    speed: float  # m/s
    carrier: float = 2.6e9
    symbol_interval: float = 1.0 / 15000.0
    antenna_spacing_wavelengths: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "aoas", tuple(float(a) for a in self.aoas))
        object.__setattr__(self, "travel_azimuth", float(self.travel_azimuth))
        object.__setattr__(self, "speed", float(self.speed))
        object.__setattr__(self, "carrier", float(self.carrier))
        object.__setattr__(self, "symbol_interval", float(self.symbol_interval))
        if len(self.aoas) < 1:
            raise ConfigError("scm user needs at least one angle of arrival")
        if self.speed < 0:
            raise ConfigError("scm user speed must be non-negative")
        if self.carrier <= 0 or self.symbol_interval <= 0:
            raise ConfigError("carrier and symbol interval must be positive")

    def to_dict(self):
        return {
            "aoas": list(self.aoas),
            "travel_azimuth": self.travel_azimuth,
            "speed": self.speed,
            "carrier": self.carrier,
            "symbol_interval": self.symbol_interval,
            "antenna_spacing_wavelengths": self.antenna_spacing_wavelengths,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            aoas=tuple(d["aoas"]),
            travel_azimuth=d["travel_azimuth"],
            speed=d["speed"],
            carrier=d.get("carrier", 2.6e9),
            symbol_interval=d.get("symbol_interval", 1.0 / 15000.0),
            antenna_spacing_wavelengths=d.get("antenna_spacing_wavelengths", 0.5),
        )


@dataclass(frozen=True)
class ChannelSpec:
    """Channel family: i.i.d. Rayleigh block fading or per-user SCM rays."""

    kind: str = RAYLEIGH
    slot_symbols: int = 1
    scm_users: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "slot_symbols", int(self.slot_symbols))
        object.__setattr__(self, "scm_users", tuple(self.scm_users))
        if self.kind not in CHANNEL_KINDS:
            raise ConfigError(f"unknown channel kind {self.kind!r}")
        if self.slot_symbols < 1:
            raise ConfigError("slot_symbols must be >= 1")
        if self.kind == RAYLEIGH and self.scm_users:
            raise ConfigError("rayleigh channel takes no scm user specs")
        if self.kind == SCM and not self.scm_users:
            raise ConfigError("scm channel needs per-user ray specs")

    @classmethod
    def rayleigh(cls):
        return cls(kind=RAYLEIGH)

    @classmethod
    def scm(cls, users, slot_symbols=20):
        return cls(kind=SCM, slot_symbols=slot_symbols, scm_users=tuple(users))

    def to_dict(self):
        return {
            "kind": self.kind,
            "slot_symbols": self.slot_symbols,
            "scm_users": [u.to_dict() for u in self.scm_users],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            slot_symbols=d.get("slot_symbols", 1),
            scm_users=tuple(ScmUserSpec.from_dict(u) for u in d.get("scm_users", [])),
        )


@dataclass(frozen=True)
class CsiSpec:
    """How the transmitter's channel estimates come to exist.

    ``models`` assigns each user a fixed estimation-quality model (perfect /
    gaussian / unknown) applied to every slot.  ``predictor`` runs a bank of
    adaptive linear predictors on per-slot pilots, classifies users from
    their measured prediction error over a calibration prefix, and then
    feeds the scheduler the predictors' one-slot-ahead forecasts.
    """

    kind: str = CSI_FIXED
    models: tuple = ()
    rls: RlsConfig = field(default_factory=RlsConfig)
    threshold: float | None = None
    pilot_noise_var: float = 0.01
    calibration_slots: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if self.kind not in (CSI_FIXED, CSI_PREDICTOR):
            raise ConfigError(f"unknown CSI spec kind {self.kind!r}")
        if self.kind == CSI_FIXED and not self.models:
            raise ConfigError("fixed CSI needs one model per user")
        if self.kind == CSI_PREDICTOR and self.models:
            raise ConfigError("predictor CSI takes no fixed models")
        if self.threshold is not None and self.threshold <= 0:
            raise ConfigError("classification threshold must be positive")
        if self.pilot_noise_var < 0:
            raise ConfigError("pilot noise variance must be non-negative")
        if self.calibration_slots is not None and self.calibration_slots < _MIN_CAL_SLOTS:
            # the empirical gain laws are built from calibration slots and
            # need a minimum sample count to resolve their upper tail
            raise ConfigError(
                f"calibration_slots must be >= {_MIN_CAL_SLOTS} when given"
            )

    @classmethod
    def from_models(cls, models):
        return cls(kind=CSI_FIXED, models=tuple(models))

    @classmethod
    def predictor(cls, rls=None, threshold=None, pilot_noise_var=0.01,
                  calibration_slots=None):
        return cls(
            kind=CSI_PREDICTOR,
            rls=rls if rls is not None else RlsConfig(),
            threshold=threshold,
            pilot_noise_var=pilot_noise_var,
            calibration_slots=calibration_slots,
        )

    @property
    def effective_threshold(self):
        if self.threshold is not None:
            return self.threshold
        return self.rls.mse_threshold

    def to_dict(self):
        return {
            "kind": self.kind,
            "models": [
                {"kind": m.kind, "sigma2": m.sigma2, "predictable": m.predictable}
                for m in self.models
            ],
            "rls": {
                "order": self.rls.order,
                "forgetting": self.rls.forgetting,
                "init_gain": self.rls.init_gain,
                "horizon": self.rls.horizon,
                "mse_threshold": self.rls.mse_threshold,
                "stats_warmup": self.rls.stats_warmup,
            },
            "threshold": self.threshold,
            "pilot_noise_var": self.pilot_noise_var,
            "calibration_slots": self.calibration_slots,
        }

    @classmethod
    def from_dict(cls, d):
        rls_d = d.get("rls", {})
        return cls(
            kind=d["kind"],
            models=tuple(
                CsiModel(m["kind"], m.get("sigma2", 0.0), m.get("predictable"))
                for m in d.get("models", [])
            ),
            rls=RlsConfig(**rls_d) if rls_d else RlsConfig(),
            threshold=d.get("threshold"),
            pilot_noise_var=d.get("pilot_noise_var", 0.01),
            calibration_slots=d.get("calibration_slots"),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one scheduling experiment.

    ``snr_db`` is the sweep grid; noise power is fixed at one, so transmit
    power at a grid point is ``10**(snr/10)``.  ``policy`` picks the
    scheduler: the two queue-driven policies or the baseline that trusts
    its channel estimates outright.  All randomness derives from ``seed``
    through named streams keyed by (snr, trial), so the channel a given
    trial sees is identical across policies and rate models.
    """

    m_antennas: int = 4
    k_users: int = 8
    snr_db: tuple = (10.0,)
    slots: int = 1000
    policy: str = NEW_PFS
    utility: UtilitySpec = field(default_factory=lambda: UtilitySpec.pfs(100.0, 100.0))
    rate_model: str = OUTAGE
    channel: ChannelSpec = field(default_factory=ChannelSpec.rayleigh)
    csi: CsiSpec = None  # type: ignore[assignment]
    t_c: float = 1000.0
    seed: int = 0
    mc_samples: int = 10000
    trials: int = 1
    sm_back_off: float = DEFAULT_SM_BACK_OFF
    trace_stride: int = 100

    def __post_init__(self):
        object.__setattr__(self, "m_antennas", int(self.m_antennas))
        object.__setattr__(self, "k_users", int(self.k_users))
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        object.__setattr__(self, "slots", int(self.slots))
        object.__setattr__(self, "t_c", float(self.t_c))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "mc_samples", int(self.mc_samples))
        object.__setattr__(self, "trials", int(self.trials))
        object.__setattr__(self, "sm_back_off", float(self.sm_back_off))
        object.__setattr__(self, "trace_stride", int(self.trace_stride))
        if self.csi is None:
            object.__setattr__(
                self, "csi",
                CsiSpec.from_models((CsiModel.perfect(),) * self.k_users),
            )
        if self.m_antennas < 1:
            raise ConfigError("m_antennas must be >= 1")
        if self.k_users < 1:
            raise ConfigError("k_users must be >= 1")
        if not self.snr_db:
            raise ConfigError("snr_db grid must be non-empty")
        if not all(math.isfinite(s) for s in self.snr_db):
            raise ConfigError("snr_db values must be finite")
        if self.slots < 1:
            raise ConfigError("slots must be >= 1")
        if self.policy not in POLICIES:
            raise ConfigError(
                f"policy must be one of {POLICIES}, got {self.policy!r}"
            )
        check_rate_model(self.rate_model)
        if self.policy == NEW_PFS and self.utility.kind != "pfs":
            raise ConfigError("policy new-pfs requires a pfs utility")
        if self.policy == NEW_HFS and self.utility.kind != "hfs":
            raise ConfigError("policy new-hfs requires an hfs utility")
        if self.t_c < 1:
            raise ConfigError("t_c must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not 0.0 < self.sm_back_off <= 1.0:
            raise ConfigError("sm_back_off must lie in (0, 1]")
        if self.trace_stride < 1:
            raise ConfigError("trace_stride must be >= 1")
        # channel / CSI pairing: fixed models go with block fading, the
        # predictor needs a channel with temporal structure to learn from
        if self.csi.kind == CSI_FIXED:
            if self.channel.kind != RAYLEIGH:
                raise ConfigError(
                    "csi.kind 'models' requires channel.kind 'rayleigh'"
                )
            if len(self.csi.models) != self.k_users:
                raise ConfigError(
                    f"csi.models needs one entry per user ({self.k_users}), "
                    f"got {len(self.csi.models)}"
                )
        else:
            if self.channel.kind != SCM:
                raise ConfigError(
                    "csi.kind 'predictor' requires channel.kind 'scm'"
                )
        if self.channel.kind == SCM and len(self.channel.scm_users) != self.k_users:
            raise ConfigError(
                f"channel.scm_users needs one entry per user ({self.k_users}), "
                f"got {len(self.channel.scm_users)}"
            )

    def to_dict(self):
        return {
            "m_antennas": self.m_antennas,
            "k_users": self.k_users,
            "snr_db": list(self.snr_db),
            "slots": self.slots,
            "policy": self.policy,
            "utility": {
                "kind": self.utility.kind,
                "v": self.utility.v,
                "a_max": self.utility.a_max,
            },
            "rate_model": self.rate_model,
            "channel": self.channel.to_dict(),
            "csi": self.csi.to_dict(),
            "t_c": self.t_c,
            "seed": self.seed,
            "mc_samples": self.mc_samples,
            "trials": self.trials,
            "sm_back_off": self.sm_back_off,
            "trace_stride": self.trace_stride,
        }

    @classmethod
    def from_dict(cls, d):
        known = {
            "m_antennas", "k_users", "snr_db", "slots", "policy", "utility",
            "rate_model", "channel", "csi", "t_c", "seed", "mc_samples",
            "trials", "sm_back_off", "trace_stride",
        }
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        kw = dict(d)
        if "utility" in kw:
            u = kw["utility"]
            kw["utility"] = UtilitySpec(kind=u["kind"], v=u["v"], a_max=u["a_max"])
        if "channel" in kw:
            kw["channel"] = ChannelSpec.from_dict(kw["channel"])
        if "csi" in kw:
            kw["csi"] = CsiSpec.from_dict(kw["csi"])
        if "snr_db" in kw:
            kw["snr_db"] = tuple(kw["snr_db"])
        return cls(**kw)

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def snr_to_power(snr_db) -> float:
    """Transmit power at unit noise, P = 10^(snr/10)."""
    return float(10.0 ** (float(snr_db) / 10.0))


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass
class RunMetrics:
    """Everything measured in one trial at one SNR."""

    policy: str
    rate_model: str
    snr_db: float
    trial: int
    seed: int  # derived per-trial seed actually used
    n_slots: int
    classes: np.ndarray  # (K,) bool, users scheduled via the beamformed branch
    ergodic_rates: np.ndarray  # (K,) time-average delivered rate
    admitted_rates: np.ndarray  # (K,) time-average virtual arrivals
    mean_queues: np.ndarray  # (K,) time-average virtual queue length
    final_queues: np.ndarray  # (K,) queue lengths after the last slot
    activity_fractions: np.ndarray  # (K,) fraction of slots each user is served
    sum_rate: float
    sum_log_rate: float  # natural log of per-user averages, summed
    min_rate: float
    mode_fractions: dict  # {"sm": f, "stc": f, "idle": f}, sums to one
    trace_slots: np.ndarray  # (n_pts,) sampled slot indices
    queue_trace: np.ndarray  # (n_pts, K) queue lengths at the sampled slots
    trace_min_avg: np.ndarray  # (n_pts,) running min-average delivered rate
    bound_report: BoundReport | None

    def to_dict(self):
        return {
            "policy": self.policy,
            "rate_model": self.rate_model,
            "snr_db": self.snr_db,
            "trial": self.trial,
            "seed": self.seed,
            "n_slots": self.n_slots,
            "classes": [bool(c) for c in self.classes],
            "ergodic_rates": self.ergodic_rates.tolist(),
            "admitted_rates": self.admitted_rates.tolist(),
            "mean_queues": self.mean_queues.tolist(),
            "final_queues": self.final_queues.tolist(),
            "activity_fractions": self.activity_fractions.tolist(),
            "sum_rate": self.sum_rate,
            "sum_log_rate": self.sum_log_rate,
            "min_rate": self.min_rate,
            "mode_fractions": dict(self.mode_fractions),
            "trace_slots": self.trace_slots.tolist(),
            "queue_trace": self.queue_trace.tolist(),
            "trace_min_avg": self.trace_min_avg.tolist(),
            "bound_report": None if self.bound_report is None
            else self.bound_report.to_dict(),
        }


@dataclass
class AggregateMetrics:
    """Mean and standard error over the trials of one sweep cell."""

    policy: str
    rate_model: str
    snr_db: float
    n_trials: int
    n_slots: int
    predictable_fraction: np.ndarray  # (K,) share of trials in the SM class
    ergodic_rates: np.ndarray
    ergodic_rates_se: np.ndarray
    admitted_rates: np.ndarray
    admitted_rates_se: np.ndarray
    mean_queues: np.ndarray
    mean_queues_se: np.ndarray
    activity_fractions: np.ndarray
    activity_fractions_se: np.ndarray
    sum_rate: float
    sum_rate_se: float
    sum_log_rate: float
    sum_log_rate_se: float
    min_rate: float
    min_rate_se: float
    mode_fractions: dict
    mode_fractions_se: dict
    trace_slots: np.ndarray
    queue_trace: np.ndarray  # pointwise mean over trials
    trace_min_avg: np.ndarray
    trace_min_avg_se: np.ndarray
    bound_reports: list  # per-trial BoundReport or None

    @property
    def bound_holds(self):
        """True iff every trial produced a bound report and all hold."""
        if any(r is None for r in self.bound_reports):
            return None
        return all(r.holds for r in self.bound_reports)

    def summary_row(self, k_users):
        row = {
            "policy": self.policy,
            "rate_model": self.rate_model,
            "snr_db": self.snr_db,
            "trials": self.n_trials,
            "slots": self.n_slots,
            "sum_rate": self.sum_rate,
            "sum_rate_se": self.sum_rate_se,
            "sum_log_rate": self.sum_log_rate,
            "sum_log_rate_se": self.sum_log_rate_se,
            "min_rate": self.min_rate,
            "min_rate_se": self.min_rate_se,
            "sm_fraction": self.mode_fractions[SM],
            "stc_fraction": self.mode_fractions[STC],
            "idle_fraction": self.mode_fractions[IDLE],
            "bound_holds": "" if self.bound_holds is None else int(self.bound_holds),
        }
        for k in range(k_users):
            row[f"rate_{k + 1}"] = self.ergodic_rates[k]
            row[f"rate_se_{k + 1}"] = self.ergodic_rates_se[k]
        for k in range(k_users):
            row[f"activity_{k + 1}"] = self.activity_fractions[k]
            row[f"activity_se_{k + 1}"] = self.activity_fractions_se[k]
        for k in range(k_users):
            row[f"admitted_{k + 1}"] = self.admitted_rates[k]
        for k in range(k_users):
            row[f"queue_{k + 1}"] = self.mean_queues[k]
        for k in range(k_users):
            row[f"predictable_{k + 1}"] = self.predictable_fraction[k]
        return row


@dataclass
class SweepRow:
    """One SNR grid point: the per-trial metrics and their aggregate."""

    snr_db: float
    aggregate: AggregateMetrics
    trials: list


# ---------------------------------------------------------------------------
# Per-slot bookkeeping
# ---------------------------------------------------------------------------

class _Accum:
    """Running sums and downsampled traces over one trial's slot loop."""

    def __init__(self, k_users, n_slots, stride):
        self.k = k_users
        self.n_slots = n_slots
        self.stride = stride
        self.t = 0
        self.rate_sum = np.zeros(k_users)
        self.arr_sum = np.zeros(k_users)
        self.q_sum = np.zeros(k_users)
        self.act = np.zeros(k_users)
        self.modes = {SM: 0, STC: 0, IDLE: 0}
        self.trace_slots = []
        self.trace_q = []
        self.trace_min = []

    def _min_avg(self):
        if self.t == 0:
            return 0.0
        return float(np.min(self.rate_sum) / self.t)

    def start_slot(self, queues):
        if self.t % self.stride == 0:
            self.trace_slots.append(self.t)
            self.trace_q.append(np.array(queues, dtype=float))
            self.trace_min.append(self._min_avg())

    def record(self, rates, queues_pre, arrivals, branch, active_set):
        self.rate_sum += rates
        self.q_sum += queues_pre
        if arrivals is not None:
            self.arr_sum += arrivals
        self.modes[branch] += 1
        for k in active_set:
            self.act[k] += 1
        self.t += 1

    def finish(self, queues_final):
        self.trace_slots.append(self.t)
        self.trace_q.append(np.array(queues_final, dtype=float))
        self.trace_min.append(self._min_avg())

    def metrics(self, policy, rate_model, snr, trial, tseed, classes,
                queues_final, bound_report):
        n = self.n_slots
        ergodic = self.rate_sum / n
        with np.errstate(divide="ignore"):
            logs = np.log(ergodic)
        return RunMetrics(
            policy=policy,
            rate_model=rate_model,
            snr_db=float(snr),
            trial=int(trial),
            seed=int(tseed),
            n_slots=n,
            classes=np.array(classes, dtype=bool),
            ergodic_rates=ergodic,
            admitted_rates=self.arr_sum / n,
            mean_queues=self.q_sum / n,
            final_queues=np.array(queues_final, dtype=float),
            activity_fractions=self.act / n,
            sum_rate=float(ergodic.sum()),
            sum_log_rate=float(logs.sum()),
            min_rate=float(ergodic.min()),
            mode_fractions={m: c / n for m, c in self.modes.items()},
            trace_slots=np.array(self.trace_slots, dtype=int),
            queue_trace=np.array(self.trace_q, dtype=float),
            trace_min_avg=np.array(self.trace_min, dtype=float),
            bound_report=bound_report,
        )


def _csi_entries_block(h_block, models, noise_block):
    """Vectorised per-slot CSI construction over a block of slots.

    Mirrors the single-slot generation rule exactly: gaussian errors are
    drawn conditionally on the true channel, unknown users get the fresh
    isotropic column, and the (slot, M, K) noise block is consumed
    column-wise so the mix of models never changes the draw order.
    """
    est = h_block.copy()
    for k, model in enumerate(models):
        if model.kind == "perfect":
            continue
        if model.kind == "unknown":
            est[:, :, k] = noise_block[:, :, k]
            continue
        s2 = model.sigma2
        err = s2 * h_block[:, :, k] + math.sqrt(s2 * (1.0 - s2)) * noise_block[:, :, k]
        est[:, :, k] = h_block[:, :, k] - err
    return est


def trial_seed(cfg: ExperimentConfig, snr_db, trial) -> int:
    """Per-trial seed: a keyed split of the master seed by (snr, trial).

    The policy and rate model are deliberately absent from the key so
    competing schedulers face the same channel and CSI realisations, and
    adding trials never perturbs earlier ones.
    """
    return derive_seed(cfg.seed, "trial", _snr_key(snr_db), int(trial))


def _snr_key(snr_db) -> int:
    return int(round(float(snr_db) * 1000.0))


# ---------------------------------------------------------------------------
# Bound evaluation
# ---------------------------------------------------------------------------

def _bound_report(cfg, P, ergodic, mean_queues, samplers, tseed):
    """Drift-plus-penalty backlog check against the measured averages.

    ``samplers`` holds one candidate gain sampler per distinct user law;
    the drift constant is evaluated for each and the largest is used, so
    heterogeneous user populations are covered by the worst case.  Returns
    None when the measured rates exceed the arrival cap: the bound's
    reference point is infeasible there, so no statement can be made.
    """
    if np.any(ergodic > cfg.utility.a_max * (1.0 + 1e-12)):
        return None
    c_best, se_best = -np.inf, 0.0
    for i, sampler in enumerate(samplers):
        c, se = drift_constant_C(
            cfg.k_users, cfg.utility.a_max, P, 1.0, sampler,
            n_samples=max(cfg.mc_samples, 10000),
            rng=stream(tseed, "driftc", i),
        )
        if c > c_best:
            c_best, se_best = c, se
    return theorem2_bounds(
        cfg.utility, ergodic, mean_queues, c_best, c_se=se_best,
        p_over_n0=P,
    )


# ---------------------------------------------------------------------------
# Single-trial runners
# ---------------------------------------------------------------------------

def _run_forced(cfg, snr, trial, tseed, forced):
    """Bookkeeping-only loop with externally dictated delivered rates."""
    K = cfg.k_users
    forced = np.asarray(forced, dtype=float)
    if forced.shape != (cfg.slots, K):
        raise ConfigError(
            f"forced rates must have shape ({cfg.slots}, {K}), got {forced.shape}"
        )
    if np.any(forced < 0):
        raise ConfigError("forced rates must be non-negative")
    acc = _Accum(K, cfg.slots, cfg.trace_stride)
    if cfg.csi.kind == CSI_FIXED:
        classes = np.array([m.is_predictable for m in cfg.csi.models], dtype=bool)
    else:
        classes = np.zeros(K, dtype=bool)
    q = np.zeros(K)
    mstate = MismatchedPfsState.fresh(K, t_c=cfg.t_c)
    for t in range(cfg.slots):
        acc.start_slot(q)
        rates = forced[t]
        if cfg.policy == MISMATCHED_PFS:
            mstate = mstate.updated(rates)
            acc.record(rates, np.zeros(K), None, IDLE, ())
        else:
            arr = virtual_arrivals(cfg.utility, q)
            q_pre = q
            q = update_queues(q, rates, arr)
            acc.record(rates, q_pre, arr, IDLE, ())
    acc.finish(q if cfg.policy != MISMATCHED_PFS else np.zeros(K))
    final_q = q if cfg.policy != MISMATCHED_PFS else np.zeros(K)
    return acc.metrics(cfg.policy, cfg.rate_model, snr, trial, tseed, classes,
                       final_q, None)


def _run_rayleigh(cfg, snr, trial, tseed):
    M, K = cfg.m_antennas, cfg.k_users
    P = snr_to_power(snr)
    N0 = 1.0
    models = cfg.csi.models
    classes = np.array([m.is_predictable for m in models], dtype=bool)
    dist = ErlangGain(M)  # vector-channel power law shared by all users
    rng_chan = stream(tseed, "chan")
    rng_csi = stream(tseed, "csi")
    acc = _Accum(K, cfg.slots, cfg.trace_stride)
    mismatched = cfg.policy == MISMATCHED_PFS
    q = np.zeros(K)
    mstate = MismatchedPfsState.fresh(K, t_c=cfg.t_c)
    done = 0
    while done < cfg.slots:
        b = min(_CHUNK_RAYLEIGH, cfg.slots - done)
        h_block = complex_normal(rng_chan, (b, M, K))
        n_block = complex_normal(rng_csi, (b, M, K))
        est_block = _csi_entries_block(h_block, models, n_block)
        for i in range(b):
            H = h_block[i]
            ent = est_block[i]
            if mismatched:
                acc.start_slot(np.zeros(K))
                sd, rates, mstate = mismatched_pfs_slot(
                    mstate, H, ent, P, N0, cfg.rate_model,
                    back_off=cfg.sm_back_off,
                )
                acc.record(rates, np.zeros(K), None, sd.branch,
                           sd.decision.active_set)
            else:
                acc.start_slot(q)
                sd = schedule_slot(
                    q, ent, cfg.rate_model, dist, P, N0,
                    classes=classes, back_off=cfg.sm_back_off,
                )
                rates = realized_rates(H, sd.decision, cfg.rate_model, N0,
                                       n_users=K)
                arr = virtual_arrivals(cfg.utility, q)
                q_pre = q
                q = update_queues(q, rates, arr)
                acc.record(rates, q_pre, arr, sd.branch,
                           sd.decision.active_set)
        done += b
    final_q = np.zeros(K) if mismatched else q
    acc.finish(final_q)
    bound = None
    if not mismatched:
        ergodic = acc.rate_sum / cfg.slots
        bound = _bound_report(cfg, P, ergodic, acc.q_sum / cfg.slots,
                              [erlang_gain_sampler(M)], tseed)
    return acc.metrics(cfg.policy, cfg.rate_model, snr, trial, tseed, classes,
                       final_q, bound)


def _calibration_slots(csi: CsiSpec) -> int:
    if csi.calibration_slots is not None:
        return csi.calibration_slots
    # enough pilots for the filters to adapt and score errors, and enough
    # slots for a usable empirical gain law
    return max(_MIN_CAL_SLOTS, csi.rls.min_samples + csi.rls.warmup + 10)


class _ScmEngine:
    """Shared per-trial machinery for the sum-of-sinusoids channel.

    Holds the ray trajectory, the per-coefficient predictor bank (one
    filter per antenna per user, user-major layout), and chunked slot
    evaluation.  The calibration prefix classifies users and collects the
    empirical gain laws; afterwards each served slot exposes the true
    symbol-level channel plus the bank's one-slot-ahead forecast.
    """

    def __init__(self, cfg, snr, tseed):
        self.cfg = cfg
        self.M, self.K = cfg.m_antennas, cfg.k_users
        self.T = cfg.channel.slot_symbols
        self.P = snr_to_power(snr)
        rng_amp = stream(tseed, "amp")
        users = [
            ScmUserParams.random_amplitudes(
                rng_amp, aoas=s.aoas, travel_azimuth=s.travel_azimuth,
                speed=s.speed, carrier=s.carrier,
                symbol_interval=s.symbol_interval,
                antenna_spacing_wavelengths=s.antenna_spacing_wavelengths,
            )
            for s in cfg.channel.scm_users
        ]
        self.traj = ScmTrajectory(users, self.M)
        self.rng_pilot = stream(tseed, "pilot")
        self.bank = RlsFilterBank(cfg.csi.rls, self.K * self.M)
        self.n_cal = _calibration_slots(cfg.csi)
        self.classes = None
        self.dists = None
        self.norm2_samples = None  # (n_cal, K) slot-start channel powers

    def slot_block(self, first_slot, count):
        idx = first_slot * self.T + np.arange(count * self.T)
        h = self.traj.at_symbols(idx)  # (count*T, M, K)
        return h.reshape(count, self.T, self.M, self.K)

    def observe(self, h_slot, pilot_noise):
        """Feed the slot's start-of-slot pilot; score against slot stats."""
        mean = h_slot.mean(axis=0)
        var = np.mean(np.abs(h_slot - mean) ** 2, axis=0)
        obs = h_slot[0] + pilot_noise
        self.bank.update(obs.T.ravel(), truth=mean.T.ravel(),
                         truth_var=var.T.ravel())

    def forecast(self):
        return self.bank.predict_next().reshape(self.K, self.M).T

    def calibrate(self):
        cfg = self.cfg
        gains = np.zeros((self.n_cal, self.K))
        norm2 = np.zeros((self.n_cal, self.K))
        scale = self.P / (self.M * 1.0)
        done = 0
        while done < self.n_cal:
            b = min(_CHUNK_SCM, self.n_cal - done)
            blocks = self.slot_block(done, b)
            noise = complex_normal(self.rng_pilot, (b, self.M, self.K),
                                   cfg.csi.pilot_noise_var) \
                if cfg.csi.pilot_noise_var > 0 else np.zeros((b, self.M, self.K))
            for i in range(b):
                h_slot = blocks[i]
                g = np.einsum("tmk,tmk->tk", h_slot.conj(), h_slot).real
                mi = np.log2(1.0 + g * scale).mean(axis=0)
                gains[done + i] = (2.0 ** mi - 1.0) / scale
                norm2[done + i] = g[0]
                self.observe(h_slot, noise[i])
            done += b
        mse = grouped_mse(*self.bank.error_stats, self.M)
        self.classes = classify_users(mse, self.cfg.csi.effective_threshold)
        self.mse = mse
        self.dists = [EmpiricalGain(gains[:, k]) for k in range(self.K)]
        self.norm2_samples = norm2


def _run_scm(cfg, snr, trial, tseed):
    M, K = cfg.m_antennas, cfg.k_users
    P = snr_to_power(snr)
    N0 = 1.0
    eng = _ScmEngine(cfg, snr, tseed)
    eng.calibrate()
    classes = eng.classes
    acc = _Accum(K, cfg.slots, cfg.trace_stride)
    mismatched = cfg.policy == MISMATCHED_PFS
    q = np.zeros(K)
    mstate = MismatchedPfsState.fresh(K, t_c=cfg.t_c)
    done = 0
    while done < cfg.slots:
        b = min(_CHUNK_SCM, cfg.slots - done)
        blocks = eng.slot_block(eng.n_cal + done, b)
        noise = complex_normal(eng.rng_pilot, (b, M, K),
                               cfg.csi.pilot_noise_var) \
            if cfg.csi.pilot_noise_var > 0 else np.zeros((b, M, K))
        for i in range(b):
            h_slot = blocks[i]
            ent = eng.forecast()
            if mismatched:
                acc.start_slot(np.zeros(K))
                sd, rates, mstate = mismatched_pfs_slot(
                    mstate, h_slot, ent, P, N0, cfg.rate_model,
                    back_off=cfg.sm_back_off,
                )
                acc.record(rates, np.zeros(K), None, sd.branch,
                           sd.decision.active_set)
            else:
                acc.start_slot(q)
                sd = schedule_slot(
                    q, ent, cfg.rate_model, eng.dists, P, N0,
                    classes=classes, back_off=cfg.sm_back_off,
                )
                rates = realized_rates(h_slot, sd.decision, cfg.rate_model,
                                       N0, n_users=K)
                arr = virtual_arrivals(cfg.utility, q)
                q_pre = q
                q = update_queues(q, rates, arr)
                acc.record(rates, q_pre, arr, sd.branch,
                           sd.decision.active_set)
            eng.observe(h_slot, noise[i])
        done += b
    final_q = np.zeros(K) if mismatched else q
    acc.finish(final_q)
    bound = None
    if not mismatched:
        ergodic = acc.rate_sum / cfg.slots
        samplers = [resample_gain_sampler(eng.norm2_samples[:, k])
                    for k in range(K)]
        bound = _bound_report(cfg, P, ergodic, acc.q_sum / cfg.slots,
                              samplers, tseed)
    return acc.metrics(cfg.policy, cfg.rate_model, snr, trial, tseed, classes,
                       final_q, bound)


def run_experiment(cfg: ExperimentConfig, snr_db, trial=0,
                   forced_rates=None) -> RunMetrics:
    """One trial of one experiment cell, fully determined by its arguments.

    ``snr_db`` is a single grid point (any finite value, usually from
    ``cfg.snr_db``).  ``forced_rates`` bypasses channel and scheduler and
    dictates the delivered rates per slot, for exercising the averaging
    and queue bookkeeping in isolation.
    """
    if not math.isfinite(float(snr_db)):
        raise ConfigError("snr_db must be finite")
    if not 0 <= int(trial):
        raise ConfigError("trial index must be non-negative")
    tseed = trial_seed(cfg, snr_db, trial)
    if forced_rates is not None:
        return _run_forced(cfg, float(snr_db), trial, tseed, forced_rates)
    if cfg.channel.kind == RAYLEIGH:
        return _run_rayleigh(cfg, float(snr_db), trial, tseed)
    return _run_scm(cfg, float(snr_db), trial, tseed)


# ---------------------------------------------------------------------------
# Trial farming and aggregation
# ---------------------------------------------------------------------------

def _trial_task(args):
    cfg, snr_db, trial = args
    return run_experiment(cfg, snr_db, trial)


def run_trials(cfg: ExperimentConfig, snr_db, threads=1) -> list:
    """All of a cell's trials, in trial order; optionally farmed to workers.

    Each trial is an independent pure function of (cfg, snr, trial), so
    the worker count changes wall time only, never a single byte of the
    results.
    """
    jobs = [(cfg, float(snr_db), t) for t in range(cfg.trials)]
    if threads <= 1 or cfg.trials == 1:
        return [_trial_task(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=int(threads)) as pool:
        return list(pool.map(_trial_task, jobs))


def _mean_se(values):
    arr = np.asarray(values, dtype=float)
    mean = arr.mean(axis=0)
    if arr.shape[0] < 2:
        return mean, np.zeros_like(mean)
    # spread of a set containing -inf (starved log-utility) is undefined;
    # let it pass through as nan rather than warn
    with np.errstate(invalid="ignore"):
        se = arr.std(axis=0, ddof=1) / math.sqrt(arr.shape[0])
    return mean, se


def aggregate_trials(metrics: list) -> AggregateMetrics:
    """Mean and standard error across trials of the same cell.

    A single trial (or identical trials) yields zero standard errors.
    Queue traces are averaged pointwise; all trials must share the cell
    identity, slot count and trace grid.
    """
    if not metrics:
        raise ConfigError("aggregate_trials needs at least one trial")
    first = metrics[0]
    for m in metrics[1:]:
        if (m.policy, m.rate_model, m.snr_db, m.n_slots) != \
                (first.policy, first.rate_model, first.snr_db, first.n_slots):
            raise ConfigError("trials to aggregate must come from one cell")
        if not np.array_equal(m.trace_slots, first.trace_slots):
            raise ConfigError("trials to aggregate must share the trace grid")
    n = len(metrics)
    rates, rates_se = _mean_se([m.ergodic_rates for m in metrics])
    adm, adm_se = _mean_se([m.admitted_rates for m in metrics])
    qbar, qbar_se = _mean_se([m.mean_queues for m in metrics])
    act, act_se = _mean_se([m.activity_fractions for m in metrics])
    sum_rate, sum_rate_se = _mean_se([m.sum_rate for m in metrics])
    sum_log, sum_log_se = _mean_se([m.sum_log_rate for m in metrics])
    min_rate, min_rate_se = _mean_se([m.min_rate for m in metrics])
    trace_q = np.mean([m.queue_trace for m in metrics], axis=0)
    tmin, tmin_se = _mean_se([m.trace_min_avg for m in metrics])
    mode_mean, mode_se = {}, {}
    for mode in (SM, STC, IDLE):
        mu, se = _mean_se([m.mode_fractions[mode] for m in metrics])
        mode_mean[mode] = float(mu)
        mode_se[mode] = float(se)
    return AggregateMetrics(
        policy=first.policy,
        rate_model=first.rate_model,
        snr_db=first.snr_db,
        n_trials=n,
        n_slots=first.n_slots,
        predictable_fraction=np.mean([m.classes for m in metrics], axis=0),
        ergodic_rates=rates,
        ergodic_rates_se=rates_se,
        admitted_rates=adm,
        admitted_rates_se=adm_se,
        mean_queues=qbar,
        mean_queues_se=qbar_se,
        activity_fractions=act,
        activity_fractions_se=act_se,
        sum_rate=float(sum_rate),
        sum_rate_se=float(sum_rate_se),
        sum_log_rate=float(sum_log),
        sum_log_rate_se=float(sum_log_se),
        min_rate=float(min_rate),
        min_rate_se=float(min_rate_se),
        mode_fractions=mode_mean,
        mode_fractions_se=mode_se,
        trace_slots=first.trace_slots.copy(),
        queue_trace=trace_q,
        trace_min_avg=tmin,
        trace_min_avg_se=tmin_se,
        bound_reports=[m.bound_report for m in metrics],
    )


def snr_sweep(cfg: ExperimentConfig, threads=1) -> list:
    """Run and aggregate every SNR grid point of one config."""
    rows = []
    for snr in cfg.snr_db:
        trials = run_trials(cfg, snr, threads=threads)
        rows.append(SweepRow(float(snr), aggregate_trials(trials), trials))
    return rows


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def run_id(policy, rate_model, snr_db, trial=None) -> str:
    base = f"{policy}_{rate_model}_snr{float(snr_db):g}"
    if trial is not None:
        base += f"_trial{int(trial)}"
    return base


def atomic_write_text(path, text):
    """Write via a sibling temp file plus rename; partial output never lands."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _fmt(x):
    # np.float64 passes the isinstance check but reprs as np.float64(...)
    if isinstance(x, float):
        return repr(float(x))
    return str(x)


def summary_columns(k_users) -> list:
    cols = [
        "policy", "rate_model", "snr_db", "trials", "slots",
        "sum_rate", "sum_rate_se", "sum_log_rate", "sum_log_rate_se",
        "min_rate", "min_rate_se", "sm_fraction", "stc_fraction",
        "idle_fraction", "bound_holds",
    ]
    for name in ("rate", "rate_se", "activity", "activity_se", "admitted",
                 "queue", "predictable"):
        cols.extend(f"{name}_{k + 1}" for k in range(k_users))
    return cols


def write_summary_csv(path, aggregates, k_users):
    """One row per (policy, rate model, SNR) aggregate, fixed column set."""
    cols = summary_columns(k_users)
    lines = [",".join(cols)]
    for agg in aggregates:
        row = agg.summary_row(k_users)
        missing = set(cols) - set(row)
        if missing:
            raise ConfigError(f"summary row missing columns {sorted(missing)}")
        lines.append(",".join(_fmt(row[c]) for c in cols))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_trace_csv(path, metrics: RunMetrics):
    """Queue trajectory of one run: slot, per-user queues, running min rate."""
    k = metrics.queue_trace.shape[1]
    header = ["slot"] + [f"Q_{i + 1}" for i in range(k)] + ["min_avg_rate"]
    lines = [",".join(header)]
    for j, t in enumerate(metrics.trace_slots):
        cells = [str(int(t))]
        cells.extend(repr(float(v)) for v in metrics.queue_trace[j])
        cells.append(repr(float(metrics.trace_min_avg[j])))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def report_payload(cfg: ExperimentConfig, rows, assertions=None) -> dict:
    """Machine-readable run report: config echo, cell summaries, checks."""
    results = []
    for row in rows:
        agg = row.aggregate
        results.append({
            "policy": agg.policy,
            "rate_model": agg.rate_model,
            "snr_db": agg.snr_db,
            "trials": agg.n_trials,
            "slots": agg.n_slots,
            "sum_rate": agg.sum_rate,
            "sum_rate_se": agg.sum_rate_se,
            "sum_log_rate": agg.sum_log_rate,
            "min_rate": agg.min_rate,
            "bound_holds": agg.bound_holds,
            "bound_reports": [
                None if r is None else r.to_dict() for r in agg.bound_reports
            ],
        })
    assertions = list(assertions or [])
    return _json_safe({
        "config": cfg.to_dict(),
        "results": results,
        "assertions": assertions,
        "passed": all(a["passed"] for a in assertions) if assertions else True,
    })


def write_report_json(path, payload: dict):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")

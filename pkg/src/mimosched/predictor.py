"""Link prediction with recursive least squares (RLS).

A bank of independent complex RLS filters predicts each channel
coefficient one (or more) pilot steps ahead from its own past samples.
Filters track an exponentially weighted prediction error, normalised by
the signal power over the same window; users whose normalised error
stays at or below a threshold are classified as predictable.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InsufficientDataError

__all__ = [
    "RlsConfig",
    "PredictionReport",
    "RlsFilterBank",
    "rls_predict",
    "classify_users",
    "grouped_mse",
]


@dataclass(frozen=True)
class RlsConfig:
    """Filter order, forgetting factor, inverse-correlation init, lookahead."""

    order: int = 8
    forgetting: float = 0.99
    init_gain: float = 100.0
    horizon: int = 1
    mse_threshold: float = 0.1
    stats_warmup: int | None = None  # updates to skip before scoring errors

    def __post_init__(self):
        if self.order < 1:
            raise ConfigError("RLS order must be >= 1")
        if not 0.0 < self.forgetting <= 1.0:
            raise ConfigError("forgetting factor must lie in (0, 1]")
        if self.init_gain <= 0:
            raise ConfigError("initial inverse-correlation gain must be positive")
        if self.horizon < 1:
            raise ConfigError("prediction horizon must be >= 1")
        if self.mse_threshold <= 0:
            raise ConfigError("MSE threshold must be positive")
        if self.stats_warmup is not None and self.stats_warmup < 0:
            raise ConfigError("stats warmup must be non-negative")

    @property
    def warmup(self):
        """Updates excluded from the error statistic (filter transient)."""
        if self.stats_warmup is not None:
            return self.stats_warmup
        return 2 * self.order + 2

    @property
    def min_samples(self):
        """Shortest series that produces at least one filter update."""
        return self.order + self.horizon


@dataclass
class PredictionReport:
    """Outcome of running a predictor over a finite series."""

    forecast: np.ndarray  # value one horizon past the last sample
    mse: np.ndarray  # normalised exponentially weighted prediction error
    predictable: np.ndarray  # mse <= threshold
    weights: np.ndarray  # final filter taps
    n_updates: int
    samples_used: int = 0  # error samples in the statistic (post warmup)


class RlsFilterBank:
    """B independent direct-form h-step RLS predictors advanced in lock step.

    Each filter regresses sample d[t] on the lagged window
    [d[t-h], ..., d[t-h-p+1]] so the trained taps predict h steps ahead
    without iteration.  Per-sample cost is O(B p^2).
    """

    def __init__(self, cfg: RlsConfig, n_filters: int):
        if n_filters < 1:
            raise ConfigError("need at least one filter")
        self.cfg = cfg
        self.n_filters = int(n_filters)
        p, B = cfg.order, self.n_filters
        self._lag = p + cfg.horizon - 1  # buffer length, most recent first
        self.w = np.zeros((B, p), dtype=complex)
        self.P = np.tile(cfg.init_gain * np.eye(p), (B, 1, 1)).astype(complex)
        self._buf = np.zeros((B, self._lag), dtype=complex)
        self._num = np.zeros(B)
        self._den = np.zeros(B)
        self.n_seen = 0
        self.n_updates = 0
        self.samples_used = 0  # updates counted in the error statistic

    def update(self, sample, truth=None, truth_var=None):
        """Feed one new observation per filter; adapt once history is full.

        Adaptation is driven by the observed samples.  When ``truth`` is
        given, the error statistics are measured against it instead, so
        observation noise does not inflate the reported MSE.  When the
        channel the prediction stands in for is itself time-varying,
        ``truth`` is its mean over the served interval and ``truth_var``
        its variance there; the variance is an irreducible floor added to
        both the error and the signal-power accumulators.
        """
        d = np.asarray(sample, dtype=complex)
        if d.shape != (self.n_filters,):
            raise ConfigError(f"expected {self.n_filters} samples, got shape {d.shape}")
        ref = d if truth is None else np.asarray(truth, dtype=complex)
        rvar = 0.0 if truth_var is None else np.asarray(truth_var, dtype=float)
        lam, p, h = self.cfg.forgetting, self.cfg.order, self.cfg.horizon
        if self.n_seen >= self._lag:
            x = self._buf[:, h - 1 : h - 1 + p]
            yhat = np.einsum("bi,bi->b", self.w.conj(), x)
            Px = np.einsum("bij,bj->bi", self.P, x)
            denom = lam + np.einsum("bi,bi->b", x.conj(), Px).real
            k = Px / denom[:, None]
            self.w = self.w + k * (d - yhat).conj()[:, None]
            xP = np.einsum("bi,bij->bj", x.conj(), self.P)
            self.P = (self.P - k[:, :, None] * xP[:, None, :]) / lam
            self.n_updates += 1
            if self.n_updates > self.cfg.warmup:
                self._num = lam * self._num + np.abs(ref - yhat) ** 2 + rvar
                self._den = lam * self._den + np.abs(ref) ** 2 + rvar
                self.samples_used += 1
        self._buf = np.concatenate([d[:, None], self._buf[:, :-1]], axis=1)
        self.n_seen += 1

    def predict_next(self) -> np.ndarray:
        """Forecast one horizon past the newest sample, shape (B,)."""
        x = self._buf[:, : self.cfg.order]
        return np.einsum("bi,bi->b", self.w.conj(), x)

    @property
    def mse(self) -> np.ndarray:
        """Normalised prediction MSE per filter; inf where no signal seen."""
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(self._den > 0, self._num / np.maximum(self._den, 1e-300), np.inf)
        return out

    @property
    def error_stats(self):
        """Raw (weighted error power, weighted signal power) accumulators."""
        return self._num.copy(), self._den.copy()


def rls_predict(observations, cfg: RlsConfig = RlsConfig(), truth=None,
                truth_var=None) -> PredictionReport:
    """Run RLS prediction over complete series, one filter per row.

    ``observations`` is (N,) or (B, N); ``truth`` (same shape) optionally
    supplies the noiseless reference for the error statistics, and
    ``truth_var`` its per-step variance over the interval each prediction
    serves.  Raises InsufficientDataError when the series is too short
    for a single filter update.
    """
    obs = np.asarray(observations, dtype=complex)
    flat = obs.ndim == 1
    obs = np.atleast_2d(obs)
    ref = None
    if truth is not None:
        ref = np.atleast_2d(np.asarray(truth, dtype=complex))
        if ref.shape != obs.shape:
            raise ConfigError("truth must match observations in shape")
    rvar = None
    if truth_var is not None:
        rvar = np.atleast_2d(np.asarray(truth_var, dtype=float))
        if rvar.shape != obs.shape:
            raise ConfigError("truth_var must match observations in shape")
    n = obs.shape[1]
    if n < cfg.min_samples:
        raise InsufficientDataError(
            f"series of length {n} is too short: order {cfg.order} plus "
            f"horizon {cfg.horizon} needs at least {cfg.min_samples} samples"
        )
    bank = RlsFilterBank(cfg, obs.shape[0])
    for t in range(n):
        bank.update(
            obs[:, t],
            None if ref is None else ref[:, t],
            None if rvar is None else rvar[:, t],
        )
    mse = bank.mse
    report = PredictionReport(
        forecast=bank.predict_next(),
        mse=mse,
        predictable=classify_users(mse, cfg.mse_threshold),
        weights=bank.w.copy(),
        n_updates=bank.n_updates,
        samples_used=bank.samples_used,
    )
    if flat:
        report.forecast = complex(report.forecast[0])
        report.mse = float(report.mse[0])
        report.predictable = bool(report.predictable[0])
        report.weights = report.weights[0]
    return report


def classify_users(mse, threshold) -> np.ndarray:
    """Predictable iff normalised MSE does not exceed the threshold."""
    return np.asarray(mse) <= threshold


def grouped_mse(num, den, group_size) -> np.ndarray:
    """Pool raw error statistics over fixed-size groups of filters.

    With one filter per antenna coefficient and ``group_size = M`` this
    yields each user's power-weighted aggregate MSE.
    """
    num = np.asarray(num, dtype=float).reshape(-1, group_size).sum(axis=1)
    den = np.asarray(den, dtype=float).reshape(-1, group_size).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.maximum(den, 1e-300), np.inf)

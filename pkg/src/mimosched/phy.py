"""Physical-layer math for the downlink.

Zero-forcing beamforming from the CSI, weighted waterfilling power
allocation, per-user SINR / mutual information, realized rates under the
outage and optimistic models, the outage-optimal fixed-rate point of a
gain distribution, and Monte-Carlo estimation of expected rates
conditioned on the CSI.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from .channel import CsiMatrix, complex_normal
from .errors import (
    ConfigError,
    InsufficientDataError,
    NoBeneficiaryError,
    SingularSelectionError,
    UnsupportedModelError,
)

__all__ = [
    "SM",
    "STC",
    "IDLE",
    "OUTAGE",
    "OPTIMISTIC",
    "RATE_MODELS",
    "SignalingDecision",
    "ErlangGain",
    "EmpiricalGain",
    "OutageRatePoint",
    "zfbf_vectors",
    "zf_effective_gains",
    "zf_gains_from_gram",
    "waterfilling",
    "waterfilling_batch",
    "sinr_and_mi",
    "realized_rates",
    "outage_rate_opt",
    "conditional_rate_mc",
]

SM = "sm"  # spatial multiplexing via ZFBF
STC = "stc"  # single-user space-time coding, covariance (P/M) I
IDLE = "idle"

OUTAGE = "outage"
OPTIMISTIC = "optimistic"
RATE_MODELS = (OUTAGE, OPTIMISTIC)

COND_LIMIT = 1e12

LOG2 = np.log(2.0)


def check_rate_model(model):
    if model not in RATE_MODELS:
        raise ConfigError(f"unknown rate model {model!r}; expected one of {RATE_MODELS}")
    return model


@dataclass
class SignalingDecision:
    """One slot's transmit choice: mode, served users, beams, powers, rates.

    ``alloc_rates`` aligns with ``active_set``.  For STC the single user
    gets an isotropic covariance (P/M) I, so beams and powers are None.
    ``total_power`` is the budget P the decision was made under.
    """

    mode: str
    active_set: tuple
    alloc_rates: np.ndarray
    total_power: float
    beams: np.ndarray | None = None  # (M, n) unit columns, SM only
    powers: np.ndarray | None = None  # (n,), SM only
    stc_user: int | None = None

    def __post_init__(self):
        if self.mode not in (SM, STC, IDLE):
            raise ConfigError(f"unknown signaling mode {self.mode!r}")
        self.active_set = tuple(int(k) for k in self.active_set)
        self.alloc_rates = np.asarray(self.alloc_rates, dtype=float)
        if self.alloc_rates.shape != (len(self.active_set),):
            raise ConfigError("need one allocated rate per active user")
        if np.any(self.alloc_rates < 0):
            raise ConfigError("allocated rates must be non-negative")
        if self.mode == SM:
            if self.beams is None or self.powers is None:
                raise ConfigError("spatial multiplexing requires beams and powers")
            self.beams = np.asarray(self.beams, dtype=complex)
            self.powers = np.asarray(self.powers, dtype=float)
            norms = np.linalg.norm(self.beams, axis=0)
            if np.any(np.abs(norms - 1.0) > 1e-12):
                raise ConfigError("beams must have unit norm")
            if np.any(self.powers < 0):
                raise ConfigError("powers must be non-negative")
            if self.powers.sum() > self.total_power + 1e-9:
                raise ConfigError("power allocation exceeds the budget")
        elif self.mode == STC:
            if len(self.active_set) != 1:
                raise ConfigError("space-time coding serves exactly one user")
            self.stc_user = self.active_set[0]
        else:
            if self.active_set:
                raise ConfigError("idle decision cannot have active users")

    @classmethod
    def idle(cls, total_power=0.0):
        return cls(IDLE, (), np.zeros(0), total_power)

    def rate_vector(self, n_users) -> np.ndarray:
        """Allocated rates scattered over all K users (zeros elsewhere)."""
        r = np.zeros(n_users)
        for i, k in enumerate(self.active_set):
            r[k] = self.alloc_rates[i]
        return r


# ---------------------------------------------------------------------------
# Beamforming
# ---------------------------------------------------------------------------

def _csi_columns(csi, users):
    entries = csi.entries if isinstance(csi, CsiMatrix) else np.asarray(csi, dtype=complex)
    users = tuple(int(k) for k in users)
    return entries[:, users], users


def zfbf_vectors(csi, users) -> np.ndarray:
    """Unit-norm zero-forcing beams for the selected users, shape (M, n).

    Beam k is the normalized k-th column of A (A^H A)^{-1} where A stacks
    the selected CSI columns, so each beam is orthogonal to every other
    selected user's estimated channel.
    """
    A, users = _csi_columns(csi, users)
    M, n = A.shape
    if n == 0:
        raise ConfigError("user selection must be nonempty")
    if n > M:
        raise ConfigError(f"cannot zero-force {n} users with {M} antennas")
    u, s, vh = np.linalg.svd(A, full_matrices=False)
    if s[-1] <= 0 or s[0] / s[-1] > COND_LIMIT:
        raise SingularSelectionError(
            f"selected CSI columns are rank deficient (condition number "
            f"{np.inf if s[-1] <= 0 else s[0] / s[-1]:.3e})"
        )
    # columns of A (A^H A)^{-1} == conj-transpose of the pseudo-inverse
    B = u @ (vh / s[:, None])
    return B / np.linalg.norm(B, axis=0, keepdims=True)


def zf_effective_gains(csi, users) -> np.ndarray:
    """Per-user effective power gains |h_k^H v_k|^2 of the ZF beams.

    Equal to 1 / [(A^H A)^{-1}]_{kk}; computed directly from the Gram
    matrix, avoiding beam materialization.
    """
    A, _ = _csi_columns(csi, users)
    G = A.conj().T @ A
    return zf_gains_from_gram(G)


def zf_gains_from_gram(G) -> np.ndarray:
    """Effective ZF gains from (stacked) Gram matrices (..., n, n)."""
    G = np.asarray(G)
    inv = np.linalg.inv(G)
    d = np.einsum("...ii->...i", inv).real
    with np.errstate(divide="ignore"):
        return np.where(d > 0, 1.0 / np.maximum(d, 1e-300), np.inf)


# ---------------------------------------------------------------------------
# Waterfilling
# ---------------------------------------------------------------------------

def waterfilling_batch(weights, gains, P, N0) -> np.ndarray:
    """Weighted waterfilling over stacked problems.

    For each row, maximizes sum_k Q_k log2(1 + g_k p_k / N0) subject to
    sum p_k <= P, p >= 0.  Users with zero weight or zero gain get zero
    power; rows with no eligible user come back all zero.
    """
    Q = np.atleast_2d(np.asarray(weights, dtype=float))
    g = np.atleast_2d(np.asarray(gains, dtype=float))
    if Q.shape != g.shape:
        raise ConfigError("weights and gains must share a shape")
    if P <= 0 or N0 <= 0:
        raise ConfigError("power budget and noise level must be positive")
    B, n = Q.shape
    eligible = (Q > 0) & (g > 0) & np.isfinite(g)
    if n == 1:
        # a lone eligible user gets the whole budget
        return np.where(eligible, float(P), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(eligible, Q * g / N0, 0.0)
        n0g = np.where(eligible, N0 / np.maximum(g, 1e-300), 0.0)
    order = np.argsort(-c, axis=1, kind="stable")
    rows = np.arange(B)[:, None]
    c_s = c[rows, order]
    q_s = np.where(eligible, Q, 0.0)[rows, order]
    n0g_s = n0g[rows, order]
    mu = q_s.cumsum(axis=1) / (P + n0g_s.cumsum(axis=1))
    valid = c_s > mu
    any_valid = valid.any(axis=1)
    # largest prefix length whose marginal user still clears the water level
    j_star = n - 1 - np.argmax(valid[:, ::-1], axis=1)
    mu_star = mu[rows[:, 0], j_star][:, None]
    ranks = np.arange(n)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        p_s = np.where(ranks <= j_star[:, None], q_s / mu_star - n0g_s, 0.0)
    p_s[~any_valid] = 0.0
    p = np.empty_like(p_s)
    p[rows, order] = p_s
    return np.maximum(p, 0.0)


def waterfilling(weights, gains, P, N0) -> np.ndarray:
    """Single-problem weighted waterfilling; raises when nobody can be served."""
    Q = np.asarray(weights, dtype=float)
    g = np.asarray(gains, dtype=float)
    if np.any(Q < 0) or np.any(g < 0):
        raise ConfigError("weights and gains must be non-negative")
    p = waterfilling_batch(Q[None, :], g[None, :], P, N0)[0]
    if not np.any(p > 0):
        raise NoBeneficiaryError("no user has positive weight and positive gain")
    return p


# ---------------------------------------------------------------------------
# SINR / rates
# ---------------------------------------------------------------------------

def sinr_and_mi(H, decision: SignalingDecision, N0):
    """Per-active-user SINR and mutual information for one channel state.

    ``H`` is the true channel, (M, K) or (..., M, K) with leading axes
    (e.g. symbols of a slot).  Returns (sinr, mi) shaped like the leading
    axes plus the active-set axis.
    """
    H = np.asarray(H, dtype=complex)
    if decision.mode == IDLE:
        shape = H.shape[:-2] + (0,)
        return np.zeros(shape), np.zeros(shape)
    users = list(decision.active_set)
    Hs = H[..., :, users]
    if decision.mode == STC:
        gains = np.einsum("...mk,...mk->...k", Hs.conj(), Hs).real
        M = H.shape[-2]
        sinr = gains * decision.total_power / (M * N0)
    else:
        cross = np.einsum("...mk,mj->...kj", Hs.conj(), decision.beams)
        G = np.abs(cross) ** 2  # (..., k, j) = |h_k^H v_j|^2
        weighted = G * decision.powers
        sig = np.einsum("...kk->...k", weighted).copy()
        interf = weighted.sum(axis=-1) - sig
        sinr = sig / (N0 + interf)
    return sinr, np.log2(1.0 + sinr)


def realized_rates(H, decision: SignalingDecision, model, N0, n_users=None) -> np.ndarray:
    """Service rates delivered to every user in one slot.

    ``H`` may carry a leading symbol axis, in which case the slot's
    mutual information is its average over that axis (codewords span the
    slot).  Outage credits the allocated rate only when it is strictly
    below the slot mutual information; optimistic delivers the mutual
    information itself.
    """
    check_rate_model(model)
    H = np.asarray(H, dtype=complex)
    if n_users is None:
        n_users = H.shape[-1]
    out = np.zeros(n_users)
    if decision.mode == IDLE:
        return out
    _, mi = sinr_and_mi(H, decision, N0)
    if mi.ndim > 1:
        mi = mi.reshape(-1, mi.shape[-1]).mean(axis=0)
    if model == OPTIMISTIC:
        served = mi
    else:
        served = np.where(decision.alloc_rates < mi, decision.alloc_rates, 0.0)
    for i, k in enumerate(decision.active_set):
        out[k] = served[i]
    return out


# ---------------------------------------------------------------------------
# Gain distributions
# ---------------------------------------------------------------------------

class ErlangGain:
    """|h|^2 of an m-antenna unit-variance Rayleigh vector: Gamma(m, 1)."""

    kind = "erlang"

    def __init__(self, m: int):
        if m < 1:
            raise ConfigError("Erlang shape must be a positive integer")
        self.m = int(m)
        self._mean_rate_cache = {}

    def cdf(self, x):
        return special.gammainc(self.m, np.maximum(np.asarray(x, dtype=float), 0.0))

    def sf(self, x):
        """P(gain > x)."""
        return special.gammaincc(self.m, np.maximum(np.asarray(x, dtype=float), 0.0))

    def quantile(self, q):
        return special.gammaincinv(self.m, q)

    def mean_log2_rate(self, c) -> float:
        """E[log2(1 + c * gain)] by adaptive quadrature, cached per c."""
        c = float(c)
        if c < 0:
            raise ConfigError("rate scale must be non-negative")
        if c == 0.0:
            return 0.0
        hit = self._mean_rate_cache.get(c)
        if hit is not None:
            return hit
        m = self.m
        lognorm = special.gammaln(m)

        def integrand(x):
            return np.log1p(c * x) / LOG2 * np.exp((m - 1) * np.log(x) - x - lognorm)

        val, _ = integrate.quad(integrand, 0.0, np.inf, limit=200)
        self._mean_rate_cache[c] = val
        return val


class EmpiricalGain:
    """Gain law estimated from samples; cdf with linear interpolation."""

    kind = "empirical"

    MIN_SAMPLES = 1000

    def __init__(self, samples):
        s = np.sort(np.asarray(samples, dtype=float))
        if s.ndim != 1 or s.size < self.MIN_SAMPLES:
            raise InsufficientDataError(
                f"empirical gain law needs at least {self.MIN_SAMPLES} samples, "
                f"got {s.size}"
            )
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ConfigError("gain samples must be finite and non-negative")
        self.samples = s
        self._mean_rate_cache = {}

    def cdf(self, x):
        return np.searchsorted(self.samples, np.asarray(x, dtype=float), side="right") / self.samples.size

    def sf(self, x):
        """P(gain > x), strict, matching the outage definition."""
        n = self.samples.size
        return (n - np.searchsorted(self.samples, np.asarray(x, dtype=float), side="right")) / n

    def quantile(self, q):
        return np.quantile(self.samples, q, method="linear")

    def mean_log2_rate(self, c) -> float:
        c = float(c)
        if c < 0:
            raise ConfigError("rate scale must be non-negative")
        hit = self._mean_rate_cache.get(c)
        if hit is None:
            hit = float(np.mean(np.log1p(c * self.samples)) / LOG2)
            self._mean_rate_cache[c] = hit
        return hit


@dataclass(frozen=True)
class OutageRatePoint:
    """Fixed-rate point maximizing expected goodput r * P(rate supported)."""

    rate: float
    goodput: float
    degenerate: bool = False


def _golden_max(f, lo, hi, tol=1e-6, max_iter=200):
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c_ = b - inv_phi * (b - a)
    d_ = a + inv_phi * (b - a)
    fc, fd = f(c_), f(d_)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc > fd:
            b, d_, fd = d_, c_, fc
            c_ = b - inv_phi * (b - a)
            fc = f(c_)
        else:
            a, c_, fc = c_, d_, fd
            d_ = a + inv_phi * (b - a)
            fd = f(d_)
    x = c_ if fc > fd else d_
    return x, f(x)


def outage_rate_opt(dist, P, M, N0, grid_step=1e-3) -> OutageRatePoint:
    """Best fixed rate r* for a single-user isotropic transmission.

    Maximizes r * P(log2(1 + gain P / (M N0)) > r), i.e. the expected
    goodput when rate r is in outage whenever the realized mutual
    information does not exceed it.  Golden-section search over a
    quantile-bracketed range, cross-checked against a fixed-step grid
    (the better of the two wins; the gain law may have atoms).
    """
    if P <= 0 or N0 <= 0 or M < 1:
        raise ConfigError("need positive power, positive noise, M >= 1")
    c = P / (M * N0)
    q_hi = float(dist.quantile(0.9999))
    if q_hi <= 0:
        return OutageRatePoint(0.0, 0.0, degenerate=True)
    r_hi = float(np.log2(1.0 + c * q_hi))

    def goodput(r):
        thresh = (np.power(2.0, r) - 1.0) / c
        return r * float(dist.sf(thresh))

    r_g, v_g = _golden_max(goodput, 0.0, r_hi)
    grid = np.arange(0.0, r_hi + grid_step, grid_step)
    thresh = (np.power(2.0, grid) - 1.0) / c
    vals = grid * dist.sf(thresh)
    i = int(np.argmax(vals))
    if vals[i] > v_g:
        r_g, v_g = float(grid[i]), float(vals[i])
    return OutageRatePoint(float(r_g), float(v_g))


# ---------------------------------------------------------------------------
# Conditional expected rates
# ---------------------------------------------------------------------------

def conditional_rate_mc(csi: CsiMatrix, decision: SignalingDecision, N0,
                        n_samples, rng):
    """Expected mutual information given the CSI, by Monte Carlo.

    For each served user draws the true channel as h = est + e with
    e ~ CN(0, sigma2 I), evaluates the mutual information under the
    decision, and averages.  Returns (mean, standard_error) arrays over
    the active set.  Users whose CSI carries no information (unknown
    kind) have no usable conditional law and are rejected.
    """
    if n_samples < 1:
        raise ConfigError("need at least one sample")
    if decision.mode == IDLE:
        return np.zeros(0), np.zeros(0)
    users = list(decision.active_set)
    if csi.kinds is not None:
        for k in users:
            if csi.kinds[k] == "unknown":
                raise UnsupportedModelError(
                    f"user {k} has uninformative CSI; conditional estimation "
                    "is undefined (use the unconditional gain law instead)"
                )
    M = csi.entries.shape[0]
    means = np.zeros(len(users))
    ses = np.zeros(len(users))
    for i, k in enumerate(users):
        s2 = float(csi.sigma2[k])
        est = csi.entries[:, k]
        if s2 == 0.0:
            h = est[None, :]
        else:
            h = est[None, :] + complex_normal(rng, (int(n_samples), M), s2)
        if decision.mode == STC:
            gains = np.einsum("nm,nm->n", h.conj(), h).real
            mi = np.log2(1.0 + gains * decision.total_power / (M * N0))
        else:
            cross = np.abs(h.conj() @ decision.beams) ** 2  # (n, |U|)
            weighted = cross * decision.powers
            sig = weighted[:, i]
            interf = weighted.sum(axis=1) - sig
            mi = np.log2(1.0 + sig / (N0 + interf))
        means[i] = mi.mean()
        if s2 > 0.0 and n_samples > 1:
            ses[i] = mi.std(ddof=1) / np.sqrt(n_samples)
    return means, ses

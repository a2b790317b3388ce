"""Numerical bound checks for the virtual-queue policies: the drift constant,
the queue-backlog bound, and the imperfect-CSI rate-gap bound.

Conventions: rates are in bits/channel-use (base-2 logs) everywhere, so the
drift constant C carries bits^2.  The proportional-fairness utility realized
by the arrival rule A_k = min(V/Q_k, A_max) is sum_k ln(rate), so the
backlog-bound algebra for that utility (and the beta* fixed point) uses
natural logs; the equation for beta* is dimensionless in beta either way.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .phy import LOG2, zfbf_vectors
from .scheduler import HFS, PFS, UtilitySpec

MIN_DRIFT_SAMPLES = 10_000


def drift_constant_C(k_users, a_max, P, N0, gain_sampler, n_samples=MIN_DRIFT_SAMPLES,
                     rng=None):
    """Drift constant C = (K/2)(A_max^2 + E[log2^2(1 + g P/N0)]) in bits^2.

    The expectation over the channel power gain g is Monte-Carlo estimated
    through ``gain_sampler(n, rng)``.  Returns (C, standard error).
    """
    if k_users < 1 or a_max <= 0 or P < 0 or N0 <= 0:
        raise ConfigError("need K >= 1, A_max > 0, P >= 0, N0 > 0")
    base = 0.5 * k_users * a_max ** 2
    if P == 0:
        return base, 0.0
    if n_samples < MIN_DRIFT_SAMPLES:
        raise ConfigError(f"drift constant needs at least {MIN_DRIFT_SAMPLES} samples")
    if rng is None:
        rng = np.random.default_rng()
    g = np.asarray(gain_sampler(int(n_samples), rng), dtype=float)
    if g.shape != (int(n_samples),) or np.any(g < 0):
        raise ConfigError("gain sampler must return n non-negative draws")
    y = (np.log1p(g * (P / N0)) / LOG2) ** 2
    half_k = 0.5 * k_users
    c = base + half_k * float(y.mean())
    se = half_k * float(y.std(ddof=1)) / np.sqrt(n_samples)
    return c, se


def erlang_gain_sampler(m):
    """Sampler for |h|^2 of an m-antenna unit-variance Rayleigh vector."""
    if m < 1:
        raise ConfigError("antenna count must be positive")

    def sample(n, rng):
        return rng.gamma(float(m), 1.0, int(n))

    return sample


def resample_gain_sampler(samples):
    """Bootstrap sampler over an observed set of power gains."""
    s = np.asarray(samples, dtype=float)
    if s.ndim != 1 or s.size == 0 or np.any(s < 0):
        raise ConfigError("need a non-empty vector of non-negative gains")

    def sample(n, rng):
        return rng.choice(s, size=int(n), replace=True)

    return sample


def solve_beta_star(C, K, V) -> float:
    """Unique root in (0, 1] of ln(beta) + 1/beta = 1 + C/(KV), by bisection."""
    if C < 0 or K <= 0 or V <= 0:
        raise ConfigError("need C >= 0, K > 0, V > 0")
    c = C / (K * V)
    if c == 0:
        return 1.0

    def f(b):
        return np.log(b) + 1.0 / b - 1.0 - c

    lo, hi = 0.5, 1.0
    while f(lo) <= 0:
        lo *= 0.5
        if lo < 1e-300:
            return lo
    # f decreases from f(lo) > 0 to f(1) = -c < 0
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if abs(val) < 1e-12:
            return float(mid)
        if val > 0:
            lo = mid
        else:
            hi = mid
        if (hi - lo) < 1e-17 * hi:
            break
    return float(0.5 * (lo + hi))


@dataclass
class BoundReport:
    """Backlog-bound evaluation for one converged policy run.

    ``queue_bound`` is the value the pass/fail check compares against:
    the generic beta = 1/2 surrogate for PFS, and C + V min_k(rate) for
    HFS.  ``star_bound`` reports the tighter utility-specific form
    ((C - V K ln beta*)/(1 - beta*) for PFS) for reference only.
    """

    kind: str
    v: float
    k_users: int
    a_max: float
    p_over_n0: float
    c: float
    c_se: float
    beta: float
    beta_star: float
    utility_gap: float
    weighted_backlog: float
    queue_bound: float
    star_bound: float
    holds: bool
    inconclusive: bool

    def __post_init__(self):
        if self.c < 0 or not 0 < self.beta_star <= 1:
            raise ConfigError("need C >= 0 and beta* in (0, 1]")
        if np.isnan(self.queue_bound) or self.queue_bound < 0:
            raise ConfigError("queue bound must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def theorem2_bounds(utility: UtilitySpec, rates, mean_queues, c, c_se=0.0,
                    p_over_n0=0.0, beta=0.5) -> BoundReport:
    """Check the long-run weighted-backlog bound for a measured run.

    Left side: sum_k rate_k * mean-backlog_k.  Right side: the backlog
    bound with the unknown constrained optimum g(R*(A_max)) replaced by
    its upper bound g(A_max * 1), the measured rate point standing in for
    the reference point, and beta = 1/2 (PFS); for HFS the simplified
    C + V * min_k(rate) form is used.  A zero measured rate makes the PFS
    utility -inf: flagged inconclusive (vacuously true), never a failure.
    """
    r = np.asarray(rates, dtype=float)
    qbar = np.asarray(mean_queues, dtype=float)
    if r.shape != qbar.shape or r.ndim != 1:
        raise ConfigError("rates and mean queue sizes must be matching vectors")
    if np.any(r < 0) or np.any(qbar < 0):
        raise ConfigError("measured rates and backlogs must be non-negative")
    if np.any(r > utility.a_max * (1 + 1e-12)):
        raise ConfigError("measured rates must not exceed A_max")
    if not 0 <= beta < 1:
        raise ConfigError("beta must lie in [0, 1)")
    k_users = r.size
    v = utility.v
    lhs = float(r @ qbar)
    beta_star = solve_beta_star(c, k_users, v)
    inconclusive = False
    if utility.kind == PFS:
        if np.any(r == 0):
            inconclusive = True
            queue_bound = np.inf
        else:
            g_cap = k_users * np.log(utility.a_max)
            g_beta = float(np.sum(np.log(beta * r)))
            queue_bound = (c + v * (g_cap - g_beta)) / (1.0 - beta)
        star_bound = (c - v * k_users * np.log(beta_star)) / (1.0 - beta_star)
    else:
        g_meas = float(r.min())
        queue_bound = c + v * g_meas
        star_bound = queue_bound
    holds = bool(lhs <= queue_bound)
    return BoundReport(
        kind=utility.kind,
        v=v,
        k_users=k_users,
        a_max=utility.a_max,
        p_over_n0=float(p_over_n0),
        c=float(c),
        c_se=float(c_se),
        beta=float(beta),
        beta_star=float(beta_star),
        utility_gap=float(c / v),
        weighted_backlog=lhs,
        queue_bound=float(queue_bound),
        star_bound=float(star_bound),
        holds=holds,
        inconclusive=inconclusive,
    )


@dataclass
class RateGapResult:
    """Genie-vs-actual conditional rate gap and its analytic bound (bits)."""

    delta: float
    bound: float
    theta: float
    extra: float
    se: float
    holds: bool
    n_samples: int


def rate_gap_check(hhat_cols, h_true, k, sigma2, P, N0, n_samples=10_000,
                   rng=None) -> RateGapResult:
    """Estimate the conditional rate gap of user k under on-off powers
    P/|U| and compare it against theta_k + log2(1 + sigma^2(|U|-1)P/(N0|U|)).

    ``hhat_cols`` stacks the selected users' channel estimates (M, |U|);
    ``h_true`` is user k's true channel.  The genie beams come from the
    estimate matrix with column k replaced by the truth.  The two
    conditional expectations share the same error draws, so the check
    ``delta <= bound within 3 standard errors`` reduces to a paired
    comparison.
    """
    A = np.asarray(hhat_cols, dtype=complex)
    if A.ndim != 2:
        raise ConfigError("channel estimates must form an (M, |U|) matrix")
    M, u = A.shape
    if not 1 <= u <= M:
        raise ConfigError("need 1 <= |U| <= M selected users")
    if not 0 <= k < u:
        raise ConfigError("user index must fall inside the selected set")
    if sigma2 < 0 or P <= 0 or N0 <= 0:
        raise ConfigError("need sigma^2 >= 0, P > 0, N0 > 0")
    h = np.asarray(h_true, dtype=complex).reshape(M)

    genie = A.copy()
    genie[:, k] = h
    v_genie = zfbf_vectors(genie, range(u))
    v = zfbf_vectors(A, range(u))
    scale = P / (N0 * u)
    r_genie = float(np.log1p(np.abs(h.conj() @ v_genie[:, k]) ** 2 * scale) / LOG2)

    others = [j for j in range(u) if j != k]
    if sigma2 == 0:
        gain = np.abs(A[:, k].conj() @ v[:, k]) ** 2
        a_mean = b_mean = float(np.log1p(gain * scale) / LOG2)
        se = 0.0
        n_used = 0
    else:
        if rng is None:
            rng = np.random.default_rng()
        n = int(n_samples)
        if n < 1:
            raise ConfigError("need at least one error draw")
        e = (rng.standard_normal((n, M)) + 1j * rng.standard_normal((n, M))) \
            * np.sqrt(sigma2 / 2.0)
        hk = A[:, k][None, :] + e
        num = np.abs(hk.conj() @ v[:, k]) ** 2 * P
        if others:
            interf = np.sum(np.abs(e.conj() @ v[:, others]) ** 2, axis=1) * P
        else:
            interf = 0.0
        a_i = np.log1p(num / (N0 * u + interf)) / LOG2
        b_i = np.log1p(num / (N0 * u)) / LOG2
        a_mean = float(a_i.mean())
        b_mean = float(b_i.mean())
        d = b_i - a_i
        se = float(d.std(ddof=1)) / np.sqrt(n)
        n_used = n

    delta = r_genie - a_mean
    theta = r_genie - b_mean
    extra = float(np.log1p(sigma2 * (u - 1) * P / (N0 * u)) / LOG2)
    bound = theta + extra
    holds = bool(delta <= bound + 3.0 * se)
    return RateGapResult(delta, bound, theta, extra, se, holds, n_used)

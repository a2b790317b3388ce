"""Queue-driven downlink scheduling: virtual-queue max-weight policies with
ZFBF/STC mode switching, and the mismatched proportional-fair baseline.

The max-weight policies keep one virtual queue per user, fed by synthetic
arrivals derived from the utility (proportional or hard fairness) and
drained by realized service rates.  Each slot the scheduler compares the
best weighted sum rate over predictable users (spatial multiplexing with
zero-forcing beams and weighted waterfilling) against the best queue-
weighted expected single-user rate over non-predictable users (isotropic
space-time coding) and plays the winning branch.
"""

import math
from dataclasses import dataclass

import numpy as np

from .channel import CsiMatrix
from .errors import ConfigError
from .phy import (
    IDLE,
    OPTIMISTIC,
    SM,
    STC,
    SignalingDecision,
    check_rate_model,
    outage_rate_opt,
    realized_rates,
    waterfilling_batch,
    zfbf_vectors,
)

PFS = "pfs"  # maximize sum_k log(mean rate)
HFS = "hfs"  # maximize min_k mean rate
UTILITY_KINDS = (PFS, HFS)


@dataclass(frozen=True)
class UtilitySpec:
    """Fairness objective plus the control weight V and arrival cap A_max."""

    kind: str
    v: float
    a_max: float

    def __post_init__(self):
        if self.kind not in UTILITY_KINDS:
            raise ConfigError(f"unknown utility kind {self.kind!r}; expected one of {UTILITY_KINDS}")
        if not self.v > 0:
            raise ConfigError("control weight V must be positive")
        if not self.a_max > 0:
            raise ConfigError("arrival cap A_max must be positive")

    @classmethod
    def pfs(cls, v, a_max):
        return cls(PFS, float(v), float(a_max))

    @classmethod
    def hfs(cls, v, a_max):
        return cls(HFS, float(v), float(a_max))


@dataclass
class QueueState:
    """Virtual queue backlogs (bits/channel-use x slots) at slot t."""

    q: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        if self.q.ndim != 1:
            raise ConfigError("queue vector must be one-dimensional")
        if np.any(self.q < 0) or not np.all(np.isfinite(self.q)):
            raise ConfigError("queue backlogs must be finite and non-negative")

    @classmethod
    def zeros(cls, n_users):
        return cls(np.zeros(int(n_users)))


def virtual_arrivals(spec: UtilitySpec, queues) -> np.ndarray:
    """Utility-optimal synthetic arrivals for the current backlogs.

    PFS admits A_k = min(V / Q_k, A_max) per user (A_max when Q_k = 0);
    HFS admits A_max for everyone while sum Q < V and nothing otherwise.
    """
    q = queues.q if isinstance(queues, QueueState) else np.asarray(queues, dtype=float)
    if spec.kind == PFS:
        with np.errstate(divide="ignore"):
            ratio = np.where(q > 0, spec.v / np.maximum(q, 1e-300), np.inf)
        return np.minimum(ratio, spec.a_max)
    level = spec.a_max if spec.v > q.sum() else 0.0
    return np.full(q.shape, level)


def update_queues(queues, rates, arrivals) -> np.ndarray:
    """One-slot queue recursion Q' = max(0, Q - R) + A."""
    q = np.asarray(queues, dtype=float)
    r = np.asarray(rates, dtype=float)
    a = np.asarray(arrivals, dtype=float)
    if np.any(r < 0) or np.any(a < 0):
        raise ConfigError("service rates and arrivals must be non-negative")
    return np.maximum(q - r, 0.0) + a


@dataclass
class ScoredDecision:
    """A slot decision together with its queue-weighted score and branch."""

    decision: SignalingDecision
    score: float
    branch: str

    def __post_init__(self):
        self.score = float(self.score)
        if not (np.isfinite(self.score) and self.score >= 0):
            raise ConfigError("decision score must be finite and non-negative")
        if self.branch not in (SM, STC, IDLE):
            raise ConfigError(f"unknown decision branch {self.branch!r}")


def _entries_of(csi) -> np.ndarray:
    return csi.entries if isinstance(csi, CsiMatrix) else np.asarray(csi, dtype=complex)


def _subset_zf_gains(G, idx) -> np.ndarray:
    """Effective ZF gains for stacked user subsets, via Gram inverses.

    Rows of ``idx`` select subsets; numerically unservable users (singular
    or indefinite Gram) come back with zero gain so waterfilling skips them.
    One- and two-user subsets use the closed-form inverse, larger ones the
    stacked solver.
    """
    r = idx.shape[1]
    if r == 1:
        a = G[idx[:, 0], idx[:, 0]].real
        return np.where((a > 0) & np.isfinite(a), a, 0.0)[:, None]
    if r == 2:
        i, j = idx[:, 0], idx[:, 1]
        a = G[i, i].real
        b = G[j, j].real
        det = a * b - np.abs(G[i, j]) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.stack([det / b, det / a], axis=1)
        ok = (det > 0)[:, None] & (g > 0) & np.isfinite(g)
        return np.where(ok, g, 0.0)
    grams = G[idx[:, :, None], idx[:, None, :]]
    try:
        d = np.einsum("bii->bi", np.linalg.inv(grams)).real
    except np.linalg.LinAlgError:
        d = np.empty(idx.shape)
        for b in range(idx.shape[0]):
            try:
                d[b] = np.diag(np.linalg.inv(grams[b])).real
            except np.linalg.LinAlgError:
                d[b] = np.inf
    with np.errstate(divide="ignore"):
        g = np.where(d > 0, 1.0 / np.maximum(d, 1e-300), 0.0)
    return np.where(np.isfinite(g), g, 0.0)


def _wf_small(weights, gains, P, N0) -> list:
    """Scalar-arithmetic weighted waterfilling for one small problem.

    Follows the batch routine's algorithm step for step (same eligibility
    rule, same stable descending marginal order, same prefix water levels)
    so the two agree to the last bit; it exists because the slot loop
    solves thousands of length-<=4 problems where array dispatch overhead
    dominates.  Returns a plain list of per-user powers.
    """
    n = len(weights)
    p = [0.0] * n
    elig = [i for i in range(n)
            if weights[i] > 0 and gains[i] > 0 and math.isfinite(gains[i])]
    if not elig:
        return p
    if len(elig) == 1:
        p[elig[0]] = float(P)
        return p
    c = [weights[i] * gains[i] / N0 for i in elig]
    order = sorted(range(len(elig)), key=lambda j: -c[j])
    n0g = [N0 / gains[elig[j]] for j in order]
    j_star = -1
    mu_star = 0.0
    sum_q = 0.0
    sum_n = 0.0
    for rank, j in enumerate(order):
        sum_q = sum_q + weights[elig[j]]
        sum_n = sum_n + n0g[rank]
        mu = sum_q / (P + sum_n)
        if c[j] > mu:
            j_star, mu_star = rank, mu
    for rank in range(j_star + 1):
        j = order[rank]
        val = weights[elig[j]] / mu_star - n0g[rank]
        p[elig[j]] = val if val > 0 else 0.0
    return p


def _greedy_users(weights, entries, candidates, P, N0, raw_gain=False):
    """Forward greedy weighted-sum-rate selection on estimated channels.

    Grows the active set one user at a time, keeping the augmentation that
    raises the waterfilled score the most; stops at M users or when no
    candidate improves the score.  Returns (selected, score, accepted-score
    trace).  ``raw_gain`` scores with per-user channel norms |h_k|^2 in
    place of the post-beamforming gains.
    """
    w = np.asarray(weights, dtype=float)
    M = entries.shape[0]
    cand = [int(k) for k in candidates if w[k] > 0]
    G = entries.conj().T @ entries
    raw_diag = np.abs(np.diagonal(G).real)
    selected: list = []
    score = 0.0
    trace: list = []
    # first round in scalar form: beams are a no-op for a single user, so
    # each candidate scores w_k log2(1 + |h_k|^2 P / N0) with full power
    best, best_score = -1, 0.0
    for k in cand:
        g = raw_diag[k]
        if not (g > 0 and math.isfinite(g)):
            continue
        s = w[k] * math.log2(1.0 + g * P / N0)
        if s > best_score:
            best, best_score = k, s
    if best >= 0:
        selected.append(best)
        score = best_score
        trace.append(score)
        cand.remove(best)
    # later rounds: subset gains vectorised over the candidates, then a
    # scalar waterfill-and-score pass per candidate
    while cand and 0 < len(selected) < M:
        n = len(selected) + 1
        idx = np.empty((len(cand), n), dtype=int)
        idx[:, :-1] = selected
        idx[:, -1] = cand
        gains = raw_diag[idx] if raw_gain else _subset_zf_gains(G, idx)
        wsel = [float(w[s]) for s in selected]
        best, best_score = -1, score
        for b in range(len(cand)):
            grow = gains[b]
            wrow = wsel + [float(w[cand[b]])]
            p = _wf_small(wrow, grow, P, N0)
            s = 0.0
            for t in range(n):
                if p[t] > 0:
                    s += wrow[t] * math.log2(1.0 + grow[t] * p[t] / N0)
            if s > best_score:
                best, best_score = b, s
        if best < 0:
            break
        selected.append(cand[best])
        score = best_score
        trace.append(score)
        cand.pop(best)
    return selected, score, trace


def _materialize_sm(users, weights, csi, P, N0, back_off, raw_gain=False) -> ScoredDecision:
    """Build the SM decision (beams, powers, rates, score) for a user set."""
    entries = _entries_of(csi)
    users = tuple(int(k) for k in users)
    beams = zfbf_vectors(entries, users)
    A = entries[:, list(users)]
    if raw_gain:
        gains = np.einsum("mk,mk->k", A.conj(), A).real
    else:
        gains = np.abs(np.einsum("mk,mk->k", A.conj(), beams)) ** 2
    wsub = np.asarray(weights, dtype=float)[list(users)]
    powers = np.asarray(_wf_small(wsub, gains, P, N0))
    logs = np.log2(1.0 + gains * powers / N0)
    score = float(wsub @ logs)
    decision = SignalingDecision(SM, users, back_off * logs, P, beams=beams, powers=powers)
    return ScoredDecision(decision, score, SM)


def score_predictable(users, queues, csi, P, N0, back_off=1.0) -> ScoredDecision:
    """Score a predictable-user set: ZF beams, weighted waterfilling, and
    S = sum_k Q_k log2(1 + g_k p_k / N0).

    Allocated rates are the per-user log terms (times the optional
    multiplicative back-off), treating the channel estimates as exact.
    """
    if not 0 < back_off <= 1:
        raise ConfigError("rate back-off must lie in (0, 1]")
    return _materialize_sm(users, queues, csi, P, N0, back_off)


def greedy_select(users, queues, csi, P, N0, back_off=1.0, return_trace=False):
    """Best spatial-multiplexing decision over a predictable-user pool.

    Greedy set construction; all-zero scores yield an idle decision with
    score 0.  With ``return_trace`` also returns the accepted-score
    sequence (strictly increasing by construction).
    """
    q = queues.q if isinstance(queues, QueueState) else np.asarray(queues, dtype=float)
    entries = _entries_of(csi)
    selected, _, trace = _greedy_users(q, entries, users, P, N0)
    if selected:
        sd = _materialize_sm(selected, q, csi, P, N0, back_off)
    else:
        sd = ScoredDecision(SignalingDecision.idle(P), 0.0, IDLE)
    return (sd, np.asarray(trace)) if return_trace else sd


def stc_unit_score(dist, model, P, M, N0):
    """Per-unit-queue STC score and rate for a gain law, cached on the law.

    Optimistic: E[log2(1 + g P / (M N0))].  Outage: the goodput-optimal
    fixed rate r* and its expected goodput.
    Returns (score per unit queue, allocated rate).
    """
    check_rate_model(model)
    key = (model, float(P), int(M), float(N0))
    cache = dist.__dict__.setdefault("_stc_score_cache", {})
    hit = cache.get(key)
    if hit is None:
        if model == OPTIMISTIC:
            mean = float(dist.mean_log2_rate(P / (M * N0)))
            hit = (mean, mean)
        else:
            point = outage_rate_opt(dist, P, M, N0)
            hit = (float(point.goodput), float(point.rate))
        cache[key] = hit
    return hit


def score_npr(k, queues, dist, model, P, M, N0) -> ScoredDecision:
    """Queue-weighted expected STC rate for one non-predictable user."""
    q = queues.q if isinstance(queues, QueueState) else np.asarray(queues, dtype=float)
    unit, rate = stc_unit_score(dist, model, P, M, N0)
    decision = SignalingDecision(STC, (int(k),), np.array([rate]), P)
    return ScoredDecision(decision, float(q[int(k)]) * unit, STC)


def _dist_for(dists, k):
    if isinstance(dists, (list, tuple)):
        return dists[k]
    return dists


def schedule_slot(queues, csi, model, dists, P, N0, classes=None, back_off=1.0) -> ScoredDecision:
    """One slot of the max-weight policy: SM over predictable users versus
    STC to the best non-predictable user; ties go to spatial multiplexing.

    ``classes`` marks predictable users (defaults to the CSI matrix's own
    classification); ``dists`` is one gain law or a per-user sequence for
    the non-predictable branch.
    """
    q = queues.q if isinstance(queues, QueueState) else np.asarray(queues, dtype=float)
    entries = _entries_of(csi)
    M = entries.shape[0]
    if classes is None:
        if not isinstance(csi, CsiMatrix):
            raise ConfigError("user classes are required when csi is a bare matrix")
        classes = csi.predictable
    pred = np.asarray(classes, dtype=bool)
    if pred.shape != (q.size,):
        raise ConfigError("need one predictability flag per user")

    pr = np.flatnonzero(pred)
    selected, s_pr, _ = _greedy_users(q, entries, pr, P, N0) if pr.size else ([], 0.0, [])

    best_k, s_npr, best_unit_rate = -1, 0.0, 0.0
    for k in np.flatnonzero(~pred):
        unit, rate = stc_unit_score(_dist_for(dists, k), model, P, M, N0)
        s = q[k] * unit
        if s > s_npr:
            best_k, s_npr, best_unit_rate = int(k), float(s), rate

    if s_npr <= s_pr:
        if selected:
            return _materialize_sm(selected, q, csi, P, N0, back_off)
        return ScoredDecision(SignalingDecision.idle(P), 0.0, IDLE)
    decision = SignalingDecision(STC, (best_k,), np.array([best_unit_rate]), P)
    return ScoredDecision(decision, s_npr, STC)


# ---------------------------------------------------------------------------
# Mismatched proportional-fair baseline
# ---------------------------------------------------------------------------

TBAR_INIT = 1e-3
TBAR_FLOOR = 1e-6


@dataclass
class MismatchedPfsState:
    """Exponentially averaged throughputs of the classical PF scheduler."""

    tbar: np.ndarray
    t_c: float = 1000.0

    def __post_init__(self):
        self.tbar = np.asarray(self.tbar, dtype=float)
        if self.tbar.ndim != 1 or np.any(self.tbar <= 0):
            raise ConfigError("average throughputs must be a positive vector")
        if not self.t_c >= 1:
            raise ConfigError("averaging window t_c must be at least one slot")

    @classmethod
    def fresh(cls, n_users, t_c=1000.0):
        return cls(np.full(int(n_users), TBAR_INIT), float(t_c))

    def updated(self, rates) -> "MismatchedPfsState":
        """Fold one slot of realized rates into the running averages."""
        r = np.asarray(rates, dtype=float)
        tb = (1.0 - 1.0 / self.t_c) * self.tbar + r / self.t_c
        return MismatchedPfsState(np.maximum(tb, TBAR_FLOOR), self.t_c)


def mismatched_pfs_decision(state: MismatchedPfsState, csi, P, N0,
                            raw_gain=False, back_off=1.0) -> ScoredDecision:
    """Classical PF slot decision treating the channel estimates as exact.

    Greedy weighted-sum-rate selection over all users with weights
    1 / tbar_k; allocated rates are the estimated-gain log terms.  With
    ``raw_gain`` the per-user channel norms replace the post-beamforming
    gains in both power allocation and rate bookkeeping.
    """
    entries = _entries_of(csi)
    w = 1.0 / state.tbar
    selected, _, _ = _greedy_users(w, entries, range(w.size), P, N0, raw_gain=raw_gain)
    if not selected:
        return ScoredDecision(SignalingDecision.idle(P), 0.0, IDLE)
    return _materialize_sm(selected, w, csi, P, N0, back_off, raw_gain=raw_gain)


def mismatched_pfs_slot(state: MismatchedPfsState, H, csi, P, N0, model,
                        raw_gain=False, back_off=1.0):
    """One full baseline slot: decide, realize rates against the true
    channel, and update the throughput averages for every user.

    Returns (scored decision, realized rate vector, new state).
    """
    sd = mismatched_pfs_decision(state, csi, P, N0, raw_gain=raw_gain, back_off=back_off)
    n_users = state.tbar.size
    rates = realized_rates(H, sd.decision, model, N0, n_users=n_users)
    return sd, rates, state.updated(rates)

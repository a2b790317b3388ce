import numpy as np
import pytest
from scipy import integrate

from mimosched.analysis import (
    BoundReport,
    drift_constant_C,
    erlang_gain_sampler,
    rate_gap_check,
    resample_gain_sampler,
    solve_beta_star,
    theorem2_bounds,
)
from mimosched.errors import ConfigError
from mimosched.scheduler import UtilitySpec
from mimosched.streams import stream


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


# ---------------------------------------------------------------------------
# Drift constant
# ---------------------------------------------------------------------------

def test_drift_constant_zero_power_exact():
    c, se = drift_constant_C(8, 100.0, 0.0, 1.0, erlang_gain_sampler(4))
    assert c == 8 * 100.0 ** 2 / 2
    assert se == 0.0


def test_drift_constant_floor():
    c, _ = drift_constant_C(8, 100.0, 100.0, 1.0, erlang_gain_sampler(4),
                            rng=stream(501))
    assert c >= 40000.0


def test_drift_constant_matches_quadrature_oracle():
    # E[log2^2(1 + 100 X)], X ~ Exp(1), by adaptive quadrature
    ln2 = np.log(2.0)

    def integrand(x):
        return (np.log1p(100.0 * x) / ln2) ** 2 * np.exp(-x)

    want_term, _ = integrate.quad(integrand, 0.0, np.inf, limit=200)
    c, se = drift_constant_C(1, 1.0, 100.0, 1.0, erlang_gain_sampler(1),
                             n_samples=1_000_000, rng=stream(502))
    got_term = 2.0 * c - 1.0  # invert C = (1/2)(A_max^2 + term)
    assert abs(got_term - want_term) < 8.0 * se
    assert abs(got_term - want_term) / want_term < 1e-3


def test_drift_constant_monotone_in_power_and_cap():
    sampler = erlang_gain_sampler(2)
    cs = [drift_constant_C(4, 10.0, p, 1.0, sampler, rng=stream(503))[0]
          for p in (1.0, 10.0, 100.0)]
    assert cs[0] < cs[1] < cs[2]
    caps = [drift_constant_C(4, a, 10.0, 1.0, sampler, rng=stream(503))[0]
            for a in (1.0, 10.0, 100.0)]
    assert caps[0] < caps[1] < caps[2]


def test_drift_constant_validation():
    with pytest.raises(ConfigError):
        drift_constant_C(0, 1.0, 1.0, 1.0, erlang_gain_sampler(1))
    with pytest.raises(ConfigError):
        drift_constant_C(1, 1.0, 1.0, 1.0, erlang_gain_sampler(1), n_samples=100)


def test_resample_gain_sampler_draws_from_pool():
    pool = np.array([1.0, 2.0, 3.0])
    draws = resample_gain_sampler(pool)(1000, stream(504))
    assert set(np.unique(draws)) <= {1.0, 2.0, 3.0}
    with pytest.raises(ConfigError):
        resample_gain_sampler(np.array([-1.0]))


# ---------------------------------------------------------------------------
# beta*
# ---------------------------------------------------------------------------

def test_beta_star_no_drift_is_one():
    assert solve_beta_star(0.0, 8, 100.0) == 1.0


def test_beta_star_unit_ratio():
    # ln(beta) + 1/beta = 2; root is 0.31784 to five figures
    assert abs(solve_beta_star(800.0, 8, 100.0) - 0.31784) < 1e-4


def test_beta_star_residual_small():
    rng = stream(505)
    for _ in range(20):
        c = 10.0 ** rng.uniform(-3, 6)
        b = solve_beta_star(c, 4, 50.0)
        ratio = c / (4 * 50.0)
        assert 0 < b <= 1
        assert abs(np.log(b) + 1.0 / b - 1.0 - ratio) < 1e-10


def test_beta_star_monotone_nonincreasing():
    grid = np.linspace(0.0, 20.0, 50)
    vals = [solve_beta_star(c * 8 * 100.0, 8, 100.0) for c in grid]
    assert np.all(np.diff(vals) <= 0)
    assert vals[0] == 1.0
    assert vals[-1] > 0


# ---------------------------------------------------------------------------
# Backlog bound
# ---------------------------------------------------------------------------

def test_theorem2_zero_queues_pass():
    u = UtilitySpec.pfs(100.0, 100.0)
    rep = theorem2_bounds(u, np.full(4, 2.0), np.zeros(4), c=1000.0)
    assert rep.holds
    assert not rep.inconclusive
    assert rep.weighted_backlog == 0.0
    assert rep.utility_gap == 10.0
    assert 0 < rep.beta_star <= 1


def test_theorem2_pfs_generic_value():
    u = UtilitySpec.pfs(50.0, 10.0)
    rates = np.array([1.0, 2.0])
    qbar = np.array([3.0, 4.0])
    rep = theorem2_bounds(u, rates, qbar, c=500.0)
    g_cap = 2 * np.log(10.0)
    g_half = np.log(0.5) + np.log(1.0)
    want = (500.0 + 50.0 * (g_cap - g_half)) / 0.5
    assert np.isclose(rep.queue_bound, want, rtol=1e-12)
    assert rep.weighted_backlog == 1.0 * 3.0 + 2.0 * 4.0
    assert rep.holds


def test_theorem2_pfs_zero_rate_inconclusive():
    u = UtilitySpec.pfs(100.0, 100.0)
    rep = theorem2_bounds(u, np.array([2.0, 0.0]), np.array([1.0, 1.0]), c=100.0)
    assert rep.inconclusive
    assert rep.holds
    assert rep.queue_bound == np.inf


def test_theorem2_hfs_form_and_violation():
    u = UtilitySpec.hfs(100.0, 100.0)
    rates = np.array([2.0, 3.0])
    rep = theorem2_bounds(u, rates, np.array([5.0, 5.0]), c=1000.0)
    assert rep.queue_bound == 1000.0 + 100.0 * 2.0
    assert rep.star_bound == rep.queue_bound
    assert rep.holds
    bad = theorem2_bounds(u, rates, np.array([1e6, 1e6]), c=1000.0)
    assert not bad.holds


def test_theorem2_rejects_rates_above_cap():
    u = UtilitySpec.pfs(10.0, 1.0)
    with pytest.raises(ConfigError):
        theorem2_bounds(u, np.array([2.0]), np.array([0.0]), c=10.0)


def test_bound_report_serializes():
    u = UtilitySpec.hfs(10.0, 5.0)
    rep = theorem2_bounds(u, np.array([1.0]), np.array([2.0]), c=50.0,
                          p_over_n0=100.0)
    d = rep.to_dict()
    assert d["kind"] == "hfs"
    assert d["p_over_n0"] == 100.0
    assert isinstance(d["holds"], bool)


def test_bound_report_validation():
    with pytest.raises(ConfigError):
        BoundReport("pfs", 1.0, 1, 1.0, 0.0, -1.0, 0.0, 0.5, 0.5, 0.0,
                    0.0, 1.0, 1.0, True, False)
    with pytest.raises(ConfigError):
        BoundReport("pfs", 1.0, 1, 1.0, 0.0, 1.0, 0.0, 0.5, 2.0, 0.0,
                    0.0, 1.0, 1.0, True, False)


# ---------------------------------------------------------------------------
# Rate-gap bound
# ---------------------------------------------------------------------------

def test_rate_gap_exact_zero_at_full_rank_perfect():
    rng = stream(506)
    A = crandn(rng, 4, 4)
    res = rate_gap_check(A, A[:, 2], 2, 0.0, 100.0, 1.0)
    assert res.delta == 0.0
    assert res.bound == 0.0
    assert res.se == 0.0
    assert res.n_samples == 0
    assert res.holds


def test_rate_gap_additive_term_spot_value():
    rng = stream(507)
    A = crandn(rng, 4, 4)
    h = A[:, 0] + crandn(rng, 4)  # sigma^2 = 1 draw
    res = rate_gap_check(A, h, 0, 1.0, 100.0, 1.0, n_samples=20_000, rng=rng)
    assert abs(res.extra - np.log2(76.0)) < 1e-12
    assert abs(res.extra - 6.25) < 0.01
    assert res.bound == res.theta + res.extra


def test_rate_gap_holds_across_sigma_and_set_sizes():
    rng = stream(508)
    checked = 0
    for sigma2 in (0.0, 0.1, 1.0):
        for u in (2, 3, 4):
            for _ in (0, 1):
                A = crandn(rng, 4, u)
                k = int(rng.integers(u))
                e = crandn(rng, 4) * np.sqrt(sigma2)
                h = A[:, k] + e
                res = rate_gap_check(A, h, k, sigma2, 100.0, 1.0,
                                     n_samples=10_000, rng=rng)
                assert res.holds
                checked += 1
    assert checked == 18


def test_rate_gap_single_user_no_interference():
    rng = stream(509)
    A = crandn(rng, 3, 1)
    h = A[:, 0] + crandn(rng, 3) * np.sqrt(0.5)
    res = rate_gap_check(A, h, 0, 0.5, 10.0, 1.0, n_samples=5000, rng=rng)
    assert res.extra == 0.0
    assert np.isclose(res.delta, res.theta)
    assert res.holds


def test_rate_gap_validation():
    rng = stream(510)
    A = crandn(rng, 2, 2)
    with pytest.raises(ConfigError):
        rate_gap_check(A[:, :0], A[:, 0], 0, 0.1, 1.0, 1.0)
    with pytest.raises(ConfigError):
        rate_gap_check(A, A[:, 0], 2, 0.1, 1.0, 1.0)
    with pytest.raises(ConfigError):
        rate_gap_check(A, A[:, 0], 0, -0.1, 1.0, 1.0)

import json

import numpy as np
import pytest

from mimosched.channel import CsiModel, apply_csi_model, complex_normal, gen_rayleigh_slot
from mimosched.errors import ConfigError
from mimosched.predictor import RlsConfig
from mimosched.scheduler import UtilitySpec
from mimosched.sim import (
    MISMATCHED_PFS,
    NEW_HFS,
    NEW_PFS,
    ChannelSpec,
    CsiSpec,
    ExperimentConfig,
    ScmUserSpec,
    _csi_entries_block,
    aggregate_trials,
    atomic_write_text,
    report_payload,
    run_experiment,
    run_id,
    run_trials,
    snr_sweep,
    trial_seed,
    write_summary_csv,
    write_trace_csv,
)
from mimosched.streams import stream


def vb_models():
    # two users with uninformative CSI, six known exactly
    return (CsiModel.unknown(),) * 2 + (CsiModel.perfect(),) * 6


def small_cfg(policy=NEW_PFS, utility=None, **kw):
    if utility is None:
        utility = UtilitySpec.hfs(100.0, 100.0) if policy == NEW_HFS \
            else UtilitySpec.pfs(100.0, 100.0)
    base = dict(
        m_antennas=2, k_users=3, snr_db=(10.0,), slots=400, policy=policy,
        utility=utility, rate_model="outage", channel=ChannelSpec.rayleigh(),
        csi=CsiSpec.from_models((CsiModel.perfect(), CsiModel.gaussian(0.05),
                                 CsiModel.unknown())),
        seed=5, trials=1,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def scm_cfg(**kw):
    rng = stream(91)
    packed = tuple(0.7 + 0.01 * rng.standard_normal(8))
    spread = lambda: tuple(rng.uniform(-np.pi, np.pi, 8))
    users = (
        ScmUserSpec(aoas=packed, travel_azimuth=0.69, speed=75 / 3.6),
        ScmUserSpec(aoas=spread(), travel_azimuth=4.48, speed=5 / 3.6),
        ScmUserSpec(aoas=spread(), travel_azimuth=4.48, speed=5 / 3.6),
    )
    base = dict(
        m_antennas=2, k_users=3, snr_db=(10.0,), slots=250, policy=NEW_PFS,
        utility=UtilitySpec.pfs(100.0, 100.0), rate_model="outage",
        channel=ChannelSpec.scm(users, slot_symbols=10),
        csi=CsiSpec.predictor(rls=RlsConfig(), threshold=0.1,
                              calibration_slots=1000),
        seed=17, trials=1,
    )
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# Config validation and serialization
# ---------------------------------------------------------------------------

def test_config_rejects_bad_policy():
    with pytest.raises(ConfigError):
        small_cfg(policy="round-robin")


def test_config_policy_utility_coherence():
    with pytest.raises(ConfigError):
        small_cfg(policy=NEW_HFS, utility=UtilitySpec.pfs(10.0, 10.0))
    with pytest.raises(ConfigError):
        small_cfg(policy=NEW_PFS, utility=UtilitySpec.hfs(10.0, 10.0))
    # the baseline ignores the utility, any kind is accepted
    small_cfg(policy=MISMATCHED_PFS, utility=UtilitySpec.hfs(10.0, 10.0))


def test_config_rejects_wrong_model_count():
    with pytest.raises(ConfigError) as err:
        small_cfg(csi=CsiSpec.from_models((CsiModel.perfect(),) * 2))
    assert "csi.models" in str(err.value)


def test_config_rejects_predictor_on_rayleigh():
    with pytest.raises(ConfigError) as err:
        small_cfg(csi=CsiSpec.predictor())
    assert "predictor" in str(err.value)


def test_config_rejects_fixed_models_on_scm():
    cfg = scm_cfg()
    with pytest.raises(ConfigError):
        scm_cfg(csi=CsiSpec.from_models((CsiModel.perfect(),) * 3))
    # sanity: the valid combination constructs
    assert cfg.channel.kind == "scm"


def test_config_rejects_bad_scalars():
    with pytest.raises(ConfigError):
        small_cfg(sm_back_off=0.0)
    with pytest.raises(ConfigError):
        small_cfg(sm_back_off=1.5)
    with pytest.raises(ConfigError):
        small_cfg(slots=0)
    with pytest.raises(ConfigError):
        small_cfg(seed=-1)
    with pytest.raises(ConfigError):
        small_cfg(snr_db=())
    with pytest.raises(ConfigError):
        small_cfg(snr_db=(float("nan"),))
    with pytest.raises(ConfigError):
        scm_cfg(csi=CsiSpec.predictor(calibration_slots=200))


def test_config_roundtrip_rayleigh():
    cfg = small_cfg(snr_db=(0.0, 7.5, 20.0), trials=4, sm_back_off=0.999)
    again = ExperimentConfig.parse(cfg.serialize())
    assert again == cfg


def test_config_roundtrip_scm():
    cfg = scm_cfg(trials=2)
    again = ExperimentConfig.parse(cfg.serialize())
    assert again == cfg
    # serialization is pure JSON
    json.loads(cfg.serialize())


def test_config_rejects_unknown_field():
    d = small_cfg().to_dict()
    d["snr"] = [1.0]
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict(d)
    assert "snr" in str(err.value)


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

def test_trial_seeds_distinct_and_policy_free():
    cfg = small_cfg()
    seeds = {trial_seed(cfg, snr, t) for snr in (0.0, 10.0) for t in range(5)}
    assert len(seeds) == 10
    # the seed keys off (master, snr, trial) only: competing policies see
    # the same channel realizations
    other = small_cfg(policy=MISMATCHED_PFS)
    assert trial_seed(cfg, 10.0, 3) == trial_seed(other, 10.0, 3)
    assert trial_seed(small_cfg(seed=6), 10.0, 3) != trial_seed(cfg, 10.0, 3)


# ---------------------------------------------------------------------------
# Forced-rate bookkeeping
# ---------------------------------------------------------------------------

def test_forced_rates_average():
    cfg = small_cfg(k_users=2, m_antennas=2, slots=2,
                    utility=UtilitySpec.pfs(4.0, 400.0),
                    csi=CsiSpec.from_models((CsiModel.perfect(),) * 2))
    m = run_experiment(cfg, 10.0, forced_rates=np.array([[1.0, 0.0], [3.0, 0.0]]))
    assert np.array_equal(m.ergodic_rates, [2.0, 0.0])
    assert m.sum_rate == 2.0
    assert m.min_rate == 0.0
    assert m.sum_log_rate == -np.inf
    # queue recursion: empty queues admit the cap, then V/Q
    assert np.allclose(m.mean_queues, [200.0, 200.0], rtol=1e-12)
    assert np.allclose(m.final_queues, [400.0 - 3.0 + 0.01, 400.0 + 0.01], rtol=1e-12)
    assert np.allclose(m.admitted_rates, [200.005, 200.005], rtol=1e-12)
    assert m.mode_fractions["idle"] == 1.0
    assert np.array_equal(m.activity_fractions, [0.0, 0.0])


def test_forced_rates_shape_checked():
    cfg = small_cfg(slots=3)
    with pytest.raises(ConfigError):
        run_experiment(cfg, 10.0, forced_rates=np.ones((2, 3)))
    with pytest.raises(ConfigError):
        run_experiment(cfg, 10.0, forced_rates=-np.ones((3, 3)))


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------

def test_run_is_deterministic():
    cfg = small_cfg(slots=300)
    a = run_experiment(cfg, 10.0, 0)
    b = run_experiment(cfg, 10.0, 0)
    assert json.dumps(a.to_dict(), sort_keys=True) == \
        json.dumps(b.to_dict(), sort_keys=True)
    c = run_experiment(cfg, 10.0, 1)
    assert a.sum_rate != c.sum_rate


def test_sum_rate_consistency_and_mode_fractions():
    for policy in (NEW_PFS, NEW_HFS, MISMATCHED_PFS):
        m = run_experiment(small_cfg(policy=policy, slots=500), 10.0)
        assert abs(m.sum_rate - m.ergodic_rates.sum()) < 1e-9
        assert abs(sum(m.mode_fractions.values()) - 1.0) < 1e-12
        assert m.min_rate == m.ergodic_rates.min()
        assert np.all(m.activity_fractions <= 1.0)


def test_first_slot_idles_under_queue_policies():
    # queues start empty, so the queue-driven policies have nothing to send
    m = run_experiment(small_cfg(slots=50), 10.0)
    assert m.mode_fractions["idle"] >= 1.0 / 50


def test_queue_trace_grid():
    cfg = small_cfg(slots=250, trace_stride=100)
    m = run_experiment(cfg, 10.0)
    assert m.trace_slots.tolist() == [0, 100, 200, 250]
    assert m.queue_trace.shape == (4, 3)
    assert np.array_equal(m.queue_trace[0], np.zeros(3))
    assert m.trace_min_avg[0] == 0.0
    # the closing sample is the full-run running minimum, i.e. the min rate
    assert np.isclose(m.trace_min_avg[-1], m.min_rate, rtol=1e-12)
    assert np.array_equal(m.queue_trace[-1], m.final_queues)


def test_sum_rate_increases_with_snr_under_perfect_csi():
    cfg = small_cfg(
        k_users=4, m_antennas=4, slots=2500,
        csi=CsiSpec.from_models((CsiModel.perfect(),) * 4),
        snr_db=(0.0, 10.0, 20.0), seed=3,
    )
    sums = [run_experiment(cfg, s).sum_rate for s in cfg.snr_db]
    assert sums[0] < sums[1] < sums[2]


def test_mismatched_reports_no_queue_state():
    m = run_experiment(small_cfg(policy=MISMATCHED_PFS, slots=200), 10.0)
    assert np.all(m.admitted_rates == 0.0)
    assert np.all(m.mean_queues == 0.0)
    assert m.bound_report is None


def test_new_policy_bound_report_present_and_holds():
    m = run_experiment(small_cfg(slots=2000), 10.0)
    r = m.bound_report
    assert r is not None
    assert r.kind == "pfs"
    assert r.holds
    assert r.weighted_backlog <= r.queue_bound


def test_rate_stability_under_pfs():
    # long-run admitted traffic must be covered by delivered rates
    cfg = small_cfg(slots=30000, seed=9)
    m = run_experiment(cfg, 10.0)
    assert np.all(m.admitted_rates <= m.ergodic_rates + 0.05 * m.admitted_rates)
    # queues are a vanishing fraction of elapsed time
    assert np.max(m.final_queues) / cfg.slots < 0.01 * cfg.utility.a_max


def test_bad_snr_rejected():
    with pytest.raises(ConfigError):
        run_experiment(small_cfg(), float("inf"))


# ---------------------------------------------------------------------------
# CSI block generation agrees with the per-slot reference
# ---------------------------------------------------------------------------

def test_csi_block_matches_reference():
    models = [CsiModel.perfect(), CsiModel.gaussian(0.3), CsiModel.unknown(),
              CsiModel.gaussian(1.0), CsiModel.perfect()]
    H = gen_rayleigh_slot(stream(61), 4, 5)
    rng = stream(62)
    state = rng.bit_generator.state
    want = apply_csi_model(H, models, rng).entries
    replay = np.random.default_rng()
    replay.bit_generator.state = state
    noise = complex_normal(replay, (4, 5))
    got = _csi_entries_block(H.entries[None], models, noise[None])[0]
    assert np.array_equal(got, want)


# ---------------------------------------------------------------------------
# Aggregation and farming
# ---------------------------------------------------------------------------

def test_aggregate_matches_direct_recomputation():
    cfg = small_cfg(slots=300, trials=3)
    ms = run_trials(cfg, 10.0)
    agg = aggregate_trials(ms)
    vals = np.array([m.sum_rate for m in ms])
    assert np.isclose(agg.sum_rate, vals.mean(), rtol=1e-12)
    assert np.isclose(agg.sum_rate_se, vals.std(ddof=1) / np.sqrt(3), rtol=1e-12)
    per_user = np.array([m.ergodic_rates for m in ms])
    assert np.allclose(agg.ergodic_rates, per_user.mean(axis=0), rtol=1e-12)
    assert np.allclose(agg.queue_trace,
                       np.mean([m.queue_trace for m in ms], axis=0), rtol=1e-12)


def test_aggregate_single_trial_zero_se():
    ms = run_trials(small_cfg(slots=200), 10.0)
    agg = aggregate_trials(ms)
    assert agg.n_trials == 1
    assert agg.sum_rate_se == 0.0
    assert np.all(agg.ergodic_rates_se == 0.0)


def test_aggregate_identical_trials_zero_se():
    m = run_experiment(small_cfg(slots=200), 10.0)
    agg = aggregate_trials([m, m, m])
    assert agg.sum_rate_se < 1e-12
    assert np.all(agg.activity_fractions_se < 1e-12)


def test_aggregate_rejects_mixed_cells():
    a = run_experiment(small_cfg(slots=200), 10.0)
    b = run_experiment(small_cfg(policy=MISMATCHED_PFS, slots=200), 10.0)
    with pytest.raises(ConfigError):
        aggregate_trials([a, b])


def test_parallel_trials_identical_to_serial():
    cfg = small_cfg(slots=150, trials=3)
    serial = run_trials(cfg, 10.0, threads=1)
    parallel = run_trials(cfg, 10.0, threads=2)
    for a, b in zip(serial, parallel):
        assert json.dumps(a.to_dict(), sort_keys=True) == \
            json.dumps(b.to_dict(), sort_keys=True)


def test_snr_sweep_shape():
    cfg = small_cfg(snr_db=(0.0, 10.0), slots=200, trials=2)
    rows = snr_sweep(cfg)
    assert [r.snr_db for r in rows] == [0.0, 10.0]
    assert all(r.aggregate.n_trials == 2 for r in rows)
    assert all(len(r.trials) == 2 for r in rows)


# ---------------------------------------------------------------------------
# SCM path
# ---------------------------------------------------------------------------

def test_scm_run_deterministic_and_classified():
    cfg = scm_cfg()
    a = run_experiment(cfg, 10.0)
    b = run_experiment(cfg, 10.0)
    assert json.dumps(a.to_dict(), sort_keys=True) == \
        json.dumps(b.to_dict(), sort_keys=True)
    # slow well-separated users are learnable, the fast packed user is not
    assert a.classes.tolist() == [False, True, True]
    assert abs(a.sum_rate - a.ergodic_rates.sum()) < 1e-9
    assert a.bound_report is not None


def test_scm_mismatched_runs():
    cfg = scm_cfg(policy=MISMATCHED_PFS)
    m = run_experiment(cfg, 10.0)
    assert m.bound_report is None
    assert np.all(np.isfinite(m.ergodic_rates))


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def test_summary_csv_roundtrip(tmp_path):
    cfg = small_cfg(snr_db=(0.0, 10.0), slots=200, trials=2)
    rows = snr_sweep(cfg)
    path = tmp_path / "summary.csv"
    write_summary_csv(path, [r.aggregate for r in rows], cfg.k_users)
    import csv as csvmod
    with open(path) as fh:
        recs = list(csvmod.DictReader(fh))
    assert len(recs) == 2
    assert recs[0]["policy"] == NEW_PFS
    assert float(recs[1]["snr_db"]) == 10.0
    assert float(recs[0]["sum_rate"]) == rows[0].aggregate.sum_rate
    for col in ("sum_log_rate", "min_rate", "activity_3", "rate_1",
                "bound_holds", "sm_fraction"):
        assert col in recs[0]
    # every numeric cell must parse as a plain float (no np.float64 reprs)
    for rec in recs:
        for col, text in rec.items():
            if col not in ("policy", "rate_model", "bound_holds"):
                float(text)
    assert float(recs[0]["activity_3"]) == rows[0].aggregate.activity_fractions[2]


def test_trace_csv_contract(tmp_path):
    m = run_experiment(small_cfg(slots=250), 10.0)
    path = tmp_path / (run_id(m.policy, m.rate_model, m.snr_db, m.trial) + ".csv")
    write_trace_csv(path, m)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "slot,Q_1,Q_2,Q_3,min_avg_rate"
    assert len(lines) == 1 + len(m.trace_slots)
    first = lines[1].split(",")
    assert first[0] == "0"
    assert all(float(v) == 0.0 for v in first[1:-1])


def test_report_payload_json_clean(tmp_path):
    cfg = small_cfg(snr_db=(10.0,), slots=200)
    rows = snr_sweep(cfg)
    payload = report_payload(cfg, rows, assertions=[
        {"name": "demo-check", "passed": True},
    ])
    text = json.dumps(payload, sort_keys=True)
    back = json.loads(text)
    assert back["passed"] is True
    assert back["config"]["policy"] == NEW_PFS
    assert back["results"][0]["trials"] == 1
    # non-finite metrics must not leak into the JSON text
    assert "Infinity" not in text and "NaN" not in text


def test_atomic_write_no_partial_on_missing_dir(tmp_path):
    target = tmp_path / "nope" / "out.csv"
    with pytest.raises(FileNotFoundError):
        atomic_write_text(target, "x")
    assert not target.exists()
    # success leaves exactly the target, no temp droppings
    ok = tmp_path / "ok.csv"
    atomic_write_text(ok, "hello\n")
    assert ok.read_text() == "hello\n"
    assert [p.name for p in tmp_path.iterdir() if p.is_file()] == ["ok.csv"]


def test_run_id_format():
    assert run_id("new-pfs", "outage", 10.0) == "new-pfs_outage_snr10"
    assert run_id("new-hfs", "optimistic", 2.5, 3) == \
        "new-hfs_optimistic_snr2.5_trial3"

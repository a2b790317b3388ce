import json
import os

import pytest

from mimosched.cli import (
    EXIT_ASSERT,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    assemble_cells,
    build_parser,
    execute,
    main,
)
from mimosched.errors import ConfigError
from mimosched.presets import preset_cells
from mimosched.sim import NEW_HFS, NEW_PFS


def parse(argv):
    return build_parser().parse_args(argv)


ALL_PERFECT = {
    "csi": {"kind": "models", "models": [{"kind": "perfect"}] * 8},
}


def test_no_args_usage(capsys):
    assert main([]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_flag(capsys):
    assert main(["--bogus-flag", "1"]) == EXIT_USAGE
    capsys.readouterr()


def test_unknown_preset(capsys):
    assert main(["--preset", "fig9"]) == EXIT_USAGE
    capsys.readouterr()


def test_bad_leaf_value(capsys):
    assert main(["--slots", "many"]) == EXIT_USAGE
    capsys.readouterr()


def test_unknown_policy_name(capsys):
    assert main(["--policy", "round-robin"]) == EXIT_USAGE
    assert "round-robin" in capsys.readouterr().err


def test_unreadable_config_file(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["--config", str(missing)]) == EXIT_IO
    capsys.readouterr()


def test_malformed_config_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["--config", str(bad)]) == EXIT_USAGE
    capsys.readouterr()


def test_unknown_config_field_named(tmp_path, capsys):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"slotts": 10}))
    assert main(["--config", str(f)]) == EXIT_USAGE
    assert "slotts" in capsys.readouterr().err


def test_unknown_nested_field_named(tmp_path, capsys):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"utility": {"vee": 5}}))
    assert main(["--config", str(f)]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "vee" in err and "utility" in err


def test_assemble_single_cell_defaults():
    cells = assemble_cells(parse(["--slots", "50"]))
    assert len(cells) == 1
    slug, cfg = cells[0]
    assert slug == "run"
    assert cfg.slots == 50
    assert cfg.policy == NEW_PFS


def test_assemble_expands_policy_and_model():
    cells = assemble_cells(parse(
        ["--policy", "new-pfs,new-hfs", "--rate-model", "both", "--slots", "10"]
    ))
    assert len(cells) == 4
    slugs = {s for s, _ in cells}
    assert slugs == {"new-pfs_outage", "new-pfs_optimistic",
                     "new-hfs_outage", "new-hfs_optimistic"}
    for _, cfg in cells:
        # utility kind follows the policy when not pinned
        assert cfg.utility.kind == ("hfs" if cfg.policy == NEW_HFS else "pfs")


def test_pinned_utility_kind_conflicts():
    with pytest.raises(ConfigError):
        assemble_cells(parse(
            ["--policy", "new-hfs", "--utility.kind", "pfs", "--slots", "10"]
        ))


def test_k_users_resizes_default_csi():
    cells = assemble_cells(parse(["--k_users", "3", "--slots", "10"]))
    assert len(cells[0][1].csi.models) == 3


def test_file_then_flag_precedence(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"slots": 80, "seed": 9, "trials": 2}))
    cells = assemble_cells(parse(["--config", str(f), "--slots", "60"]))
    cfg = cells[0][1]
    assert cfg.slots == 60  # flag wins
    assert cfg.seed == 9    # file wins over default
    assert cfg.trials == 2


def test_preset_filtering():
    args = parse(["--preset", "fig2-sumrate", "--policy", "new-pfs",
                  "--rate-model", "outage"])
    cells = assemble_cells(args)
    assert [s for s, _ in cells] == ["new-pfs_outage"]
    with pytest.raises(ConfigError):
        assemble_cells(parse(["--preset", "fig4-activity",
                              "--rate-model", "optimistic"]))


def test_preset_flag_overrides_apply_to_all_cells():
    args = parse(["--preset", "fig4-activity", "--slots", "44",
                  "--seed", "5", "--utility.v", "250"])
    cells = assemble_cells(args)
    assert len(cells) == 3
    for _, cfg in cells:
        assert cfg.slots == 44
        assert cfg.seed == 5
        assert cfg.utility.v == 250.0


def test_preset_seed_flag_reaches_builder():
    want = {s: c for s, c in preset_cells("fig1-hfs-V", seed=21)}
    got = dict(assemble_cells(parse(["--preset", "fig1-hfs-V", "--seed", "21"])))
    assert got == want


def test_dotted_flags_cover_nested_leaves():
    args = parse([
        "--slots", "10", "--sm_back_off", "0.5", "--t_c", "500",
        "--utility.a_max", "7", "--csi.pilot_noise_var", "0.02",
        "--csi.rls.order", "4", "--trace-stride", "10",
    ])
    cfg = assemble_cells(args)[0][1]
    assert cfg.sm_back_off == 0.5
    assert cfg.t_c == 500.0
    assert cfg.utility.a_max == 7.0
    assert cfg.trace_stride == 10
    # csi.* flags pin the csi subtree, whose kind stays the default
    assert cfg.csi.pilot_noise_var == 0.02
    assert cfg.csi.rls.order == 4


def test_execute_smoke(tmp_path, capsys):
    code = main([
        "--slots", "100", "--trials", "1", "--k_users", "4",
        "--snr-db", "10", "--out", str(tmp_path / "art"),
    ])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert (tmp_path / "art" / "summary.csv").exists()
    assert (tmp_path / "art" / "report.json").exists()
    assert (tmp_path / "art" / "trace_run_snr10.csv").exists()
    header = (tmp_path / "art" / "summary.csv").read_text().split("\n")[0]
    assert header.startswith("policy,rate_model,snr_db,trials,slots,sum_rate")
    assert "PASS bound:run:snr10" in out
    report = json.loads((tmp_path / "art" / "report.json").read_text())
    assert report["passed"] is True
    assert report["cells"][0]["config"]["slots"] == 100


def test_execute_parallel_matches_serial(tmp_path):
    base = ["--slots", "60", "--trials", "2", "--k_users", "3",
            "--snr-db", "10", "--seed", "3"]
    assert main(base + ["--out", str(tmp_path / "a"), "--threads", "1"]) == EXIT_OK
    assert main(base + ["--out", str(tmp_path / "b"), "--threads", "2"]) == EXIT_OK
    for name in ("summary.csv", "report.json", "trace_run_snr10.csv"):
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes()


def test_out_dir_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("MMS_OUT_DIR", str(tmp_path / "envout"))
    args = parse(["--slots", "10"])
    assert args.out == str(tmp_path / "envout")


def test_unwritable_out_dir(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("file, not a dir")
    target = blocker / "sub"
    code = main(["--slots", "10", "--k_users", "2", "--m_antennas", "2",
                 "--out", str(target)])
    capsys.readouterr()
    assert code == EXIT_IO
    assert not target.exists()
    # nothing partial appeared anywhere under tmp_path
    assert sorted(p.name for p in tmp_path.iterdir()) == ["blocker"]


def test_mixed_k_users_rejected():
    cells = assemble_cells(parse(["--slots", "10", "--k_users", "3"])) + \
        assemble_cells(parse(["--slots", "10", "--k_users", "4"]))
    with pytest.raises(ConfigError):
        execute(cells, "/tmp/never-used", threads=1, echo=lambda *_: None)


def test_ordering_assertion_failure_exits_one(tmp_path, capsys):
    # with exact estimates for everyone the baseline has no handicap, and at
    # this short horizon it edges past the queue-driven HFS cell, which the
    # preset's embedded ordering check must report as a failure
    f = tmp_path / "c.json"
    f.write_text(json.dumps(ALL_PERFECT))
    code = main([
        "--preset", "fig2-sumrate", "--config", str(f),
        "--rate-model", "outage", "--slots", "150", "--trials", "1",
        "--snr-db", "10", "--out", str(tmp_path / "art"),
    ])
    out = capsys.readouterr().out
    assert code == EXIT_ASSERT
    assert "FAIL order:new-hfs_outage>=mismatched:snr10" in out
    report = json.loads((tmp_path / "art" / "report.json").read_text())
    assert report["passed"] is False
    names = {a["name"]: a["passed"] for a in report["assertions"]}
    assert names["order:new-hfs_outage>=mismatched:snr10"] is False


def test_fig4_preset_reduced_run(tmp_path, capsys):
    code = main(["--preset", "fig4-activity", "--slots", "150", "--trials", "1",
                 "--out", str(tmp_path / "art")])
    capsys.readouterr()
    assert code == EXIT_OK
    report = json.loads((tmp_path / "art" / "report.json").read_text())
    names = [a["name"] for a in report["assertions"]]
    assert "order:new-pfs_outage>=mismatched:snr20" in names
    assert "order:new-hfs_outage>=mismatched:snr20" in names
    assert all(a["passed"] for a in report["assertions"])
    # one summary row per cell
    lines = (tmp_path / "art" / "summary.csv").read_text().strip().split("\n")
    assert len(lines) == 1 + 3


def test_fig5_preset_reduced_run(tmp_path, capsys):
    code = main(["--preset", "fig5-scm", "--slots", "50", "--trials", "1",
                 "--snr-db", "20", "--out", str(tmp_path / "art")])
    capsys.readouterr()
    assert code == EXIT_OK
    report = json.loads((tmp_path / "art" / "report.json").read_text())
    assert report["passed"] is True
    assert any(a["name"].startswith("order:new-pfs") for a in report["assertions"])

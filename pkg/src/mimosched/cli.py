"""Command-line front door for the scheduling simulator.

Config assembly is layered: built-in defaults (or a preset's cells), then a
JSON config file, then flags; later layers win.  Every scalar leaf of the
config schema is addressable as a dotted flag (``--utility.v 200``); list-of-
struct fields (per-user CSI models, ray geometries) come from config files or
presets only.  ``--policy`` and ``--rate-model`` accept several values: on a
preset they filter its cells, otherwise they expand the base config into one
cell per combination.

Exit codes: 0 all checks pass, 1 an embedded assertion failed, 2 usage or
config-schema error, 3 filesystem error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError
from .phy import OPTIMISTIC, OUTAGE
from .presets import PRESET_NAMES, preset_cells
from .sim import (
    MISMATCHED_PFS,
    NEW_HFS,
    NEW_PFS,
    POLICIES,
    ExperimentConfig,
    _json_safe,
    atomic_write_text,
    report_payload,
    snr_sweep,
    write_report_json,
    write_summary_csv,
    write_trace_csv,
)

EXIT_OK = 0
EXIT_ASSERT = 1
EXIT_USAGE = 2
EXIT_IO = 3

OUT_DIR_ENV = "MMS_OUT_DIR"


# ---------------------------------------------------------------------------
# Flag registry: one dotted flag per scalar config leaf
# ---------------------------------------------------------------------------

def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _opt_int(s):
    return None if s.lower() in ("none", "null") else int(s)


def _floats(s):
    parts = [p for p in s.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


_LEAVES = [
    ("m_antennas", _int, "transmit antennas M"),
    ("k_users", _int, "number of users K"),
    ("snr_db", _floats, "SNR sweep grid in dB, comma separated"),
    ("slots", _int, "scheduling slots per trial"),
    ("seed", _int, "master seed"),
    ("trials", _int, "independent trials per SNR point"),
    ("t_c", _float, "averaging constant of the baseline scheduler"),
    ("mc_samples", _int, "Monte-Carlo samples for bound constants"),
    ("sm_back_off", _float, "rate back-off factor for multiplexed users"),
    ("trace_stride", _int, "slots between queue-trace samples"),
    ("utility.kind", str, "fairness objective: pfs or hfs"),
    ("utility.v", _float, "utility weight V"),
    ("utility.a_max", _float, "virtual arrival cap A_max"),
    ("channel.kind", str, "channel family: rayleigh or scm"),
    ("channel.slot_symbols", _int, "symbols per slot (scm)"),
    ("csi.kind", str, "CSI source: models or predictor"),
    ("csi.threshold", _float, "prediction-MSE class threshold"),
    ("csi.pilot_noise_var", _float, "pilot observation noise variance"),
    ("csi.calibration_slots", _opt_int, "classification prefix length"),
    ("csi.rls.order", _int, "predictor filter order"),
    ("csi.rls.forgetting", _float, "predictor forgetting factor"),
    ("csi.rls.init_gain", _float, "predictor inverse-correlation init"),
    ("csi.rls.horizon", _int, "prediction lookahead in slots"),
    ("csi.rls.mse_threshold", _float, "default class threshold"),
    ("csi.rls.stats_warmup", _opt_int, "updates skipped before MSE scoring"),
]

_SPECIAL = {"policy", "rate_model", "seed", "snr_db", "slots", "trials"}


def _dest(dotted):
    return "leaf__" + dotted.replace(".", "__")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mimosched",
        description="Run scheduling experiments and write summary/trace/report artifacts.",
    )
    p.add_argument("--config", metavar="PATH", help="JSON config file")
    p.add_argument("--preset", choices=PRESET_NAMES,
                   help="canned multi-cell experiment")
    p.add_argument("--policy", metavar="LIST",
                   help="comma list of schedulers: new-pfs, new-hfs, mismatched-pfs")
    p.add_argument("--rate-model", "--rate_model", dest="rate_model",
                   choices=(OUTAGE, OPTIMISTIC, "both"),
                   help="decoding model for realized rates")
    p.add_argument("--out", metavar="DIR",
                   default=os.environ.get(OUT_DIR_ENV, "out"),
                   help=f"artifact directory (default ${OUT_DIR_ENV} or ./out)")
    p.add_argument("--threads", type=_int, default=os.cpu_count() or 1,
                   help="worker processes for trial farming")
    leaves = p.add_argument_group("config leaves (override file and preset)")
    for dotted, cast, help_text in _LEAVES:
        names = ["--" + dotted]
        dashed = "--" + dotted.replace("_", "-")
        if dashed != names[0]:
            names.append(dashed)
        leaves.add_argument(*names, dest=_dest(dotted), type=cast,
                            default=None, metavar="X", help=help_text)
    return p


# ---------------------------------------------------------------------------
# Config assembly
# ---------------------------------------------------------------------------

_MODEL_KEYS = {"kind", "sigma2", "predictable"}
_SCM_USER_KEYS = {"aoas", "travel_azimuth", "speed", "carrier",
                  "symbol_interval", "antenna_spacing_wavelengths"}


def _check_keys(d, template, path):
    """Reject config-file keys that are not part of the schema."""
    extra = set(d) - set(template)
    if extra:
        where = path or "top level"
        raise ConfigError(f"unknown config fields at {where}: {sorted(extra)}")
    for k, v in d.items():
        ref = template[k]
        sub = f"{path}.{k}" if path else k
        if isinstance(ref, dict) and isinstance(v, dict):
            _check_keys(v, ref, sub)
        elif k == "models" and isinstance(v, list):
            for i, item in enumerate(v):
                if isinstance(item, dict):
                    _check_keys(item, dict.fromkeys(_MODEL_KEYS), f"{sub}[{i}]")
        elif k == "scm_users" and isinstance(v, list):
            for i, item in enumerate(v):
                if isinstance(item, dict):
                    _check_keys(item, dict.fromkeys(_SCM_USER_KEYS), f"{sub}[{i}]")


def _merge(base, override):
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = copy.deepcopy(v)


def _set_path(d, dotted, value):
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def _has_path(d, dotted):
    node = d
    for k in dotted.split("."):
        if not isinstance(node, dict) or k not in node:
            return False
        node = node[k]
    return True


def _load_config_file(path):
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise _IoFailure(f"cannot read config file {path}: {err}") from err
    try:
        d = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    _check_keys(d, ExperimentConfig().to_dict(), "")
    return d


class _IoFailure(Exception):
    pass


def _parse_policies(arg):
    vals = tuple(p for p in arg.replace(",", " ").split() if p)
    if not vals:
        raise ConfigError("--policy needs at least one value")
    for v in vals:
        if v not in POLICIES:
            raise ConfigError(
                f"unknown policy {v!r}; choose from {', '.join(POLICIES)}"
            )
    return vals


def _flag_overrides(args):
    pairs = []
    for dotted, _, _ in _LEAVES:
        val = getattr(args, _dest(dotted))
        if val is not None:
            pairs.append((dotted, val))
    return pairs


def _coerce_utility_kind(cell_dict, touched):
    """Keep the utility kind in lockstep with the policy unless pinned."""
    if touched:
        return
    policy = cell_dict.get("policy")
    if policy == NEW_HFS:
        cell_dict["utility"]["kind"] = "hfs"
    elif policy == NEW_PFS:
        cell_dict["utility"]["kind"] = "pfs"


def assemble_cells(args) -> list[tuple[str, ExperimentConfig]]:
    """Merge defaults/preset, config file, and flags into run cells."""
    file_dict = _load_config_file(args.config) if args.config else {}
    flags = _flag_overrides(args)
    policies = _parse_policies(args.policy) if args.policy else None
    models = None
    if args.rate_model:
        models = (OUTAGE, OPTIMISTIC) if args.rate_model == "both" \
            else (args.rate_model,)
    kind_touched = _has_path(file_dict, "utility.kind") or \
        any(d == "utility.kind" for d, _ in flags)

    if args.preset:
        seed = next((v for d, v in flags if d == "seed"),
                    file_dict.get("seed", 0))
        raw = preset_cells(args.preset, seed=int(seed))
        if policies:
            raw = [(s, c) for s, c in raw if c.policy in policies]
        if models:
            raw = [(s, c) for s, c in raw if c.rate_model in models]
        if not raw:
            raise ConfigError(
                f"preset {args.preset} has no cells matching the "
                "--policy/--rate-model selection"
            )
        cells = []
        for slug, cfg in raw:
            d = cfg.to_dict()
            _merge(d, file_dict)
            for dotted, val in flags:
                _set_path(d, dotted, val)
            _coerce_utility_kind(d, kind_touched)
            cells.append((slug, ExperimentConfig.from_dict(d)))
        return cells

    base = ExperimentConfig().to_dict()
    csi_touched = _has_path(file_dict, "csi") or \
        any(d.startswith("csi.") for d, _ in flags)
    if not csi_touched:
        # let the default CSI (exact estimates for everyone) re-derive its
        # per-user model list from the final k_users
        del base["csi"]
    _merge(base, file_dict)
    for dotted, val in flags:
        _set_path(base, dotted, val)
    policies = policies or (base["policy"],)
    models = models or (base["rate_model"],)
    cells = []
    for policy in policies:
        for model in models:
            d = copy.deepcopy(base)
            d["policy"] = policy
            d["rate_model"] = model
            _coerce_utility_kind(d, kind_touched)
            slug = f"{policy}_{model}" if len(policies) * len(models) > 1 \
                else "run"
            cells.append((slug, ExperimentConfig.from_dict(d)))
    return cells


# ---------------------------------------------------------------------------
# Execution and artifacts
# ---------------------------------------------------------------------------

def _build_assertions(cells, rows_by, include_ordering):
    checks = []
    for slug, cfg in cells:
        if cfg.policy not in (NEW_PFS, NEW_HFS):
            continue
        for snr in cfg.snr_db:
            agg = rows_by[(slug, snr)].aggregate
            holds = agg.bound_holds
            checks.append({
                "name": f"bound:{slug}:snr{snr:g}",
                "passed": holds is not False,
                "value": holds,
            })
    if not include_ordering:
        return checks
    baseline = {}
    for slug, cfg in cells:
        if cfg.policy == MISMATCHED_PFS:
            for snr in cfg.snr_db:
                baseline[(cfg.rate_model, snr)] = \
                    rows_by[(slug, snr)].aggregate.sum_rate
    for slug, cfg in cells:
        if cfg.policy not in (NEW_PFS, NEW_HFS):
            continue
        for snr in cfg.snr_db:
            key = (cfg.rate_model, snr)
            if key not in baseline:
                continue
            sum_rate = rows_by[(slug, snr)].aggregate.sum_rate
            checks.append({
                "name": f"order:{slug}>=mismatched:snr{snr:g}",
                "passed": bool(sum_rate >= baseline[key]),
                "value": sum_rate - baseline[key],
            })
    return checks


def _digest_line(slug, agg):
    bound = {True: "ok", False: "VIOLATED", None: "-"}[agg.bound_holds]
    return (
        f"{slug:<28} snr {agg.snr_db:6g} dB  "
        f"sum {agg.sum_rate:8.3f} +- {agg.sum_rate_se:.3f}  "
        f"sumlog {agg.sum_log_rate:9.3f}  min {agg.min_rate:7.4f}  "
        f"bound {bound}"
    )


def execute(cells, out_dir, threads, include_ordering=False, echo=print) -> int:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        atomic_write_text(probe, "")
        probe.unlink()
    except OSError as err:
        raise _IoFailure(f"output directory {out_dir} is not writable: {err}") from err

    k_users = {cfg.k_users for _, cfg in cells}
    if len(k_users) != 1:
        raise ConfigError("all cells in one invocation must share k_users")

    aggregates = []
    rows_by = {}
    cell_reports = []
    for slug, cfg in cells:
        rows = snr_sweep(cfg, threads=threads)
        payload = report_payload(cfg, rows)
        cell_reports.append({
            "slug": slug,
            "config": payload["config"],
            "results": payload["results"],
        })
        for row in rows:
            rows_by[(slug, row.snr_db)] = row
            aggregates.append(row.aggregate)
            echo(_digest_line(slug, row.aggregate))
    checks = _build_assertions(cells, rows_by, include_ordering)

    try:
        write_summary_csv(out_dir / "summary.csv", aggregates, k_users.pop())
        for slug, cfg in cells:
            for snr in cfg.snr_db:
                name = f"trace_{slug}_snr{snr:g}.csv"
                write_trace_csv(out_dir / name, rows_by[(slug, snr)].aggregate)
        report = _json_safe({
            "cells": cell_reports,
            "assertions": checks,
            "passed": all(c["passed"] for c in checks) if checks else True,
        })
        write_report_json(out_dir / "report.json", report)
    except OSError as err:
        raise _IoFailure(f"failed writing artifacts to {out_dir}: {err}") from err

    failed = [c["name"] for c in checks if not c["passed"]]
    for c in checks:
        echo(("PASS " if c["passed"] else "FAIL ") + c["name"])
    echo(f"artifacts: {out_dir}/summary.csv, report.json, "
         f"{sum(len(cfg.snr_db) for _, cfg in cells)} trace files")
    if failed:
        echo("failing checks: " + ", ".join(failed))
        return EXIT_ASSERT
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code in (0, None) else EXIT_USAGE
    try:
        cells = assemble_cells(args)
        return execute(cells, args.out, max(1, args.threads),
                       include_ordering=bool(args.preset))
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except _IoFailure as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

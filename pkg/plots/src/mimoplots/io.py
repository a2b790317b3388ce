"""Readers for the simulator's CSV contract, with named failures.

``summary.csv``: one row per (policy, rate_model, snr_db) with fixed metric
columns plus per-user groups (``rate_k``, ``activity_k``, ...).
``trace_<slug>_snr<X>.csv``: ``slot, Q_1..Q_K, min_avg_rate``.
"""

from __future__ import annotations

import csv
import re
from importlib import resources
from pathlib import Path


class ContractError(ValueError):
    """The input does not satisfy the published CSV contract."""


# columns every summary consumer may rely on
SUMMARY_COLUMNS = (
    "policy", "rate_model", "snr_db", "trials", "slots",
    "sum_rate", "sum_rate_se", "sum_log_rate", "sum_log_rate_se",
    "min_rate", "min_rate_se", "sm_fraction", "stc_fraction",
    "idle_fraction", "bound_holds",
)
TRACE_COLUMNS = ("slot", "min_avg_rate")

_NUMERIC = {
    "snr_db", "trials", "slots", "sum_rate", "sum_rate_se", "sum_log_rate",
    "sum_log_rate_se", "min_rate", "min_rate_se", "sm_fraction",
    "stc_fraction", "idle_fraction",
}


def _parse_float(text, column, path):
    text = text.strip()
    if text in ("", "None"):
        return float("nan")
    try:
        return float(text)
    except ValueError as err:
        raise ContractError(
            f"{path}: column {column!r} holds non-numeric value {text!r}"
        ) from err


def read_summary(path) -> list[dict]:
    """Summary rows as dicts; metric and per-user columns become floats."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in SUMMARY_COLUMNS if c not in header]
        if missing:
            raise ContractError(
                f"{path}: missing contracted column(s) {', '.join(missing)}"
            )
        per_user = [c for c in header
                    if re.fullmatch(r"(rate|rate_se|activity|activity_se|"
                                    r"admitted|queue|predictable)_\d+", c)]
        if not any(c.startswith("activity_") for c in per_user):
            raise ContractError(f"{path}: missing per-user activity columns")
        rows = []
        for rec in reader:
            row = {"policy": rec["policy"], "rate_model": rec["rate_model"],
                   "bound_holds": rec["bound_holds"]}
            for c in _NUMERIC:
                row[c] = _parse_float(rec[c], c, path)
            for c in per_user:
                row[c] = _parse_float(rec[c], c, path)
            rows.append(row)
    if not rows:
        raise ContractError(f"{path}: no data rows")
    return rows


def user_count(rows) -> int:
    ks = [int(c.split("_")[-1]) for c in rows[0] if re.fullmatch(r"activity_\d+", c)]
    return max(ks)


def read_trace(path) -> dict:
    """Trace columns as float lists: slot, per-user queues, running min rate."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in TRACE_COLUMNS if c not in header]
        if missing:
            raise ContractError(
                f"{path}: missing contracted column(s) {', '.join(missing)}"
            )
        if not any(re.fullmatch(r"Q_\d+", c) for c in header):
            raise ContractError(f"{path}: missing per-user queue columns")
        cols = {c: [] for c in header}
        for rec in reader:
            for c in header:
                cols[c].append(_parse_float(rec[c], c, path))
    if not cols["slot"]:
        raise ContractError(f"{path}: no data rows")
    return cols


def trace_label(path) -> str:
    """Line label from a trace filename: the cell slug."""
    stem = Path(path).stem
    m = re.fullmatch(r"trace_(.+)_snr[-0-9.]+", stem)
    return m.group(1) if m else stem


def find_traces(in_dir) -> list[Path]:
    return sorted(Path(in_dir).glob("trace_*.csv"))


def sample_dir(name) -> Path:
    """Path of a shipped sample artifact directory (fig1/fig2/fig4/fig5)."""
    base = resources.files("mimoplots") / "samples" / name
    p = Path(str(base))
    if not p.is_dir():
        raise ContractError(f"no shipped sample set named {name!r}")
    return p

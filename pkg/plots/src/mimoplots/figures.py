"""The five standard figures, rendered deterministically.

fig1: running minimum average rate vs slot, one line per trace file.
fig2: sum rate vs SNR, one line per (policy, rate model).
fig3: sum log rate vs SNR, one line per (policy, rate model).
fig4: grouped per-user activity fractions, one bar group per user.
fig5: sum rate vs SNR on the ray-channel sweep (same layout as fig2).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import (  # noqa: E402
    ContractError,
    find_traces,
    read_summary,
    read_trace,
    trace_label,
    user_count,
)

FIGURES = (1, 2, 3, 4, 5)
FORMATS = ("png", "svg")

# fixed render parameters so repeated runs are byte-identical
_RC = {
    "figure.figsize": (6.4, 4.2),
    "figure.dpi": 120,
    "savefig.dpi": 120,
    "svg.hashsalt": "mimoplots",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
}

_POLICY_ORDER = ("mismatched-pfs", "new-pfs", "new-hfs")
# bar shades: baseline dark, then progressively lighter for the new policies
_BAR_COLORS = {"mismatched-pfs": "0.1", "new-pfs": "0.6", "new-hfs": "1.0"}
_LINE_STYLES = {"outage": "-", "optimistic": "--"}
_MARKERS = {"mismatched-pfs": "s", "new-pfs": "o", "new-hfs": "^"}


def _save(fig, out_path):
    out_path = Path(out_path)
    fmt = out_path.suffix.lstrip(".").lower()
    if fmt not in FORMATS:
        raise ContractError(f"unsupported output format {fmt!r}")
    meta = {"Date": None} if fmt == "svg" else {"Software": "mimoplots"}
    fig.savefig(out_path, format=fmt, metadata=meta)
    plt.close(fig)


def _series_key(row):
    return (row["policy"], row["rate_model"])


def _sorted_series(rows):
    keys = sorted({_series_key(r) for r in rows},
                  key=lambda pm: (_POLICY_ORDER.index(pm[0])
                                  if pm[0] in _POLICY_ORDER else 99, pm[1]))
    for key in keys:
        sub = sorted((r for r in rows if _series_key(r) == key),
                     key=lambda r: r["snr_db"])
        yield key, sub


def _metric_vs_snr(rows, metric, se_metric, ylabel, title):
    fig, ax = plt.subplots()
    for (policy, model), sub in _sorted_series(rows):
        x = [r["snr_db"] for r in sub]
        y = [r[metric] for r in sub]
        yerr = [r[se_metric] for r in sub]
        ax.errorbar(
            x, y, yerr=yerr, capsize=2,
            linestyle=_LINE_STYLES.get(model, "-"),
            marker=_MARKERS.get(policy, "x"),
            color="k", markerfacecolor="w" if model == "optimistic" else "k",
            label=f"{policy}, {model}",
        )
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def fig1(in_dir, out_path):
    paths = find_traces(in_dir)
    if not paths:
        raise ContractError(f"{in_dir}: no trace_*.csv files")
    fig, ax = plt.subplots()
    styles = ("-", "--", ":", "-.")
    for i, p in enumerate(paths):
        cols = read_trace(p)
        ax.plot(cols["slot"], cols["min_avg_rate"],
                styles[i % len(styles)], color="k", label=trace_label(p))
    ax.set_xlabel("slot")
    ax.set_ylabel("min average rate (bits/channel use)")
    ax.set_title("worst-user average rate convergence")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, out_path)


def fig2(in_dir, out_path):
    rows = read_summary(Path(in_dir) / "summary.csv")
    fig = _metric_vs_snr(rows, "sum_rate", "sum_rate_se",
                         "ergodic sum rate (bits/channel use)",
                         "sum rate vs SNR")
    _save(fig, out_path)


def fig3(in_dir, out_path):
    rows = read_summary(Path(in_dir) / "summary.csv")
    fig = _metric_vs_snr(rows, "sum_log_rate", "sum_log_rate_se",
                         "sum log ergodic rate",
                         "log-utility vs SNR")
    _save(fig, out_path)


def fig4(in_dir, out_path):
    rows = read_summary(Path(in_dir) / "summary.csv")
    snr = max(r["snr_db"] for r in rows)
    at = [r for r in rows if r["snr_db"] == snr]
    if any(r["rate_model"] == "outage" for r in at):
        at = [r for r in at if r["rate_model"] == "outage"]
    policies = [p for p in _POLICY_ORDER if any(r["policy"] == p for r in at)]
    policies += sorted({r["policy"] for r in at} - set(policies))
    k = user_count(rows)
    fig, ax = plt.subplots()
    width = 0.8 / len(policies)
    for i, policy in enumerate(policies):
        row = next(r for r in at if r["policy"] == policy)
        heights = [row[f"activity_{u + 1}"] for u in range(k)]
        xs = [u + (i - (len(policies) - 1) / 2) * width for u in range(k)]
        ax.bar(xs, heights, width=width,
               color=_BAR_COLORS.get(policy, "0.8"), edgecolor="k",
               label=policy)
    ax.set_xticks(range(k))
    ax.set_xticklabels([str(u + 1) for u in range(k)])
    ax.set_xlabel("user")
    ax.set_ylabel("activity fraction")
    ax.set_title(f"per-user activity at {snr:g} dB")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, out_path)


def fig5(in_dir, out_path):
    rows = read_summary(Path(in_dir) / "summary.csv")
    fig = _metric_vs_snr(rows, "sum_rate", "sum_rate_se",
                         "average sum rate (bits/channel use)",
                         "ray-channel sum rate vs SNR")
    _save(fig, out_path)


_RENDERERS = {1: fig1, 2: fig2, 3: fig3, 4: fig4, 5: fig5}


def render(figure, in_dir, out_dir, fmt="png") -> Path:
    """Render one figure from an artifact directory; returns the output path."""
    if figure not in _RENDERERS:
        raise ContractError(f"unknown figure {figure!r}; choose 1-5")
    if fmt not in FORMATS:
        raise ContractError(f"unsupported format {fmt!r}; choose png or svg")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"fig{figure}.{fmt}"
    with matplotlib.rc_context(_RC):
        _RENDERERS[figure](in_dir, out_path)
    return out_path

"""Canned experiment definitions for the standard figure-style sweeps.

Each preset expands to a list of (slug, ExperimentConfig) cells sharing one
master seed, so competing policies inside a preset face identical channel
draws.  Slugs tag per-cell artifacts (trace files, report entries) and are
unique within a preset.  Slot and trial counts are desk-scale defaults; the
command line can override them uniformly across cells.
"""

from __future__ import annotations

from dataclasses import replace

from .channel import CsiModel
from .errors import ConfigError
from .predictor import RlsConfig
from .scheduler import UtilitySpec
from .sim import (
    MISMATCHED_PFS,
    NEW_HFS,
    NEW_PFS,
    OPTIMISTIC,
    OUTAGE,
    ChannelSpec,
    CsiSpec,
    ExperimentConfig,
    ScmUserSpec,
)

# Link-level constants for the sum-of-sinusoids runs: one OFDM subcarrier at
# 15 kHz symbol rate, 2.6 GHz carrier, pilots every 20 symbols, prediction
# blocks of 200 pilots.
SYMBOL_RATE_HZ = 15e3
CARRIER_HZ = 2.6e9
PILOT_BLOCK = 200
SLOT_SYMBOLS = 20

HIGH_SPEED_KMH = 75.0
LOW_SPEED_KMH = 5.0

# Ray angles of arrival (radians) for the two reference geometries, and the
# matching mobile travel azimuths.
SEPARATED_AOAS = (
    4.8328, 5.2210, 5.4479, 5.6090, 5.7340, 5.8360, 5.9223, 5.9970,
    6.0629, 6.1219, 6.1765, 6.2356, 6.3015, 6.3762, 6.4625, 6.5644,
    6.6895, 6.8505, 7.0774, 7.4657,
)
SEPARATED_TRAVEL_AZIMUTH = 4.4780
PACKED_AOAS = (
    3.7263, 3.6717, 3.7854, 3.6127, 3.8513, 3.5468, 3.9260, 3.4721,
    4.0123, 3.3858, 4.1142, 3.2838, 4.2393, 3.1588, 4.4003, 2.9977,
    4.6272, 2.7708, 5.0155, 2.3826,
)
PACKED_TRAVEL_AZIMUTH = 0.6939

PRESET_NAMES = (
    "fig1-hfs-V", "fig2-sumrate", "fig3-sumlog", "fig4-activity", "fig5-scm",
)

_V_DEFAULT = 100.0
_A_MAX_DEFAULT = 100.0


def kmh_to_mps(v: float) -> float:
    return v * 1000.0 / 3600.0


def scm_user(aoas, travel_azimuth, speed_kmh) -> ScmUserSpec:
    """A mobile with the standard link parameters and the given geometry."""
    return ScmUserSpec(
        aoas=tuple(aoas),
        travel_azimuth=travel_azimuth,
        speed=kmh_to_mps(speed_kmh),
        carrier=CARRIER_HZ,
        symbol_interval=1.0 / SYMBOL_RATE_HZ,
    )


def block_rls() -> RlsConfig:
    """Predictor tuned to the pilot-block length.

    The exponential RLS window 1/(1 - forgetting) is matched to the
    prediction block of PILOT_BLOCK pilot symbols.
    """
    return RlsConfig(order=8, forgetting=1.0 - 1.0 / PILOT_BLOCK)


def _utility(policy: str) -> UtilitySpec:
    if policy == NEW_HFS:
        return UtilitySpec.hfs(_V_DEFAULT, _A_MAX_DEFAULT)
    return UtilitySpec.pfs(_V_DEFAULT, _A_MAX_DEFAULT)


def _two_unknown_csi(k_users: int) -> CsiSpec:
    models = (CsiModel.unknown(),) * 2 + (CsiModel.perfect(),) * (k_users - 2)
    return CsiSpec.from_models(models)


def _rayleigh_cell(policy, rate_model, snr_db, slots, trials, seed):
    return ExperimentConfig(
        m_antennas=4, k_users=8, snr_db=snr_db, slots=slots, policy=policy,
        utility=_utility(policy), rate_model=rate_model,
        channel=ChannelSpec.rayleigh(), csi=_two_unknown_csi(8),
        seed=seed, trials=trials,
    )


def _rayleigh_matrix(snr_db, slots, trials, seed, rate_models):
    cells = []
    for policy in (NEW_PFS, NEW_HFS, MISMATCHED_PFS):
        for model in rate_models:
            cells.append((f"{policy}_{model}",
                          _rayleigh_cell(policy, model, snr_db, slots, trials,
                                         seed)))
    return cells


def _fig1(seed):
    cells = []
    for v in (100.0, 1000.0):
        cfg = ExperimentConfig(
            m_antennas=4, k_users=8, snr_db=(10.0,), slots=50000,
            policy=NEW_HFS, utility=UtilitySpec.hfs(v, _A_MAX_DEFAULT),
            rate_model=OUTAGE, channel=ChannelSpec.rayleigh(),
            csi=_two_unknown_csi(8), seed=seed, trials=1, trace_stride=100,
        )
        cells.append((f"V{v:g}", cfg))
    return cells


def _fig2(seed):
    return _rayleigh_matrix((0.0, 5.0, 10.0, 15.0, 20.0), 4000, 3, seed,
                            (OUTAGE, OPTIMISTIC))


def _fig4(seed):
    return _rayleigh_matrix((20.0,), 4000, 3, seed, (OUTAGE,))


def _fig5(seed):
    users = tuple(
        scm_user(PACKED_AOAS, PACKED_TRAVEL_AZIMUTH, HIGH_SPEED_KMH)
        for _ in range(2)
    ) + tuple(
        scm_user(SEPARATED_AOAS, SEPARATED_TRAVEL_AZIMUTH, HIGH_SPEED_KMH)
        for _ in range(6)
    )
    cells = []
    for policy in (NEW_PFS, MISMATCHED_PFS):
        # outage accounting: when the baseline beams on stale forecasts its
        # allocations overshoot the realized mutual information, which is
        # the penalty this comparison exists to expose
        cfg = ExperimentConfig(
            m_antennas=4, k_users=8, snr_db=(5.0, 10.0, 20.0), slots=3000,
            policy=policy, utility=_utility(policy), rate_model=OUTAGE,
            channel=ChannelSpec.scm(users, slot_symbols=SLOT_SYMBOLS),
            csi=CsiSpec.predictor(rls=block_rls(), calibration_slots=1000),
            seed=seed, trials=2,
        )
        cells.append((policy, cfg))
    return cells


_BUILDERS = {
    "fig1-hfs-V": _fig1,
    "fig2-sumrate": _fig2,
    "fig3-sumlog": _fig2,  # same sweep, a different column is plotted
    "fig4-activity": _fig4,
    "fig5-scm": _fig5,
}


def preset_cells(name: str, seed: int = 0) -> list[tuple[str, ExperimentConfig]]:
    """Expand a preset name into its (slug, config) cells."""
    if name not in _BUILDERS:
        raise ConfigError(
            f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}"
        )
    return _BUILDERS[name](seed)


def override_cells(cells, **changes):
    """Apply uniform field overrides to every cell of a preset."""
    return [(slug, replace(cfg, **changes)) for slug, cfg in cells]

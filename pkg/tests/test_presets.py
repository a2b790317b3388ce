import numpy as np
import pytest

from mimosched.errors import ConfigError
from mimosched.presets import (
    CARRIER_HZ,
    PACKED_AOAS,
    PACKED_TRAVEL_AZIMUTH,
    PILOT_BLOCK,
    PRESET_NAMES,
    SEPARATED_AOAS,
    SEPARATED_TRAVEL_AZIMUTH,
    SLOT_SYMBOLS,
    SYMBOL_RATE_HZ,
    block_rls,
    kmh_to_mps,
    override_cells,
    preset_cells,
)
from mimosched.sim import MISMATCHED_PFS, NEW_HFS, NEW_PFS


def test_every_preset_expands_with_unique_slugs():
    for name in PRESET_NAMES:
        cells = preset_cells(name, seed=11)
        assert cells
        slugs = [s for s, _ in cells]
        assert len(set(slugs)) == len(slugs)
        for _, cfg in cells:
            assert cfg.seed == 11
            assert cfg.m_antennas == 4
            assert cfg.k_users == 8


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError) as err:
        preset_cells("fig9")
    assert "fig9" in str(err.value)


def test_fig1_variants():
    cells = dict(preset_cells("fig1-hfs-V"))
    assert set(cells) == {"V100", "V1000"}
    for slug, v in (("V100", 100.0), ("V1000", 1000.0)):
        cfg = cells[slug]
        assert cfg.policy == NEW_HFS
        assert cfg.utility.kind == "hfs"
        assert cfg.utility.v == v
        assert cfg.utility.a_max == 100.0
        assert cfg.rate_model == "outage"
        assert cfg.snr_db == (10.0,)


def test_fig2_matrix():
    cells = preset_cells("fig2-sumrate")
    assert len(cells) == 6
    combos = {(c.policy, c.rate_model) for _, c in cells}
    assert combos == {
        (p, m) for p in (NEW_PFS, NEW_HFS, MISMATCHED_PFS)
        for m in ("outage", "optimistic")
    }
    for _, cfg in cells:
        assert cfg.snr_db == (0.0, 5.0, 10.0, 15.0, 20.0)
        kinds = [m.kind for m in cfg.csi.models]
        assert kinds == ["unknown"] * 2 + ["perfect"] * 6
        assert cfg.channel.kind == "rayleigh"


def test_fig3_same_sweep_as_fig2():
    assert preset_cells("fig3-sumlog", seed=4) == preset_cells("fig2-sumrate", seed=4)


def test_fig4_single_snr_outage():
    cells = preset_cells("fig4-activity")
    assert {c.policy for _, c in cells} == {NEW_PFS, NEW_HFS, MISMATCHED_PFS}
    for _, cfg in cells:
        assert cfg.snr_db == (20.0,)
        assert cfg.rate_model == "outage"


def test_fig5_geometry():
    cells = dict(preset_cells("fig5-scm"))
    assert set(cells) == {NEW_PFS, MISMATCHED_PFS}
    for cfg in cells.values():
        assert cfg.channel.kind == "scm"
        assert cfg.channel.slot_symbols == SLOT_SYMBOLS == 20
        assert cfg.csi.kind == "predictor"
        assert cfg.rate_model == "outage"
        users = cfg.channel.scm_users
        assert len(users) == 8
        for u in users[:2]:
            assert u.aoas == PACKED_AOAS
            assert u.travel_azimuth == PACKED_TRAVEL_AZIMUTH
        for u in users[2:]:
            assert u.aoas == SEPARATED_AOAS
            assert u.travel_azimuth == SEPARATED_TRAVEL_AZIMUTH
        for u in users:
            assert np.isclose(u.speed, kmh_to_mps(75.0))
            assert u.carrier == CARRIER_HZ == 2.6e9
            assert np.isclose(u.symbol_interval, 1.0 / SYMBOL_RATE_HZ)
            assert np.isclose(1.0 / u.symbol_interval, 15e3)


def test_aoa_tables_shape():
    assert len(SEPARATED_AOAS) == 20
    assert len(PACKED_AOAS) == 20
    # separated angles are strictly increasing and span a wide arc
    assert all(a < b for a, b in zip(SEPARATED_AOAS, SEPARATED_AOAS[1:]))
    assert SEPARATED_AOAS[-1] - SEPARATED_AOAS[0] > 2.0
    # packed angles alternate around a narrow cluster
    assert max(PACKED_AOAS) - min(PACKED_AOAS) < 2.7


def test_block_rls_window():
    rls = block_rls()
    assert np.isclose(1.0 / (1.0 - rls.forgetting), PILOT_BLOCK)
    assert PILOT_BLOCK == 200


def test_kmh_conversion():
    assert np.isclose(kmh_to_mps(75.0), 75000.0 / 3600.0)
    assert np.isclose(kmh_to_mps(3.6), 1.0)


def test_override_cells():
    cells = override_cells(preset_cells("fig4-activity"), slots=123, trials=2)
    for _, cfg in cells:
        assert cfg.slots == 123
        assert cfg.trials == 2

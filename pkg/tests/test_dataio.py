import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from resolveq import (
    DeviceRecord,
    GapFrequencyTable,
    UnitTagError,
    ValidationError,
    builtin_fixtures,
    builtin_participation,
    infer_gap,
    load_device,
    save_device,
)
from resolveq.dataio import (
    builtin_gap_table,
    device_from_dict,
    device_to_dict,
    fixture_names,
    load_frequencies,
    load_gap_table,
    load_loss_vector,
    load_mode_catalog,
    read_quantity,
)
from resolveq.extraction import _rank_check

C_SQRT = 3.2e9 * np.sqrt(100e-6)  # f = c / sqrt(g), 3.2 GHz at 100 um
GAPS = np.linspace(40e-6, 200e-6, 17)


def sqrt_table(extra=None):
    modes = {"DFM": (GAPS, C_SQRT / np.sqrt(GAPS))}
    modes.update(extra or {})
    return GapFrequencyTable(modes, "closed form", synthetic=True)


def test_f4_first_row():
    rec = load_device("fixtures://F4")
    assert len(rec.modes) == 3
    assert tuple(rec.participation.rows[0].as_array()) == (0.28, 3.8e-6, 2.7e-4)
    assert rec.modes[0].q_int == 0.45e6
    assert rec.modes[0].frequency == 5.858e9
    assert rec.gap == pytest.approx(100e-6)


def test_e3eb_te011():
    rec = load_device("fixtures://E3(eb)")
    (te011,) = [m for m in rec.modes if m.label == "TE011"]
    assert te011.q_int == pytest.approx(8.63e8, rel=1e-12)


def test_e4sp_te011():
    rec = load_device("fixtures://E4sp")
    (te011,) = [m for m in rec.modes if m.label == "TE011"]
    assert te011.q_int == pytest.approx(4.24e8, rel=1e-12)


def test_fixture_count_and_cav2_eps(fixtures):
    assert len(builtin_fixtures()) == 16
    assert sum(r.geometry == "fwgmr" for r in fixtures.values()) == 9
    assert sum(r.geometry == "ellipsoidal" for r in fixtures.values()) == 7
    eps = {m.label: m.q_int_rel_sigma for m in fixtures["F3"].modes}
    assert eps.pop("CAV-2") == 0.2
    assert set(eps.values()) == {0.05}


def test_all_fixtures_full_rank(fixtures):
    for rec in fixtures.values():
        matrix = rec.participation.as_array()
        sigma = np.array([m.loss_rate_sigma for m in rec.modes])
        _rank_check(matrix / sigma[:, None], rec.labels, 1e-10)


def test_canonical_matrices_and_catalogs():
    assert builtin_participation("P_FWGMR").labels == ("DWGM-1", "DFM-2", "CWGM-1")
    assert builtin_participation("P_ellip").labels == ("SEAM", "NON-SEAM", "COND")
    catalog = load_mode_catalog("fixtures://fwgmr_modes")
    assert all(m.p_diel is not None for m in catalog)
    assert len(load_mode_catalog("fixtures://ellip_modes")) == 8


def test_round_trip_is_bit_exact(tmp_path, fixtures):
    for rec in fixtures.values():
        path = tmp_path / "device.json"
        save_device(rec, path)
        again = load_device(path)
        assert again == rec
        assert device_to_dict(again) == device_to_dict(rec)


def _f4_doc():
    from resolveq.dataio import read_json

    return read_json("fixtures://F4")


def test_empty_modes_rejected():
    doc = _f4_doc()
    doc["modes"] = []
    with pytest.raises(ValidationError):
        device_from_dict(doc)


def test_missing_unit_tag():
    doc = _f4_doc()
    doc["modes"][1]["freq"] = doc["modes"][1].pop("freq_ghz")
    with pytest.raises(UnitTagError, match=r"modes\[1\]"):
        device_from_dict(doc)
    doc = _f4_doc()
    del doc["modes"][0]["q_int_1e6"]
    with pytest.raises(UnitTagError):
        device_from_dict(doc)


def test_unit_conversions():
    assert read_quantity({"r_s_nohm": 7.0}, "r_s", "x") == pytest.approx(7e-9)
    assert read_quantity({"freq_mhz": 5.0}, "freq", "x") == pytest.approx(5e6)
    with pytest.raises(UnitTagError):
        read_quantity({"r_s_furlong": 1.0}, "r_s", "x")
    with pytest.raises(ValidationError):
        read_quantity({"r_s_ohm": 1.0, "r_s_uohm": 1.0}, "r_s", "x")
    with pytest.raises(ValidationError):
        read_quantity({"r_s_ohm": "1"}, "r_s", "x")


def test_duplicate_labels_rejected():
    doc = _f4_doc()
    doc["modes"][1]["label"] = doc["modes"][0]["label"]
    with pytest.raises(ValidationError):
        device_from_dict(doc)


def test_reported_bounds_parse(fixtures):
    e1 = fixtures["E1"].reported
    assert e1["tan_delta"].upper_bound and e1["tan_delta"].value == pytest.approx(0.14)
    assert not e1["r_s"].upper_bound


def test_fixture_uri_forms():
    assert load_device("fixtures://E4(eb)") == load_device("fixtures://e4eb")
    assert "P_FWGMR" in fixture_names()
    with pytest.raises(FileNotFoundError):
        load_device("fixtures://nope")
    with pytest.raises(FileNotFoundError):
        load_device("/nonexistent/device.json")


def test_loss_vector_and_frequencies(tmp_path):
    (tmp_path / "x.json").write_text(json.dumps({"r_s_nohm": 500, "tan_delta": 0.033, "r_seam_uohm_m": 26}))
    x = load_loss_vector(tmp_path / "x.json")
    assert x.as_array() == pytest.approx([5e-7, 0.033, 2.6e-5])
    freqs = load_frequencies("fixtures://F4")
    assert freqs[0] == ("DWGM-1", 5.858e9)


def test_with_eps_y(fixtures):
    rec = fixtures["F3"].with_eps_y(0.1)
    assert {m.q_int_rel_sigma for m in rec.modes} == {0.1}
    rec = fixtures["F4"].with_eps_y({"DFM-2": 0.3})
    assert [m.q_int_rel_sigma for m in rec.modes] == [0.05, 0.3, 0.05]
    with pytest.raises(ValidationError):
        fixtures["F4"].with_eps_y({"XYZ": 0.3})


# -- gap inference ---------------------------------------------------------------

def test_node_is_exact():
    table = builtin_gap_table()
    gaps, _ = table.modes["DFM-2"]
    g = gaps[11]
    measured = [(label, float(table.modes[label][1][11])) for label in ("DFM-1", "DFM-2", "DWGM-1")]
    result = infer_gap(table, measured)
    assert result.gap == g
    assert all(m == 0 for m in result.mismatch.values())
    assert not result.flagged


@given(st.floats(45e-6, 195e-6))
def test_sqrt_table_interior_recovery(gap):
    result = infer_gap(sqrt_table(), [("DFM", C_SQRT / np.sqrt(gap))])
    assert result.gap == pytest.approx(gap, rel=0.005)


def test_sqrt_table_at_100um():
    result = infer_gap(sqrt_table(), [("DFM", C_SQRT / np.sqrt(100e-6))])
    assert result.gap == pytest.approx(100e-6, rel=0.005)


def test_flat_mode_only_is_rejected():
    table = sqrt_table({"FLAT": (GAPS, np.full_like(GAPS, 10.87e9))})
    with pytest.raises(ValidationError, match="gap-sensitive"):
        infer_gap(table, [("FLAT", 10.87e9)])


def test_out_of_range_and_unknown():
    with pytest.raises(ValidationError):
        infer_gap(sqrt_table(), [("DFM", 1e9)])
    with pytest.raises(ValidationError):
        infer_gap(sqrt_table(), [("NOPE", 5e9)])


def test_continuity_under_small_perturbation():
    table = builtin_gap_table()
    spacing = np.diff(table.modes["DFM-2"][0]).max()
    truth = 87e-6
    base = [(label, float(table.interpolator(label)(truth))) for label in ("DFM-1", "DFM-2")]
    previous = infer_gap(table, base).gap
    for delta in np.linspace(0, 0.01, 41)[1:]:
        gap = infer_gap(table, [(label, f * (1 + delta)) for label, f in base]).gap
        assert abs(gap - previous) < spacing
        previous = gap


@pytest.mark.parametrize("error, flagged", [(0.0, False), (0.02, False), (0.049, False),
                                            (0.051, True), (0.08, True)])
def test_flag_tracks_injected_model_error(error, flagged):
    truth = 120e-6
    flat = np.full_like(GAPS, 10.0e9)
    # the model (table) for the gap-insensitive mode is off by `error`
    table = sqrt_table({"CWGM": (GAPS, flat * (1 - error))})
    measured = [("DFM", C_SQRT / np.sqrt(truth)), ("CWGM", 10.0e9)]
    result = infer_gap(table, measured)
    assert result.gap == pytest.approx(truth, rel=0.005)
    assert result.mismatch["CWGM"] == pytest.approx(error, abs=1e-12)
    assert result.flagged is flagged


def test_gap_table_validation():
    with pytest.raises(ValidationError):
        GapFrequencyTable({"A": ([1e-4], [5e9])})
    with pytest.raises(ValidationError):
        GapFrequencyTable({"A": ([2e-4, 1e-4], [5e9, 6e9])})
    with pytest.raises(ValidationError):
        GapFrequencyTable({"A": ([1e-4, 2e-4], [5e9, -6e9])})


def test_bundled_gap_table_is_labelled_synthetic(tmp_path):
    table = builtin_gap_table()
    assert table.synthetic
    assert "SYNTHETIC" in table.description
    path = tmp_path / "t.json"
    path.write_text(json.dumps(table.to_dict()))
    again = load_gap_table(path)
    for label, (g, f) in table.modes.items():
        assert np.array_equal(again.modes[label][0], g)
        assert np.array_equal(again.modes[label][1], f)

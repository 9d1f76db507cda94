# tests/test_demand_service.py
import numpy as np
import pytest

from services.demand_service import DemandService
from utils.errors import DemandDataError, PreconditionError


def loaded_buses(network):
    return np.abs(network.base_demand) > 0


def test_synthetic_mean_and_ratio_are_exact(case14):
    demand = DemandService.synthesize(case14, 96, 0.1, seed=4)
    assert demand.shape == (96, 14)
    on = loaded_buses(case14)
    mag = np.abs(demand[:, on])
    np.testing.assert_allclose(mag.mean(axis=0), np.abs(case14.base_demand[on]), rtol=1e-10)
    np.testing.assert_allclose(mag.std(axis=0) / mag.mean(axis=0), 0.1, rtol=1e-8)
    np.testing.assert_array_equal(demand[:, ~on], 0.0)


def test_synthetic_keeps_power_factor(case14):
    demand = DemandService.synthesize(case14, 48, [0.05 * (i % 3) for i in range(14)], seed=1)
    base = case14.base_demand
    with_p = base.real > 0
    np.testing.assert_allclose(demand[:, with_p].imag / demand[:, with_p].real,
                               np.broadcast_to(base[with_p].imag / base[with_p].real, (48, with_p.sum())),
                               rtol=1e-10)
    assert np.all(demand[:, with_p].real > 0)


def test_synthetic_is_seeded(case3_uc):
    a = DemandService.synthesize(case3_uc, 24, 0.2, seed=8)
    np.testing.assert_array_equal(a, DemandService.synthesize(case3_uc, 24, 0.2, seed=8))
    assert not np.array_equal(a, DemandService.synthesize(case3_uc, 24, 0.2, seed=9))


def test_synthetic_preconditions(case3_uc):
    with pytest.raises(PreconditionError):
        DemandService.synthesize(case3_uc, 1, 0.1, seed=0)
    with pytest.raises(PreconditionError):
        DemandService.synthesize(case3_uc, 24, -0.1, seed=0)


def test_unreachable_ratio_is_clipped(case3_uc, caplog):
    demand = DemandService.synthesize(case3_uc, 48, 5.0, seed=2)
    assert np.all(demand[:, 1:].real > 0)
    assert "clipped" in caplog.text


def test_split_is_chronological():
    matrix = np.arange(10)[:, None] * np.ones((1, 3))
    train, test = DemandService.split(matrix, 0.75)
    assert train.shape == (8, 3) and test.shape == (2, 3)
    np.testing.assert_array_equal(np.vstack([train, test]), matrix)
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(PreconditionError):
            DemandService.split(matrix, bad)


def test_split_keeps_both_parts_non_empty():
    matrix = np.arange(10)[:, None] * np.ones((1, 3))
    train, test = DemandService.split(matrix, 0.96)
    assert train.shape[0] == 9 and test.shape[0] == 1
    train, test = DemandService.split(matrix, 0.01)
    assert train.shape[0] == 1 and test.shape[0] == 9
    train, test = DemandService.split(matrix[:2], 0.5)
    assert train.shape[0] == 1 and test.shape[0] == 1
    with pytest.raises(PreconditionError):
        DemandService.split(matrix[:1], 0.5)


def test_mw_trace_to_per_unit(case3_uc, tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text("# hourly MW\n1,2,3\n0,10,90\n0,20,45\n")
    demand = DemandService.load_csv(path, case3_uc)
    np.testing.assert_allclose(demand.real, [[0.0, 0.1, 0.9], [0.0, 0.2, 0.45]])
    # base power factors: 5/10 on bus 2 and 30/90 on bus 3
    np.testing.assert_allclose(demand.imag[:, 1:], [[0.05, 0.3], [0.1, 0.15]])


def test_bad_cell_reports_row_and_column(case3_uc, tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text("1,2,3\n0,10,90\n0,abc,45\n")
    with pytest.raises(DemandDataError) as e:
        DemandService.load_csv(path, case3_uc)
    assert e.value.row == 2
    assert e.value.column == "2"


def test_missing_bus_column(case3_uc, tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text("1,3\n0,90\n")
    with pytest.raises(DemandDataError) as e:
        DemandService.load_csv(path, case3_uc)
    assert e.value.column == "2"
    with pytest.raises(DemandDataError):
        DemandService.load_csv(tmp_path / "absent.csv", case3_uc)


def test_saved_demand_loads_back(case14, tmp_path):
    demand = DemandService.synthesize(case14, 12, 0.1, seed=3)
    path = DemandService.save_demand(tmp_path / "d.csv", demand, case14, seed=3)
    assert path.read_text().startswith("# seed=3")
    np.testing.assert_allclose(DemandService.load_demand(path, case14), demand, rtol=1e-14)


def test_ratios_from_trace(case3_uc, tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text("1,2,3\n0,10,80\n0,30,120\n")
    np.testing.assert_allclose(DemandService.ratios_from_csv(path, case3_uc), [0.0, 0.5, 0.2])


def test_generator_setpoints(case3_two_units, case3_uc, tmp_path):
    path = tmp_path / "setpoints.csv"
    path.write_text("bus,p,q\n2,60,10\n")
    S_g = DemandService.load_setpoints(path, case3_uc)
    np.testing.assert_allclose(S_g, [0.6 + 0.1j])
    # unlisted units keep the case-file values
    partial = DemandService.load_setpoints(path, case3_two_units)
    assert partial.shape == (case3_two_units.n_commit,)
    assert 0.6 + 0.1j in partial
    path.write_text("bus,p\n2,60\n")
    with pytest.raises(DemandDataError) as e:
        DemandService.load_setpoints(path, case3_uc)
    assert e.value.column == "q"

# tests/test_grid_service.py
import numpy as np
import pytest

from services.grid_service import GridService
from services.oracle_service import OracleService
from utils.errors import CaseSemanticError, CaseSyntaxError, SingularBranchError

HEADER = "function mpc = t\nmpc.baseMVA = 100;\n"
BUS_ROWS = (
    "mpc.bus = [\n"
    "1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;\n"
    "2 1 20 10 0 0 1 1 0 0 1 1.1 0.9;\n"
    "];\n"
)
GEN_ROWS = "mpc.gen = [\n1 0 0 50 -50 1 100 1 100 0;\n];\n"
BRANCH_ROWS = "mpc.branch = [\n1 2 0.01 0.1 0 0 0 0 0 0 1;\n];\n"


def build(bus=BUS_ROWS, gen=GEN_ROWS, branch=BRANCH_ROWS, extra=""):
    return HEADER + bus + gen + branch + extra


@pytest.mark.parametrize("fixture", ["case14", "case30", "case3_uc"])
def test_admittance_matches_incidence_assembly(fixture, request):
    network = request.getfixturevalue(fixture)
    Y_ref = OracleService.assemble_ybus(network.case)
    np.testing.assert_allclose(network.adm.Y, Y_ref, atol=1e-12)


def test_rows_sum_to_zero_without_shunts(two_bus):
    np.testing.assert_allclose(two_bus.adm.Y.sum(axis=1), 0.0, atol=1e-12)


def test_symmetric_without_phase_shifters(case14):
    np.testing.assert_allclose(case14.adm.Y, case14.adm.Y.T, atol=1e-12)


def test_reduced_system_layout(case14):
    adm = case14.adm
    assert adm.Y_reduced.shape == (13, 13)
    np.testing.assert_array_equal(adm.y_slack, adm.Y[adm.non_slack, adm.slack_index])
    assert adm.slack_index not in adm.non_slack


def test_per_unit_and_cost_conversion(case3_uc):
    case = case3_uc.case
    assert case.buses[2].pd == pytest.approx(0.9)
    assert case.buses[2].qd == pytest.approx(0.3)
    unit = case3_uc.gen_buses[1]
    assert unit.pmax == pytest.approx(1.5)
    assert unit.pmin == pytest.approx(0.2)
    # 0.01 $/MW²h, 20 $/MWh on a 100 MVA base
    assert unit.cost.c2 == pytest.approx(100.0)
    assert unit.cost.c1 == pytest.approx(2000.0)
    assert unit.cost.c0 == pytest.approx(10.0)


def test_committable_view(case3_uc, case14):
    assert case3_uc.n_commit == 1
    np.testing.assert_array_equal(case3_uc.commit_index, [1])
    assert case3_uc.gen_buses[case3_uc.slack_gen].is_slack
    assert case14.n_commit == 4
    assert case14.n_gen == 5


def test_units_on_one_bus_are_merged():
    gen = ("mpc.gen = [\n1 0 0 50 -50 1 100 1 100 0;\n"
           "2 10 0 20 -10 1 100 1 40 5;\n2 10 0 30 -20 1 100 1 60 10;\n];\n")
    cost = "mpc.gencost = [\n2 0 0 3 0 10 0;\n2 0 0 3 0.02 20 1;\n2 0 0 3 0.04 30 2;\n];\n"
    network = GridService.prepare(GridService.parse_case(build(gen=gen, extra=cost)))
    merged = network.gen_buses[1]
    assert merged.units == 2
    assert merged.pmax == pytest.approx(1.0)
    assert merged.pmin == pytest.approx(0.15)
    assert merged.qmin == pytest.approx(-0.3)
    # power split evenly: c2 averaged over n², c1 over n, c0 summed
    assert merged.cost.c2 == pytest.approx((0.02 + 0.04) * 1e4 / 4)
    assert merged.cost.c1 == pytest.approx((20 + 30) * 100 / 2)
    assert merged.cost.c0 == pytest.approx(3.0)


def test_out_of_service_entries_are_dropped():
    branch = "mpc.branch = [\n1 2 0.01 0.1 0 0 0 0 0 0 1;\n1 2 0.02 0.2 0 0 0 0 0 0 0;\n];\n"
    case = GridService.parse_case(build(branch=branch))
    assert len(case.branches) == 1


def test_syntax_error_reports_line():
    bus = "mpc.bus = [\n1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;\n2 1 abc 10 0 0 1 1 0 0 1 1.1 0.9;\n];\n"
    with pytest.raises(CaseSyntaxError) as e:
        GridService.parse_case(build(bus=bus))
    assert e.value.line == 5


def test_unclosed_table():
    with pytest.raises(CaseSyntaxError) as e:
        GridService.parse_case(HEADER + "mpc.bus = [\n1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;\n")
    assert e.value.line == 3


def test_short_row():
    with pytest.raises(CaseSyntaxError):
        GridService.parse_case(build(gen="mpc.gen = [\n1 0 0 50 -50;\n];\n"))


def test_two_slack_buses():
    bus = BUS_ROWS.replace("2 1 20", "2 3 20")
    with pytest.raises(CaseSemanticError) as e:
        GridService.parse_case(build(bus=bus))
    assert e.value.entity_ids == [1, 2]


def test_generator_on_missing_bus():
    with pytest.raises(CaseSemanticError) as e:
        GridService.parse_case(build(gen="mpc.gen = [\n7 0 0 50 -50 1 100 1 100 0;\n];\n"))
    assert e.value.entity_ids == [7]


def test_inverted_voltage_band():
    bus = BUS_ROWS.replace("2 1 20 10 0 0 1 1 0 0 1 1.1 0.9", "2 1 20 10 0 0 1 1 0 0 1 0.9 1.1")
    with pytest.raises(CaseSemanticError):
        GridService.parse_case(build(bus=bus))


def test_unsupported_cost_model():
    cost = "mpc.gencost = [\n1 0 0 2 0 0 100 1000;\n];\n"
    with pytest.raises(CaseSemanticError):
        GridService.parse_case(build(extra=cost))


def test_zero_impedance_branch():
    case = GridService.parse_case(build(branch="mpc.branch = [\n1 2 0 0 0 0 0 0 0 0 1;\n];\n"))
    with pytest.raises(SingularBranchError) as e:
        GridService.prepare(case)
    assert e.value.entity_ids == [1, 2]


def test_format_round_trip(case30):
    text = GridService.format_case(case30.case)
    again = GridService.parse_case(text)
    assert again.bus_ids == case30.case.bus_ids
    np.testing.assert_allclose(GridService.build_admittance(again).Y, case30.adm.Y, atol=1e-12)
    for a, b in zip(again.generators, case30.case.generators):
        assert a.cost.c2 == pytest.approx(b.cost.c2)
        assert a.pmax == pytest.approx(b.pmax)


def test_bus_injection_places_setpoints(case3_uc):
    S_d = case3_uc.base_demand
    S = GridService.bus_injection(case3_uc, S_d, np.array([0.5 + 0.1j]))
    np.testing.assert_allclose(S, [0.0, 0.4 + 0.05j, -0.9 - 0.3j])


def test_summary(case14):
    summary = GridService.summarize(case14)
    assert summary.buses == 14
    assert summary.decommittable == 4
    assert summary.slack_bus == 1
    assert summary.total_demand_mw == pytest.approx(259.0)


def test_two_bus_has_no_committable_units(two_bus):
    assert two_bus.case.name == "two_bus"
    assert two_bus.n_commit == 0
    assert two_bus.base_setpoints().size == 0

# tests/test_oracle_service.py
import itertools

import numpy as np
import pytest

from config.solver_config import OracleSettings
from services.grid_service import GridService
from services.oracle_service import OracleService
from tasks.powerflow_jobs import base_operating_point
from utils.errors import PreconditionError


def test_finite_diff_of_squared_norm():
    g = OracleService.finite_diff(lambda x: float(np.sum(x ** 2)), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], rtol=1e-8)


def test_finite_diff_rejects_nonpositive_step():
    with pytest.raises(PreconditionError):
        OracleService.finite_diff(lambda x: 0.0, np.zeros(2), h=0.0)


def test_finite_diff_complex_convention():
    z = np.array([0.5 - 1.5j, 2.0 + 0.5j])
    g = OracleService.finite_diff_complex(lambda w: float(np.sum(np.abs(w) ** 2)), z)
    np.testing.assert_allclose(g, 2 * z, rtol=1e-8)


def test_relative_error():
    assert OracleService.relative_error(np.array([1.0, 1.0]), np.array([1.0, 1.0])) == 0.0
    assert OracleService.relative_error(np.array([3.0, 4.0]), np.zeros(2)) > 1e100
    assert OracleService.relative_error(np.array([1.1, 0.0]), np.array([1.0, 0.0])) == pytest.approx(0.1)


def test_newton_raphson_zero_injection(two_bus):
    res = OracleService.newton_raphson(two_bus, np.zeros(2, dtype=complex), 1.02)
    assert res.converged
    assert res.iterations == 0
    np.testing.assert_allclose(res.v, 1.02)


def test_newton_raphson_on_case14(case14):
    S_d, S_g, v_s = base_operating_point(case14)
    S_bus = GridService.bus_injection(case14, S_d, S_g)
    res = OracleService.newton_raphson(case14, S_bus, v_s)
    assert res.converged
    assert res.iterations < 10
    assert res.residual < 1e-10
    assert res.v[case14.slack_index] == pytest.approx(v_s)
    # heavy load on one bus cannot be served
    res = OracleService.newton_raphson(case14, 40.0 * S_bus, v_s)
    assert not res.converged


def test_brute_force_commits_the_only_unit(case3_uc):
    settings = OracleSettings(resolution=5, vs_resolution=1)
    best = OracleService.brute_force_opf(case3_uc, case3_uc.base_demand, settings=settings)
    assert best.feasible
    # the slack alone cannot carry the 100 MW load
    assert best.b == (1,)
    assert 0.0 <= best.slack_injection.real <= 0.6
    assert best.v_s == pytest.approx(1.02)
    assert np.all(np.abs(best.v) <= 1.06 + 1e-9)


def test_brute_force_prefers_cheap_units(case3_two_units):
    settings = OracleSettings(resolution=5, vs_resolution=1)
    best = OracleService.brute_force_opf(case3_two_units, case3_two_units.base_demand, settings=settings)
    assert best.feasible
    assert best.b == (1, 1)
    np.testing.assert_allclose(best.S_g.real, [0.6, 0.1])
    assert best.evaluated > 0



def test_pruned_search_matches_a_full_rescan(case3_two_units):
    network = case3_two_units
    settings = OracleSettings(resolution=3, vs_resolution=2, threads=1)
    best = OracleService.brute_force_opf(network, network.base_demand, settings=settings)
    assert best.feasible

    Y = OracleService.assemble_ybus(network.case)
    units = [network.gen_buses[i] for i in network.committable]
    slack = network.case.slack_bus
    cheapest = np.inf
    for bits in itertools.product((0, 1), repeat=len(units)):
        grids = [[0j] if not on else [p + 1j * q for p in np.linspace(g.pmin, g.pmax, 3)
                                     for q in np.linspace(g.qmin, g.qmax, 3)]
                 for on, g in zip(bits, units)]
        for S_g in itertools.product(*grids):
            for v_s in np.linspace(slack.vmin, slack.vmax, 2):
                cand = OracleService.check_candidate(network, network.base_demand, np.array(S_g), float(v_s),
                                                     bits, settings, Y)
                if cand.feasible:
                    cheapest = min(cheapest, cand.cost)
    assert best.cost == pytest.approx(cheapest, rel=1e-12)
    assert best.evaluated <= 2 * (1 + 9 + 9 + 81)


def test_brute_force_refuses_large_grids(case14):
    with pytest.raises(PreconditionError):
        OracleService.brute_force_opf(case14, case14.base_demand, resolution=21)

# tests/test_policy_service.py
import numpy as np
import pytest

from config.train_config import PolicySettings
from services.helm_service import HelmService
from services.oracle_service import OracleService
from services.policy_service import GROUPS, PolicyService
from services.sampler_service import SamplerService
from tasks.powerflow_jobs import base_operating_point
from utils import autodiff as ad
from utils.errors import CheckpointError, PreconditionError

SMALL = PolicySettings(hidden=8, init_seed=3)


@pytest.fixture
def bundle(case3_uc):
    return PolicyService.create_bundle(case3_uc, SMALL)


def test_network_shapes(bundle, case3_uc):
    n, k = case3_uc.n_bus, case3_uc.n_commit
    assert bundle.n_constraints == 2 * (n - 1) + 4
    assert bundle.theta["W0"].shape == (2 * n + k, 8)
    assert bundle.theta["W2"].shape == (8, 2 * k + 1)
    assert bundle.psi["W0"].shape == (2 * n + bundle.n_constraints, 8)
    assert bundle.phi["b2"].shape == (k,)


def test_initialization_is_deterministic(case3_uc):
    a = PolicyService.create_bundle(case3_uc, SMALL)
    b = PolicyService.create_bundle(case3_uc, SMALL)
    for group in GROUPS:
        for name in a.params(group):
            np.testing.assert_array_equal(a.params(group)[name], b.params(group)[name])
    other = PolicyService.create_bundle(case3_uc, PolicySettings(hidden=8, init_seed=4))
    assert not np.array_equal(a.theta["W0"], other.theta["W0"])


@pytest.mark.parametrize("scale", [1.0, 100.0])
def test_actor_stays_in_box(bundle, case3_uc, scale):
    theta = {k: v * scale for k, v in bundle.theta.items()}
    theta["b2"] = theta["b2"] + scale
    rng = np.random.default_rng(0)
    for _ in range(20):
        S_d = case3_uc.base_demand * rng.uniform(0.2, 3.0)
        for b in ([0], [1]):
            S_g, v_s = PolicyService.forward_g(bundle, S_d, b, theta)
            assert np.all(S_g.real >= bundle.p_min - 1e-12) and np.all(S_g.real <= bundle.p_max + 1e-12)
            assert np.all(S_g.imag >= bundle.q_min - 1e-12) and np.all(S_g.imag <= bundle.q_max + 1e-12)
            assert bundle.vs_min - 1e-12 <= float(v_s) <= bundle.vs_max + 1e-12


def test_dual_and_commitment_ranges(bundle, case3_uc):
    S_d = case3_uc.base_demand
    u = PolicyService.forward_u(bundle, S_d, np.linspace(-1, 1, bundle.n_constraints))
    assert u.shape == (bundle.n_constraints,)
    assert np.all(u >= 0)
    p = PolicyService.forward_b(bundle, S_d)
    assert np.all((p >= 0) & (p <= 1))


@pytest.mark.parametrize("name", ["b0", "W2"])
def test_dual_network_gradient(bundle, case3_uc, name):
    S_d = case3_uc.base_demand
    k_plus = np.linspace(0.0, 0.3, bundle.n_constraints)
    weights = np.linspace(1.0, 2.0, bundle.n_constraints)

    def weighted(x):
        psi = dict(bundle.psi, **{name: x})
        return float(np.sum(weights * np.asarray(PolicyService.forward_u(bundle, S_d, k_plus, psi))))

    with ad.Tape() as tape:
        h = tape.watch(bundle.psi)
        u = PolicyService.forward_u(bundle, S_d, k_plus, h)
        g = tape.backward(ad.sum_(ad.mul(u, weights)))[h[name]]
    fd = OracleService.finite_diff(weighted, bundle.psi[name])
    assert OracleService.relative_error(g, fd) < 1e-4


def test_input_shapes_are_checked(bundle, case3_uc):
    with pytest.raises(PreconditionError):
        PolicyService.forward_g(bundle, case3_uc.base_demand, [1, 0])
    with pytest.raises(PreconditionError):
        PolicyService.forward_b(bundle, case3_uc.base_demand[:2])
    with pytest.raises(PreconditionError):
        PolicyService.forward_u(bundle, case3_uc.base_demand, np.zeros(3))


def test_log_q_matches_sampler():
    logits = np.array([-2.0, 0.5, 3.0])
    probs = 1.0 / (1.0 + np.exp(-logits))
    configs, _ = SamplerService.enumerate_all(probs)
    ours = [float(PolicyService.log_q_from_logits(logits, b)) for b in configs]
    np.testing.assert_allclose(ours, SamplerService.log_prob(probs, configs), rtol=1e-12)


def test_constraint_layout(case3_uc):
    S_d, S_g, v_s = base_operating_point(case3_uc)
    sol = HelmService.solve_powerflow(case3_uc, S_d, S_g, v_s)
    k = PolicyService.constraint_values(sol, case3_uc)
    n_ns = case3_uc.n_bus - 1
    assert k.shape == (PolicyService.n_constraints(case3_uc),)
    ns = case3_uc.adm.non_slack
    # upper plus lower excess is minus the band width
    np.testing.assert_allclose(k[:n_ns] + k[n_ns:2 * n_ns], case3_uc.vmin[ns] - case3_uc.vmax[ns])
    pmin, pmax, qmin, qmax = case3_uc.slack_limits
    assert k[-4] + k[-3] == pytest.approx(pmin - pmax)
    assert k[-2] + k[-1] == pytest.approx(qmin - qmax)
    assert k[-4] == pytest.approx(sol.slack_injection.real - pmax)


def test_generation_cost(case3_uc):
    S_g = np.array([0.5 + 0.1j])
    slack_only = float(PolicyService.generation_cost(case3_uc, S_g, 0.3 + 0.2j, [0]))
    # slack: 0.02 $/MW²h and 40 $/MWh on 100 MVA
    assert slack_only == pytest.approx(200 * 0.09 + 4000 * 0.3)
    both = float(PolicyService.generation_cost(case3_uc, S_g, 0.3 + 0.2j, [1]))
    assert both - slack_only == pytest.approx(100 * 0.25 + 2000 * 0.5 + 10)


def test_checkpoint_round_trip(bundle, case3_uc, tmp_path):
    path = tmp_path / "ckpt" / "policy.npz"
    state = {"lam": 2.5, "step": 3, "recent_costs": [1.0, 2.0]}
    PolicyService.save_checkpoint(path, bundle, config_hash="abc", trainer_state=state)
    loaded, got = PolicyService.load_checkpoint(path, case3_uc)
    for group in GROUPS:
        for name, arr in bundle.params(group).items():
            np.testing.assert_array_equal(loaded.params(group)[name], arr)
    np.testing.assert_array_equal(loaded.p_max, bundle.p_max)
    assert loaded.vs_max == bundle.vs_max
    assert loaded.case_hash == case3_uc.case_hash
    assert got["lam"] == 2.5 and got["step"] == 3
    np.testing.assert_array_equal(got["recent_costs"], [1.0, 2.0])
    assert got["config_hash"] == "abc"
    # nothing left behind but the checkpoint itself
    assert [p.name for p in path.parent.iterdir()] == ["policy.npz"]


def test_checkpoint_of_another_case(bundle, case3_two_units, tmp_path):
    path = PolicyService.save_checkpoint(tmp_path / "p.npz", bundle)
    with pytest.raises(CheckpointError):
        PolicyService.load_checkpoint(path, case3_two_units)


def test_missing_or_broken_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        PolicyService.load_checkpoint(tmp_path / "absent.npz")
    broken = tmp_path / "broken.npz"
    broken.write_text("not a checkpoint")
    with pytest.raises(CheckpointError):
        PolicyService.load_checkpoint(broken)

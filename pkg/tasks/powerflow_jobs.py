# tasks/powerflow_jobs.py - Power-flow batch jobs: single solves, gradient checks, sweeps
import logging
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.solver_config import HelmSettings, OracleSettings
from config.train_config import PolicySettings
from schemas.report_schemas import CoefficientRow, GradCheckRow, SolveReport, SweepRow
from services.grid_service import Network
from services.helm_service import HelmService, PFSolution
from services.oracle_service import OracleService
from services.policy_service import PolicyService
from utils import autodiff as ad
from utils.errors import LopfError

logger = logging.getLogger(__name__)

GRADCHECK_TOL = 1e-4
# below this, rounding in ε swamps central differences at the default step
RESOLVABLE_EPS = 1e-4
THETA_DIRECTIONS = 3
DEFAULT_ALPHAS = tuple(round(0.1 * i, 1) for i in range(1, 41))


def base_operating_point(network: Network) -> Tuple[np.ndarray, np.ndarray, float]:
    """(S_d, S_g, v_s) exactly as the case file states them"""
    return network.base_demand.copy(), network.base_setpoints(), float(network.case.slack_setpoint())


def solve_report(network: Network, S_d, S_g, v_s: float, settings: HelmSettings) -> Tuple[SolveReport, PFSolution]:
    """Solve once and summarize; the per-bus voltages stay on the returned solution"""
    start = time.perf_counter()
    sol = HelmService.solve_powerflow(network, S_d, S_g, v_s, settings=settings)
    seconds = time.perf_counter() - start
    report = SolveReport(
        case=network.case.name,
        converged=sol.converged,
        ln_eps=sol.ln_epsilon,
        c_bar_tail=sol.c_bar_tail,
        slack_p=sol.slack_injection.real,
        slack_q=sol.slack_injection.imag,
        v_s=v_s,
        pade_min_order=int(sol.pade_orders.min()) if sol.pade_orders is not None and sol.pade_orders.size else 0,
        seconds=seconds,
    )
    logger.info(f"solve '{network.case.name}': ln ε={report.ln_eps:.2f} in {seconds * 1e3:.1f} ms")
    return report, sol


def voltage_rows(network: Network, v_bus: np.ndarray) -> List[list]:
    rows = []
    for bus, v in zip(network.case.buses, v_bus):
        rows.append([bus.bus_id, float(np.abs(v)), float(np.degrees(np.angle(v))), float(v.real), float(v.imag)])
    return rows


def nr_rows(network: Network, S_d, S_g, v_s: float, oracle: OracleSettings) -> Tuple[bool, List[list]]:
    """Newton-Raphson at the same point, as voltage rows"""
    S_bus = -np.asarray(S_d, dtype=complex)
    S_bus[network.commit_index] += np.asarray(S_g, dtype=complex)
    res = OracleService.newton_raphson(network, S_bus, v_s, oracle.tol, oracle.max_iter)
    if not res.converged:
        logger.warning(f"Newton-Raphson did not converge after {res.iterations} iterations "
                       f"(residual {res.residual:.3e})")
    return res.converged, voltage_rows(network, res.v)


def random_point(network: Network, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, float]:
    """Set-points uniform in the box of every committable unit, demand within ±20% of base"""
    committed = [network.gen_buses[i] for i in network.committable]
    P = np.array([rng.uniform(g.pmin, g.pmax) for g in committed])
    Q = np.array([rng.uniform(g.qmin, g.qmax) for g in committed])
    slack = network.case.slack_bus
    v_s = float(rng.uniform(slack.vmin, slack.vmax))
    S_d = network.base_demand * rng.uniform(0.8, 1.2, size=network.n_bus)
    return S_d, P + 1j * Q, v_s


def _series_quantity(network: Network, S_d, S_g, v_s, settings: HelmSettings, quantity: str) -> float:
    sol = HelmService.solve_powerflow(network, S_d, S_g, v_s, settings=settings)
    return sol.epsilon if quantity == "epsilon" else sol.c_bar_tail


def _check_wrt_setpoints(network: Network, S_d, S_g, v_s, settings: HelmSettings, quantity: str,
                         fd_step: float) -> Tuple[np.ndarray, np.ndarray]:
    with ad.Tape() as tape:
        handle = tape.watch({"S_g": S_g})["S_g"]
        sol = HelmService.solve_powerflow(network, S_d, handle, v_s, settings=settings)
        out = sol.graph.epsilon if quantity == "epsilon" else sol.graph.c_bar
        tape_grad = np.array(tape.backward(out)[handle])
    fd = OracleService.finite_diff_complex(
        lambda z: _series_quantity(network, S_d, z, v_s, settings, quantity), S_g, fd_step)
    return tape_grad, fd


def _plain_cost(bundle, network: Network, S_d, b, theta: Dict[str, np.ndarray], settings: HelmSettings) -> float:
    S_g, v_s = PolicyService.forward_g(bundle, S_d, b, theta)
    sol = HelmService.solve_powerflow(network, S_d, S_g, float(v_s), settings=settings)
    return float(PolicyService.generation_cost(network, S_g, sol.slack_injection, b))


def _check_wrt_theta(bundle, network: Network, S_d, settings: HelmSettings, fd_step: float,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Directional derivatives of the generation cost along random unit directions in Θ"""
    b = np.ones(network.n_commit)
    with ad.Tape() as tape:
        theta = tape.watch(bundle.theta)
        S_g, v_s = PolicyService.forward_g(bundle, S_d, b, theta)
        sol = HelmService.solve_powerflow(network, S_d, S_g, v_s, settings=settings)
        cost = PolicyService.generation_cost(network, S_g, sol.graph.slack_injection, b)
        grads = tape.backward(cost)

    tape_dir, fd_dir = [], []
    for _ in range(THETA_DIRECTIONS):
        d = {name: rng.normal(size=w.shape) for name, w in bundle.theta.items()}
        scale = np.sqrt(sum(float(np.sum(x * x)) for x in d.values()))
        d = {name: x / scale for name, x in d.items()}
        tape_dir.append(sum(float(np.sum(np.real(grads[theta[name]]) * d[name])) for name in d))

        def along(t, d=d):
            shifted = {name: bundle.theta[name] + t[0] * d[name] for name in d}
            return _plain_cost(bundle, network, S_d, b, shifted, settings)

        fd_dir.append(float(OracleService.finite_diff(along, np.zeros(1), fd_step)[0]))
    return np.array(tape_dir), np.array(fd_dir)


def gradient_check(network: Network, count: int, seed: int, settings: HelmSettings,
                   fd_step: float = 1e-6, hidden: int = 16, tol: float = GRADCHECK_TOL) -> List[GradCheckRow]:
    """
    Tape gradients against central differences at `count` random points:
    ε and |c̄[n_max]| with respect to S_g, and the generation cost with
    respect to Θ (along random directions).
    """
    rng = np.random.default_rng(seed)
    bundle = PolicyService.create_bundle(network, PolicySettings(hidden=hidden, init_seed=seed))
    rows: List[GradCheckRow] = []

    def add_row(point, quantity, wrt, ln_eps, tape_grad, fd):
        err = OracleService.relative_error(tape_grad, fd)
        rows.append(GradCheckRow(point=point, quantity=quantity, wrt=wrt, ln_eps=ln_eps,
                                 tape_norm=float(np.linalg.norm(tape_grad)), fd_norm=float(np.linalg.norm(fd)),
                                 rel_error=err, passed=bool(err < tol)))

    for point in range(count):
        S_d, S_g, v_s = random_point(network, rng)
        try:
            base = HelmService.solve_powerflow(network, S_d, S_g, v_s, settings=settings)
        except LopfError as e:
            logger.warning(f"gradcheck point {point} skipped: {e}")
            continue
        if not np.isfinite(base.epsilon):
            logger.warning(f"gradcheck point {point} skipped: non-finite voltages")
            continue
        ln_eps = base.ln_epsilon
        try:
            if base.epsilon >= RESOLVABLE_EPS:
                add_row(point, "epsilon", "S_g", ln_eps,
                        *_check_wrt_setpoints(network, S_d, S_g, v_s, settings, "epsilon", fd_step))
            else:
                logger.debug(f"gradcheck point {point}: ε={base.epsilon:.2e} below resolution, not checked")
            add_row(point, "c_bar", "S_g", ln_eps,
                    *_check_wrt_setpoints(network, S_d, S_g, v_s, settings, "c_bar", fd_step))
            add_row(point, "cost", "theta", ln_eps, *_check_wrt_theta(bundle, network, S_d, settings, fd_step, rng))
        except LopfError as e:
            logger.warning(f"gradcheck point {point} aborted: {e}")

    failed = [r for r in rows if not r.passed]
    worst = max((r.rel_error for r in rows), default=float("nan"))
    logger.info(f"gradcheck: {len(rows)} checks, {len(failed)} above {tol:g}, max relative error {worst:.3e}")
    return rows


def alpha_sweep_job(network: Network, alphas: Sequence[float], settings: HelmSettings,
                    n_values: Optional[Sequence[int]] = None) -> List[SweepRow]:
    """ln ε against the generation scaling α at the base case, for one or more series orders"""
    S_d, S_g, v_s = base_operating_point(network)
    if n_values is None:
        n_values = sorted({max(2, settings.n_max // 2), settings.n_max})
    return HelmService.alpha_sweep(network, S_d, S_g, v_s, list(alphas), list(n_values), settings)


def coefficient_sweep_job(network: Network, count: int, seed: int, settings: HelmSettings) -> List[CoefficientRow]:
    S_d, S_g, v_s = base_operating_point(network)
    rows = HelmService.sweep_coefficients(network, S_d, S_g, v_s, count, seed, settings=settings)
    finite = sum(1 for r in rows if np.isfinite(r.ln_eps))
    logger.info(f"coefficient sweep: {count} scalings, {finite} with a finite mismatch")
    return rows


def parse_alphas(text: Optional[str]) -> Tuple[float, ...]:
    """`0.5,1,2` or `start:stop:step` (stop included)"""
    if not text:
        return DEFAULT_ALPHAS
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        count = int(round((stop - start) / step)) + 1
        return tuple(round(start + i * step, 10) for i in range(count))
    return tuple(float(x) for x in text.split(",") if x.strip())

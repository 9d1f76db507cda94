# services/oracle_service.py - Reference solvers: Newton-Raphson, finite differences, brute-force OPF
"""
Independent of the HELM path: the Y-bus here is assembled from branch
incidence matrices, not by the element loop of the grid service, so the two
can be compared entrywise. Used by tests, gradient checks and the desk
experiment only.
"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from config.solver_config import HelmSettings, OracleSettings
from schemas.grid_schemas import GridCase
from services.grid_service import GridService, Network
from services.policy_service import PolicyService
from utils.errors import PreconditionError

logger = logging.getLogger(__name__)

# refuse brute-force scans beyond this many power-flow solves
MAX_CANDIDATES = 2_000_000


@dataclass
class NRResult:
    v: np.ndarray
    converged: bool
    iterations: int
    residual: float


@dataclass
class Candidate:
    b: Tuple[int, ...]
    S_g: np.ndarray
    v_s: float
    cost: float
    feasible: bool
    v: Optional[np.ndarray] = None
    slack_injection: complex = 0j


@dataclass
class BruteForceResult:
    feasible: bool
    S_g: Optional[np.ndarray]
    b: Optional[Tuple[int, ...]]
    v_s: Optional[float]
    cost: float
    evaluated: int
    v: Optional[np.ndarray] = None
    slack_injection: Optional[complex] = None


class OracleService:

    @staticmethod
    def assemble_ybus(case: GridCase) -> np.ndarray:
        """Y = Cfᵀ Yf + Ctᵀ Yt + diag(Ysh), from the branch incidence matrices"""
        n = case.n_bus
        index = {b.bus_id: i for i, b in enumerate(case.buses)}
        nl = len(case.branches)
        f = np.array([index[br.from_bus] for br in case.branches], dtype=int)
        t = np.array([index[br.to_bus] for br in case.branches], dtype=int)
        r = np.array([br.r for br in case.branches])
        x = np.array([br.x for br in case.branches])
        bc = np.array([br.b for br in case.branches])
        ratio = np.array([br.ratio for br in case.branches])
        shift = np.array([br.angle for br in case.branches])

        Ys = 1.0 / (r + 1j * x)
        tap = np.where(ratio != 0.0, ratio, 1.0) * np.exp(1j * np.pi / 180.0 * shift)
        Ytt = Ys + 1j * bc / 2
        Yff = Ytt / (tap * np.conj(tap))
        Yft = -Ys / np.conj(tap)
        Ytf = -Ys / tap
        Ysh = np.array([complex(b.gs, b.bs) for b in case.buses])

        rows = np.arange(nl)
        Cf = sparse.csr_matrix((np.ones(nl), (rows, f)), shape=(nl, n))
        Ct = sparse.csr_matrix((np.ones(nl), (rows, t)), shape=(nl, n))
        Yf = sparse.csr_matrix((np.r_[Yff, Yft], (np.r_[rows, rows], np.r_[f, t])), shape=(nl, n))
        Yt = sparse.csr_matrix((np.r_[Ytf, Ytt], (np.r_[rows, rows], np.r_[f, t])), shape=(nl, n))
        Ybus = Cf.T @ Yf + Ct.T @ Yt + sparse.diags(Ysh)
        return Ybus.toarray()

    @staticmethod
    def jacobian(Y: np.ndarray, V: np.ndarray, pq: np.ndarray) -> np.ndarray:
        Ibus = Y @ V
        diagV = np.diag(V)
        diagI = np.diag(Ibus)
        diagVnorm = np.diag(V / np.abs(V))
        dS_dVm = diagV @ np.conj(Y @ diagVnorm) + np.conj(diagI) @ diagVnorm
        dS_dVa = 1j * diagV @ np.conj(diagI - Y @ diagV)
        sub = np.ix_(pq, pq)
        return np.block([
            [dS_dVa[sub].real, dS_dVm[sub].real],
            [dS_dVa[sub].imag, dS_dVm[sub].imag],
        ])

    @staticmethod
    def newton_raphson(case: Union[GridCase, Network], S, v_s: float = 1.0, tol: float = 1e-10,
                       max_iter: int = 50, Y: Optional[np.ndarray] = None) -> NRResult:
        """
        Polar Newton-Raphson from a flat start, every non-slack bus PQ.
        `S` is the net injection per bus. Converged iff max |ΔS| over the
        non-slack buses is below `tol`.
        """
        network = GridService.as_network(case)
        grid = network.case
        Y = OracleService.assemble_ybus(grid) if Y is None else Y
        pq = network.adm.non_slack
        npq = pq.size
        S = np.asarray(S, dtype=complex)

        Vm = np.ones(grid.n_bus) * v_s
        Va = np.zeros(grid.n_bus)
        V = Vm * np.exp(1j * Va)

        def residual(V):
            mis = V * np.conj(Y @ V) - S
            return mis, (float(np.max(np.abs(mis[pq]))) if npq else 0.0)

        mis, err = residual(V)
        iterations = 0
        while err >= tol and iterations < max_iter:
            iterations += 1
            J = OracleService.jacobian(Y, V, pq)
            F = np.r_[mis[pq].real, mis[pq].imag]
            try:
                dx = np.linalg.solve(J, F)
            except np.linalg.LinAlgError:
                logger.debug(f"NR: singular Jacobian at iteration {iterations}")
                break
            Va[pq] -= dx[:npq]
            Vm[pq] -= dx[npq:]
            V = Vm * np.exp(1j * Va)
            Vm, Va = np.abs(V), np.angle(V)
            mis, err = residual(V)
            if not np.isfinite(err):
                break
        converged = bool(np.isfinite(err) and err < tol)
        return NRResult(v=V, converged=converged, iterations=iterations, residual=err)

    @staticmethod
    def finite_diff(fn: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
        """Central differences of a real-valued function, one coordinate at a time"""
        if not h > 0:
            raise PreconditionError(f"finite-difference step must be positive, got {h}")
        x = np.array(x, dtype=float)
        grad = np.zeros_like(x)
        flat = x.reshape(-1)
        g = grad.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = float(fn(x.copy()))
            flat[k] = old - h
            down = float(fn(x.copy()))
            flat[k] = old
            g[k] = (up - down) / (2.0 * h)
        return grad

    @staticmethod
    def finite_diff_complex(fn: Callable[[np.ndarray], float], z, h: float = 1e-6) -> np.ndarray:
        """∂/∂Re + i ∂/∂Im per entry of a complex argument"""
        z = np.asarray(z, dtype=complex)
        d_re = OracleService.finite_diff(lambda xr: fn(xr + 1j * z.imag), z.real, h)
        d_im = OracleService.finite_diff(lambda xi: fn(z.real + 1j * xi), z.imag, h)
        return d_re + 1j * d_im

    @staticmethod
    def check_candidate(network: Network, S_d, S_g, v_s: float, b, oracle: OracleSettings,
                        Y: np.ndarray) -> Candidate:
        """NR-validate one set-point and apply the feasibility rules"""
        S_bus = -np.asarray(S_d, dtype=complex)
        S_bus[network.commit_index] += S_g
        nr = OracleService.newton_raphson(network, S_bus, v_s, oracle.tol, oracle.max_iter, Y=Y)
        b = tuple(int(x) for x in b)
        if not nr.converged:
            return Candidate(b=b, S_g=S_g, v_s=v_s, cost=math.inf, feasible=False)
        slack = network.slack_index
        s_inj = complex(nr.v[slack] * np.conj(Y[slack] @ nr.v) + S_d[slack])
        pmin, pmax, qmin, qmax = network.slack_limits
        ns = network.adm.non_slack
        vm = np.abs(nr.v[ns])
        ok = (pmin <= s_inj.real <= pmax and qmin <= s_inj.imag <= qmax
              and bool(np.all(vm <= network.vmax[ns])) and bool(np.all(vm >= network.vmin[ns])))
        cost = float(PolicyService.generation_cost(network, S_g, s_inj, b))
        return Candidate(b=b, S_g=S_g, v_s=v_s, cost=cost, feasible=ok, v=nr.v, slack_injection=s_inj)

    @staticmethod
    def _slack_cost_bound(network: Network, lossless_p: float) -> float:
        """Smallest slack cost compatible with a slack output of at least `lossless_p`"""
        pmin, pmax, _, _ = network.slack_limits
        lo = max(pmin, lossless_p)
        if lo > pmax:
            return math.inf
        c = network.gen_buses[network.slack_gen].cost
        candidates = [lo, pmax]
        if c.c2 > 0:
            vertex = -c.c1 / (2 * c.c2)
            if lo < vertex < pmax:
                candidates.append(vertex)
        return min(c(p) for p in candidates)

    @staticmethod
    def _is_passive(network: Network) -> bool:
        case = network.case
        return all(br.r >= 0 for br in case.branches) and all(b.gs >= 0 for b in case.buses)

    @staticmethod
    def brute_force_opf(case: Union[GridCase, Network], S_d, resolution: Optional[int] = None,
                        settings: Optional[OracleSettings] = None) -> BruteForceResult:
        """
        Exhaustive search over commitments b, a P×Q grid per committed unit and
        a grid of slack voltages. Candidates are visited in order of a cost
        lower bound (unit costs plus the slack at lossless output); a group is
        skipped only when that bound already exceeds the best feasible cost.
        """
        settings = settings or OracleSettings()
        r = resolution or settings.resolution
        network = GridService.as_network(case)
        S_d = np.asarray(S_d, dtype=complex)
        k = network.n_commit
        committed = [network.gen_buses[i] for i in network.committable]
        Y = OracleService.assemble_ybus(network.case)

        slack_bus = network.case.slack_bus
        if settings.vs_resolution == 1:
            vs_grid = np.array([min(max(network.case.slack_setpoint(), slack_bus.vmin), slack_bus.vmax)])
        else:
            vs_grid = np.linspace(slack_bus.vmin, slack_bus.vmax, settings.vs_resolution)
        p_grids = [np.linspace(g.pmin, g.pmax, r) for g in committed]
        q_grids = [np.linspace(g.qmin, g.qmax, r) for g in committed]

        total = sum(r ** (2 * sum(bits)) for bits in itertools.product((0, 1), repeat=k)) * vs_grid.size
        if total > MAX_CANDIDATES:
            raise PreconditionError(f"brute force would evaluate {total} candidates (limit {MAX_CANDIDATES})")

        passive = OracleService._is_passive(network)
        demand_p = float(S_d.real.sum())
        groups = []
        for bits in itertools.product((0, 1), repeat=k):
            on = [i for i in range(k) if bits[i]]
            for p_combo in itertools.product(*[p_grids[i] for i in on]):
                P = np.zeros(k)
                P[on] = p_combo
                unit_cost = sum(committed[i].cost(P[i]) for i in on)
                bound = -math.inf
                if passive:
                    bound = unit_cost + OracleService._slack_cost_bound(network, demand_p - P.sum())
                groups.append((bound, len(groups), bits, on, P))
        groups.sort(key=lambda g: (g[0], g[1]))

        best: Optional[Candidate] = None
        evaluated = 0
        with ThreadPoolExecutor(max_workers=settings.threads) as pool:
            for bound, _, bits, on, P in groups:
                if best is not None and bound >= best.cost:
                    break
                if bound == math.inf:
                    continue
                jobs = []
                for q_combo in itertools.product(*[q_grids[i] for i in on]):
                    Q = np.zeros(k)
                    Q[on] = q_combo
                    S_g = P + 1j * Q
                    for v_s in vs_grid:
                        jobs.append((S_g, float(v_s)))
                results = pool.map(
                    lambda job: OracleService.check_candidate(network, S_d, job[0], job[1], bits, settings, Y),
                    jobs)
                for cand in results:
                    evaluated += 1
                    if cand.feasible and (best is None or cand.cost < best.cost):
                        best = cand

        if best is None:
            logger.info(f"brute force: no feasible candidate among {evaluated}")
            return BruteForceResult(feasible=False, S_g=None, b=None, v_s=None, cost=math.inf, evaluated=evaluated)
        logger.info(f"brute force: best cost {best.cost:.4f} with b={best.b} after {evaluated} solves")
        return BruteForceResult(feasible=True, S_g=best.S_g, b=best.b, v_s=best.v_s, cost=best.cost,
                                evaluated=evaluated, v=best.v, slack_injection=best.slack_injection)

    @staticmethod
    def relative_error(tape_grad: np.ndarray, fd_grad: np.ndarray) -> float:
        """‖g - g_fd‖ / max(‖g_fd‖, tiny), vector norms"""
        diff = np.linalg.norm(np.asarray(tape_grad) - np.asarray(fd_grad))
        return float(diff / max(np.linalg.norm(fd_grad), 1e-300))

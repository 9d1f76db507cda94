# services/helm_service.py - Holomorphic embedding power flow with Padé continuation
"""
The non-slack voltages are embedded as power series V(z) = Σ c[n] z^n with
the slack held at v_s + 0j:

    Yʳ c[0] = -v_s · y_s
    Yʳ c[n] = S* ∘ conj(d[n-1])              n ≥ 1
    d[0] = 1 / c[0],   d[n] = -(Σ_{m<n} c[n-m] d[m]) / c[0]

where d is the reciprocal series W(z) = 1/V(z). The conjugate on d comes from
the embedded right-hand side S*/V*(z*). At z = 1 the embedding is the power
flow itself; the series is continued there with Padé approximants.

Every function accepts plain numpy inputs or values tracked on a
`utils.autodiff.Tape`, so the same code serves solving and differentiation.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence, Union

import numpy as np

from config.solver_config import HelmSettings
from schemas.grid_schemas import GridCase
from schemas.report_schemas import CoefficientRow, SweepRow
from services.grid_service import Admittance, GridService, Network
from utils import autodiff as ad
from utils.errors import DegenerateEmbeddingError, LopfError, PoleAtOneError, PreconditionError

logger = logging.getLogger(__name__)

# |c_i[0]| below this is a breakdown of the reciprocal series
GERM_TOL = 1e-12


@dataclass
class VoltageSeries:
    """c[n] and d[n] per non-slack bus; entries are plain or tracked vectors"""
    c: List[Any]
    d: List[Any]
    n_max: int
    v_s: Any = 1.0

    def coefficients(self) -> np.ndarray:
        """c as a plain (n_max+1, N-1) array"""
        return np.stack([ad.value(x) for x in self.c])

    def reciprocals(self) -> np.ndarray:
        return np.stack([ad.value(x) for x in self.d])


@dataclass
class PadeGroup:
    """Buses that share one Padé order; a is (|G|, order+1), b is (|G|, order)"""
    buses: np.ndarray
    order: int
    a: Any
    b: Any


@dataclass
class PadeApproximant:
    groups: List[PadeGroup]
    n: int

    def orders(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=int)
        for g in self.groups:
            out[g.buses] = g.order
        return out

    def row(self, i: int):
        """(a, b) of bus position i as plain arrays"""
        for g in self.groups:
            hit = np.nonzero(g.buses == i)[0]
            if hit.size:
                k = int(hit[0])
                return ad.value(g.a)[k].copy(), ad.value(g.b)[k].copy()
        raise IndexError(i)


@dataclass
class PFGraph:
    """Tracked intermediates of a solve run on a tape"""
    v: Any
    epsilon: Any
    c_bar: Any
    slack_injection: Any
    series: VoltageSeries


@dataclass
class PFSolution:
    v: np.ndarray
    epsilon: float
    c_bar_tail: float
    slack_injection: complex
    converged: bool
    pade_orders: Optional[np.ndarray] = None
    graph: Optional[PFGraph] = field(default=None, repr=False)

    @property
    def ln_epsilon(self) -> float:
        return _safe_log(self.epsilon)


def _safe_log(x: float) -> float:
    if not np.isfinite(x):
        return math.inf
    if x <= 0.0:
        return -math.inf
    return math.log(x)


class HelmService:

    @staticmethod
    def compute_coefficients(adm: Admittance, v_s, S, n_max: int) -> VoltageSeries:
        """
        Series coefficients for the non-slack buses.
        `S` is the net injection at the non-slack buses (p.u.), `v_s` the slack magnitude.
        """
        if n_max < 1:
            raise PreconditionError(f"n_max must be at least 1, got {n_max}")
        if float(np.real(ad.value(v_s))) <= 0.0:
            raise PreconditionError(f"slack voltage must be positive, got {ad.value(v_s)}")
        fac = adm.factorization

        c0 = ad.solve(fac, ad.mul(ad.neg(v_s), adm.y_slack))
        small = np.abs(ad.value(c0)) < GERM_TOL
        if np.any(small):
            raise DegenerateEmbeddingError(adm.non_slack[small].tolist())
        d0 = ad.div(1.0, c0)

        c, d = [c0], [d0]
        S_conj = ad.conj(S)
        for n in range(1, n_max + 1):
            rhs = ad.mul(S_conj, ad.conj(d[n - 1]))
            c.append(ad.solve(fac, rhs))
            acc = ad.mul(c[n], d[0])
            for m in range(1, n):
                acc = ad.add(acc, ad.mul(c[n - m], d[m]))
            d.append(ad.neg(ad.div(acc, c0)))
        return VoltageSeries(c=c, d=d, n_max=n_max, v_s=v_s)

    @staticmethod
    def _toeplitz_index(k: int) -> np.ndarray:
        # row r, column j-1 holds c[k+1+r-j], r = 0..k-1, j = 1..k
        r = np.arange(k)[:, None]
        j = np.arange(1, k + 1)[None, :]
        return k + 1 + r - j

    @staticmethod
    def _select_orders(values: np.ndarray, m: int, cond_max: float) -> np.ndarray:
        """Largest order ≤ m per row whose denominator system is well conditioned"""
        rows = values.shape[0]
        orders = np.zeros(rows, dtype=int)
        pending = np.arange(rows)
        for k in range(m, 0, -1):
            if pending.size == 0:
                break
            T = np.take(values[pending], HelmService._toeplitz_index(k), axis=1)
            with np.errstate(all="ignore"):
                cond = np.linalg.cond(T)
            ok = np.isfinite(cond) & (cond < cond_max)
            orders[pending[ok]] = k
            pending = pending[~ok]
        if np.any(orders < m):
            reduced = np.nonzero(orders < m)[0]
            logger.debug(f"Pade order reduced from {m} at {reduced.size} buses: orders {orders[reduced].tolist()}")
        return orders

    @staticmethod
    def pade(c, m: int, cond_max: float = 1e12) -> PadeApproximant:
        """
        [m/m] approximant per row of `c` (one row per bus, or a single 1-D series).
        Denominator from the Toeplitz system, numerator by convolution; rows whose
        system is ill-conditioned fall back to the largest workable order.
        """
        if ad.value(c).ndim == 1:
            c = ad.reshape(c, (1, -1))
        values = ad.value(c)
        if m < 0:
            raise PreconditionError(f"Pade order must be non-negative, got {m}")
        if values.shape[1] < 2 * m + 1:
            raise PreconditionError(f"order {m} needs {2 * m + 1} coefficients, got {values.shape[1]}")

        orders = HelmService._select_orders(values, m, cond_max) if m > 0 else np.zeros(values.shape[0], dtype=int)
        groups = []
        for k in sorted(set(orders.tolist()), reverse=True):
            buses = np.nonzero(orders == k)[0]
            sub = ad.take(c, buses, axis=0)
            if k == 0:
                a = ad.take(sub, np.array([0]), axis=1)
                b = np.zeros((buses.size, 0))
                groups.append(PadeGroup(buses=buses, order=0, a=a, b=b))
                continue
            T = ad.take(sub, HelmService._toeplitz_index(k), axis=1)
            rhs = ad.neg(ad.take(sub, np.arange(k + 1, 2 * k + 1), axis=1))
            b = ad.solve(T, rhs)
            ones = np.ones((buses.size, 1), dtype=values.dtype)
            b_full = ad.concatenate([ones, b], axis=1)                  # (|G|, k+1)
            lag = np.arange(k + 1)[:, None] - np.arange(k + 1)[None, :]  # [kk, j] -> kk - j
            mask = (lag >= 0).astype(float)
            conv = ad.take(sub, np.clip(lag, 0, None), axis=1)           # (|G|, k+1, k+1)
            terms = ad.mul(ad.mul(conv, mask), ad.reshape(b_full, (buses.size, 1, k + 1)))
            a = ad.sum_(terms, axis=2)
            groups.append(PadeGroup(buses=buses, order=k, a=a, b=b))
        return PadeApproximant(groups=groups, n=values.shape[0])

    @staticmethod
    def evaluate_voltage(p: PadeApproximant, pole_tol: float = 1e-12):
        """R(1) per bus: Σa / (1 + Σb)"""
        out = None
        for g in p.groups:
            num = ad.sum_(g.a, axis=1)
            den = ad.add(1.0, ad.sum_(g.b, axis=1))
            bad = np.abs(ad.value(den)) < pole_tol
            if np.any(bad):
                raise PoleAtOneError(g.buses[bad].tolist())
            part = ad.scatter(ad.div(num, den), g.buses, p.n)
            out = part if out is None else ad.add(out, part)
        return out

    @staticmethod
    def reconstruct_taylor(p: PadeApproximant, order: int) -> np.ndarray:
        """Taylor coefficients 0..order of each bus's rational approximant"""
        out = np.zeros((p.n, order + 1), dtype=complex)
        for i in range(p.n):
            a, b = p.row(i)
            t = np.zeros(order + 1, dtype=complex)
            for n in range(order + 1):
                acc = a[n] if n < a.size else 0.0
                for k in range(1, min(n, b.size) + 1):
                    acc -= b[k - 1] * t[n - k]
                t[n] = acc
            out[i] = t
        return out

    @staticmethod
    def mismatch(v, S, adm: Admittance):
        """‖S - diag(v)(Yv)*‖∞ over the non-slack buses"""
        current = ad.matvec(adm.Y, v)
        residual = ad.sub(S, ad.mul(v, ad.conj(current)))
        return ad.amax(ad.abs_(ad.take(residual, adm.non_slack)))

    @staticmethod
    def mean_coefficient(series: VoltageSeries, n: int):
        """
        c̄[n] = Σ_i c_i[n] / N over all N buses. The slack series is the
        constant v_s, so it adds v_s at n = 0 and nothing above.
        """
        if n > series.n_max:
            raise PreconditionError(f"order {n} exceeds n_max {series.n_max}")
        total = ad.sum_(series.c[n])
        if n == 0:
            total = ad.add(total, series.v_s)
        return ad.div(total, float(ad.value(series.c[n]).size + 1))

    @staticmethod
    def full_voltage(v_non_slack, v_s, adm: Admittance):
        slack = ad.scatter(ad.reshape(ad.mul(v_s, 1.0 + 0.0j), (1,)), np.array([adm.slack_index]), adm.n_bus)
        return ad.add(ad.scatter(v_non_slack, adm.non_slack, adm.n_bus), slack)

    @staticmethod
    def solve_powerflow(case: Union[GridCase, Network], S_d, S_g, v_s,
                        n_max: Optional[int] = None, m: Optional[int] = None,
                        settings: Optional[HelmSettings] = None) -> PFSolution:
        """
        Coefficients -> Padé -> voltages -> mismatch and proxy.
        S_d is per bus, S_g per committable generator bus. Non-physical inputs
        give a large ε, never an exception.
        """
        settings = settings or HelmSettings()
        n_max = settings.n_max if n_max is None else n_max
        m = settings.pade_m if m is None else m
        if n_max < 2 * m:
            raise PreconditionError(f"n_max={n_max} must be at least 2m={2 * m}")
        network = GridService.as_network(case)
        adm = network.adm

        S_bus = GridService.bus_injection(network, S_d, S_g)
        S_ns = ad.take(S_bus, adm.non_slack)
        series = HelmService.compute_coefficients(adm, v_s, S_ns, n_max)
        coeffs = ad.stack(series.c, axis=1)  # (N-1, n_max+1)
        approx = HelmService.pade(coeffs, m, settings.pade_cond_max)
        v_ns = HelmService.evaluate_voltage(approx, settings.pole_tol)
        v = HelmService.full_voltage(v_ns, v_s, adm)

        v_plain = ad.value(v)
        finite = bool(np.all(np.isfinite(v_plain)))
        eps = HelmService.mismatch(v, S_bus, adm) if finite else math.inf
        c_bar = ad.abs_(HelmService.mean_coefficient(series, n_max))

        slack_current = ad.take(ad.matvec(adm.Y, v), np.array([adm.slack_index]))
        slack_demand = ad.take(S_d, np.array([adm.slack_index]))
        slack_injection = ad.add(ad.mul(ad.mul(v_s, 1.0 + 0.0j), ad.conj(slack_current)), slack_demand)
        slack_injection = ad.reshape(slack_injection, ())

        eps_value = float(ad.value(eps)) if finite else math.inf
        if not np.isfinite(eps_value):
            eps_value = math.inf
        tracked = any(ad.is_tracked(x) for x in (S_d, S_g, v_s))
        graph = PFGraph(v=v, epsilon=eps, c_bar=c_bar, slack_injection=slack_injection, series=series) if tracked else None
        return PFSolution(
            v=np.array(v_plain),
            epsilon=eps_value,
            c_bar_tail=float(ad.value(c_bar)),
            slack_injection=complex(ad.value(slack_injection)),
            converged=_safe_log(eps_value) < settings.xi_ln,
            pade_orders=approx.orders(),
            graph=graph,
        )

    @staticmethod
    def alpha_sweep(case: Union[GridCase, Network], S_d, S_g, v_s, alphas: Sequence[float],
                    n_values: Sequence[int], settings: Optional[HelmSettings] = None) -> List[SweepRow]:
        """ln ε of the solve at (S_d, α·S_g) for every α and series order n (Padé order n // 2)"""
        network = GridService.as_network(case)
        settings = settings or HelmSettings()
        rows = []
        for n in n_values:
            for alpha in alphas:
                sol = HelmService._solve_or_none(network, S_d, alpha * np.asarray(S_g), v_s, n, n // 2, settings)
                ln_eps = sol.ln_epsilon if sol is not None else math.inf
                rows.append(SweepRow(alpha=float(alpha), n=int(n), ln_eps=ln_eps))
        logger.info(f"alpha sweep: {len(alphas)} alphas x {len(n_values)} orders on '{network.case.name}'")
        return rows

    @staticmethod
    def sweep_coefficients(case: Union[GridCase, Network], S_d, S_g, v_s, count: int, seed: int,
                           alpha_range=(0.0, 4.0), demand_range=(0.5, 2.0),
                           settings: Optional[HelmSettings] = None) -> List[CoefficientRow]:
        """(ln|c̄[n_max]|, ln ε) over random demand and generation scalings"""
        network = GridService.as_network(case)
        settings = settings or HelmSettings()
        rng = np.random.default_rng(seed)
        rows = []
        for k in range(count):
            beta = float(rng.uniform(*demand_range))
            alpha = float(rng.uniform(*alpha_range))
            sol = HelmService._solve_or_none(network, beta * np.asarray(S_d), alpha * np.asarray(S_g), v_s,
                                             settings.n_max, settings.pade_m, settings)
            if sol is None:
                rows.append(CoefficientRow(index=k, demand_scale=beta, alpha=alpha,
                                           ln_c_bar=math.inf, ln_eps=math.inf))
                continue
            rows.append(CoefficientRow(index=k, demand_scale=beta, alpha=alpha,
                                       ln_c_bar=_safe_log(sol.c_bar_tail), ln_eps=sol.ln_epsilon))
        return rows

    @staticmethod
    def _solve_or_none(network, S_d, S_g, v_s, n_max, m, settings) -> Optional[PFSolution]:
        try:
            return HelmService.solve_powerflow(network, S_d, S_g, v_s, n_max, m, settings)
        except LopfError as e:
            logger.warning(f"solve failed: {e}")
            return None

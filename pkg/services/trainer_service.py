# services/trainer_service.py - Lagrangian training step, ELBO, inference and evaluation
"""
One training step, for a batch of demand vectors:

  1. draw S distinct commitments b ~ q_φ(b|S_d) per instance
  2. solve each (S_d, b) on its own tape: g_Θ -> HELM -> (ε, L, c̄)
  3. ε < ξ puts the triplet in G (its L trains ψ up and Θ down),
     otherwise in Ḡ (its c̄ trains Θ down)
  4. φ ascends the ELBO with λ·L as the energy of each drawn b

All gradients are taken at the parameters the step started with and
summed in instance order, so results do not depend on the thread count.
"""
import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from config.solver_config import HelmSettings
from config.train_config import TrainConfig
from schemas.report_schemas import EvaluationReport, EvaluationRow, StepMetrics
from services.grid_service import GridService, Network
from services.helm_service import HelmService, PFSolution
from services.policy_service import GROUPS, PolicyBundle, PolicyService
from services.sampler_service import SamplerService
from utils import autodiff as ad
from utils.errors import LopfError, PreconditionError

logger = logging.getLogger(__name__)

# ln ε is clipped to this range before averaging into metrics
LN_EPS_CLIP = 60.0
MIN_LAMBDA_COST = 1e-9


@dataclass
class SolveTriplet:
    epsilon: float
    L: float
    c_bar: float
    cost: float = math.inf
    k: Optional[np.ndarray] = None
    S_g: Optional[np.ndarray] = None
    v_s: Optional[float] = None
    solution: Optional[PFSolution] = None
    failed: bool = False
    tape: Optional[ad.Tape] = field(default=None, repr=False)
    nodes: Dict[str, Any] = field(default_factory=dict, repr=False)
    handles: Dict[str, Dict[str, ad.Tracked]] = field(default_factory=dict, repr=False)

    @property
    def ln_epsilon(self) -> float:
        if not np.isfinite(self.epsilon):
            return math.inf
        return math.log(self.epsilon) if self.epsilon > 0 else -math.inf

    def physical(self, xi_ln: float) -> bool:
        return self.ln_epsilon < xi_ln


@dataclass
class ElboResult:
    value: float
    weights: np.ndarray
    grad_phi: Optional[Dict[str, np.ndarray]] = None


@dataclass
class TrainerState:
    """Running quantities carried across steps (and checkpoints)"""
    step: int = 0
    window: int = 100
    recent_costs: Deque[float] = field(default_factory=deque)
    max_feasible_L: float = 0.0
    bootstrap_cost: float = 1.0

    def __post_init__(self):
        self.recent_costs = deque(self.recent_costs, maxlen=self.window)

    @property
    def lam(self) -> float:
        c_hat = float(np.mean(self.recent_costs)) if self.recent_costs else self.bootstrap_cost
        return 1.0 / max(abs(c_hat), MIN_LAMBDA_COST)

    def penalty(self, multiplier: float) -> float:
        return multiplier * max(self.max_feasible_L, abs(self.bootstrap_cost))

    def observe(self, costs: Sequence[float], losses: Sequence[float]) -> None:
        for c in costs:
            self.recent_costs.append(float(c))
        if len(losses):
            self.max_feasible_L = max(self.max_feasible_L, float(np.max(losses)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "window": self.window,
            "recent_costs": np.array(self.recent_costs, dtype=float),
            "max_feasible_L": self.max_feasible_L,
            "bootstrap_cost": self.bootstrap_cost,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainerState":
        return cls(
            step=int(data.get("step", 0)),
            window=int(data.get("window", 100)),
            recent_costs=deque(np.asarray(data.get("recent_costs", []), dtype=float).tolist()),
            max_feasible_L=float(data.get("max_feasible_L", 0.0)),
            bootstrap_cost=float(data.get("bootstrap_cost", 1.0)),
        )


@dataclass
class InferenceResult:
    b: np.ndarray
    S_g: np.ndarray
    v_s: float
    solution: Optional[PFSolution]
    cost: float
    feasible: bool
    violated: List[str]


def _global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _add_into(acc: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], scale: float = 1.0) -> None:
    for name, g in grads.items():
        acc[name] = acc[name] + scale * g


class TrainerService:

    # ------------------------------------------------------------------
    # solve triplet
    # ------------------------------------------------------------------
    @staticmethod
    def solve_triplet(bundle: PolicyBundle, network: Network, S_d, b, settings: Optional[HelmSettings] = None,
                      track: bool = True) -> SolveTriplet:
        """
        (ε, L, c̄) for one demand vector and commitment. With `track` the
        computation is recorded against Θ and ψ; solver failures come back as
        a triplet with ε = ∞.
        """
        settings = settings or HelmSettings()
        b = np.asarray(b, dtype=float)
        tape = ad.Tape() if track else None
        theta = tape.watch(bundle.theta) if track else bundle.theta
        psi = tape.watch(bundle.psi) if track else bundle.psi
        try:
            S_g, v_s = PolicyService.forward_g(bundle, S_d, b, theta)
            S_g = ad.mul(S_g, b)
            sol = HelmService.solve_powerflow(network, S_d, S_g, v_s, settings=settings)
        except LopfError as e:
            logger.debug(f"triplet solve failed: {e}")
            return SolveTriplet(epsilon=math.inf, L=math.inf, c_bar=math.inf, failed=True, tape=tape)

        graph = sol.graph
        k = PolicyService.constraint_values(sol, network)
        k_plus = ad.relu(k)
        u = PolicyService.forward_u(bundle, S_d, ad.value(k_plus), psi)
        s_inj = graph.slack_injection if graph is not None else sol.slack_injection
        cost = PolicyService.generation_cost(network, S_g, s_inj, b)
        L = ad.add(cost, ad.sum_(ad.mul(u, k_plus)))
        c_bar = graph.c_bar if graph is not None else sol.c_bar_tail

        return SolveTriplet(
            epsilon=sol.epsilon,
            L=float(ad.value(L)),
            c_bar=float(ad.value(c_bar)),
            cost=float(ad.value(cost)),
            k=np.array(ad.value(k)),
            S_g=np.array(ad.value(S_g)),
            v_s=float(ad.value(v_s)),
            solution=sol,
            tape=tape,
            nodes={"L": L, "c_bar": c_bar, "cost": cost},
            handles={"theta": theta, "psi": psi} if track else {},
        )

    @staticmethod
    def triplet_gradients(triplet: SolveTriplet, output: str, scale: float = 1.0,
                          proxy_loss: str = "log") -> Dict[str, Dict[str, np.ndarray]]:
        """
        Backward from `scale·L` (output="L") or from the proxy (output="c_bar",
        ln c̄ or c̄). Returns gradients for the Θ and ψ groups.
        """
        if triplet.tape is None or not triplet.handles:
            raise PreconditionError("triplet was not recorded on a tape")
        node = triplet.nodes[output]
        if output == "c_bar" and proxy_loss == "log":
            node = ad.log(node)
        node = ad.mul(node, scale)
        grads = triplet.tape.backward(node)
        return {group: {name: np.array(grads[h]) for name, h in triplet.handles[group].items()}
                for group in ("theta", "psi")}

    # ------------------------------------------------------------------
    # ELBO
    # ------------------------------------------------------------------
    @staticmethod
    def elbo(L_values: Sequence[float], log_q: Sequence[float], lam: float,
             bundle: Optional[PolicyBundle] = None, S_d=None, configs=None) -> ElboResult:
        """
        Monte-Carlo ELBO mean[log λ - λL - log q] over the drawn commitments.

        The φ-gradient splits ELBO = E_q[log λ - λL] + H(q): the first part by
        the score function with a leave-one-out baseline, the entropy of the
        factorized q exactly. Passing bundle, S_d and configs computes it.
        """
        L = np.asarray(L_values, dtype=float)
        log_q = np.asarray(log_q, dtype=float)
        S = L.size
        if S < 2:
            raise PreconditionError("the leave-one-out baseline needs at least two samples")
        reward = math.log(lam) - lam * L
        value = float(np.mean(reward - log_q))
        baseline = (reward.sum() - reward) / (S - 1)
        weights = (reward - baseline) / S

        grad_phi = None
        if bundle is not None:
            configs = np.asarray(configs, dtype=float)
            with ad.Tape() as tape:
                phi = tape.watch(bundle.phi)
                logits = PolicyService.logits_b(bundle, S_d, phi)
                objective = TrainerService.entropy(logits)
                for s in range(S):
                    if weights[s] != 0.0:
                        term = ad.mul(PolicyService.log_q_from_logits(logits, configs[s]), float(weights[s]))
                        objective = ad.add(objective, term)
                grads = tape.backward(objective)
            grad_phi = {name: np.array(grads[h]) for name, h in phi.items()}
        return ElboResult(value=value, weights=weights, grad_phi=grad_phi)

    @staticmethod
    def entropy(logits):
        """H of the factorized Bernoulli: Σ softplus(x) - x·sigmoid(x)"""
        return ad.sum_(ad.sub(ad.softplus(logits), ad.mul(logits, ad.sigmoid(logits))))

    @staticmethod
    def elbo_enumerated(log_q, log_p_joint) -> Dict[str, Any]:
        """
        Exact ELBO, KL(q‖p(·|S_d)) and log p(S_d) over a fully enumerated support,
        plus the ELBO gradient with respect to softmax logits of a tabular q.
        """
        log_q = np.asarray(log_q, dtype=float)
        log_p_joint = np.asarray(log_p_joint, dtype=float)
        q = np.exp(log_q)
        f = log_p_joint - log_q
        elbo = float(np.sum(q * f))
        log_evidence = float(logsumexp(log_p_joint))
        kl = float(np.sum(q * (log_q - (log_p_joint - log_evidence))))
        return {"elbo": elbo, "kl": kl, "log_evidence": log_evidence, "grad_logits": q * (f - elbo)}

    # ------------------------------------------------------------------
    # training step
    # ------------------------------------------------------------------
    @staticmethod
    def bootstrap_cost(bundle: PolicyBundle, network: Network, settings: HelmSettings) -> float:
        """Cost of the base case with every unit on at mid-box set-points"""
        S_g = 0.5 * (bundle.p_min + bundle.p_max) + 0.5j * (bundle.q_min + bundle.q_max)
        v_s = 0.5 * (bundle.vs_min + bundle.vs_max)
        try:
            sol = HelmService.solve_powerflow(network, network.base_demand, S_g, v_s, settings=settings)
            cost = float(PolicyService.generation_cost(network, S_g, sol.slack_injection))
        except LopfError as e:
            logger.warning(f"bootstrap solve failed ({e}); λ starts at 1")
            return 1.0
        if not np.isfinite(cost) or abs(cost) < MIN_LAMBDA_COST:
            return 1.0
        return abs(cost)

    @staticmethod
    def _clip(grads: Dict[str, np.ndarray], clip_norm: float) -> Dict[str, np.ndarray]:
        if clip_norm <= 0:
            return grads
        norm = _global_norm(grads)
        if norm > clip_norm:
            return {k: g * (clip_norm / norm) for k, g in grads.items()}
        return grads

    @staticmethod
    def _apply(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], rate: float, sign: float,
               clip_norm: float, label: str) -> bool:
        """params += sign·rate·grad; returns False (and leaves params) on a non-finite gradient"""
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            logger.warning(f"skipping {label} update: non-finite gradient")
            return False
        grads = TrainerService._clip(grads, clip_norm)
        for name in params:
            params[name] = params[name] + sign * rate * grads[name]
        return True

    @staticmethod
    def train_step(bundle: PolicyBundle, network: Network, batch: np.ndarray, config: TrainConfig,
                   rng: np.random.Generator, state: TrainerState,
                   pool: Optional[ThreadPoolExecutor] = None) -> Tuple[PolicyBundle, StepMetrics]:
        """
        One pass of the four updates over `batch` (B×N complex demand). Every
        gradient is taken at the start-of-step parameters, so the updates are
        simultaneous; the order below only fixes how they are written.
        """
        settings = config.helm()
        batch = np.atleast_2d(np.asarray(batch, dtype=complex))
        n_inst = batch.shape[0]
        S = min(config.samples, 2 ** network.n_commit)
        lam = state.lam if config.loss_scale == "lambda" else 1.0
        elbo_lam = state.lam

        draws = []
        for i in range(n_inst):
            probs = np.asarray(PolicyService.forward_b(bundle, batch[i]))
            draws.append(SamplerService.sample_without_replacement(probs, S, rng))

        jobs = [(i, s) for i in range(n_inst) for s in range(S)]

        def run(job):
            i, s = job
            return TrainerService.solve_triplet(bundle, network, batch[i], draws[i].configs[s], settings)

        triplets = list(pool.map(run, jobs)) if pool is not None else [run(j) for j in jobs]

        zeros = {g: {k: np.zeros_like(v) for k, v in bundle.params(g).items()} for g in GROUPS}
        grad_theta_L = {k: v.copy() for k, v in zeros["theta"].items()}
        grad_theta_c = {k: v.copy() for k, v in zeros["theta"].items()}
        grad_psi = {k: v.copy() for k, v in zeros["psi"].items()}
        grad_phi = {k: v.copy() for k, v in zeros["phi"].items()}
        norm = 1.0 / len(jobs)

        feasible_L, feasible_cost, ln_eps = [], [], []
        per_instance_L = [[0.0] * S for _ in range(n_inst)]
        per_instance_ok = [[False] * S for _ in range(n_inst)]
        for (i, s), t in zip(jobs, triplets):
            ln_eps.append(float(np.clip(t.ln_epsilon, -LN_EPS_CLIP, LN_EPS_CLIP)))
            if t.physical(config.xi_ln) and np.isfinite(t.L):
                per_instance_L[i][s] = t.L
                per_instance_ok[i][s] = True
                feasible_L.append(t.L)
                feasible_cost.append(t.cost)
                g = TrainerService.triplet_gradients(t, "L", scale=lam)
                _add_into(grad_theta_L, g["theta"], norm)
                _add_into(grad_psi, g["psi"], norm)
            elif not t.failed and np.isfinite(t.c_bar) and t.c_bar > 0:
                g = TrainerService.triplet_gradients(t, "c_bar", proxy_loss=config.proxy_loss)
                _add_into(grad_theta_c, g["theta"], norm)
            t.tape = None

        penalty = state.penalty(config.penalty_multiplier)
        elbos = []
        if S >= 2:
            for i in range(n_inst):
                L_i = [per_instance_L[i][s] if per_instance_ok[i][s] else penalty for s in range(S)]
                res = TrainerService.elbo(L_i, draws[i].log_q, elbo_lam, bundle, batch[i], draws[i].configs)
                elbos.append(res.value)
                _add_into(grad_phi, res.grad_phi, 1.0 / n_inst)

        new = bundle.copy()
        skipped = 0
        # simultaneous updates from start-of-step gradients: φ up, ψ up, Θ down on L, Θ down on c̄
        if elbos and not TrainerService._apply(new.phi, grad_phi, config.lr_phi, +1.0, config.clip_norm, "phi"):
            skipped += 1
        if feasible_L and not TrainerService._apply(new.psi, grad_psi, config.lr_psi, +1.0, config.clip_norm, "psi"):
            skipped += 1
        if feasible_L and not TrainerService._apply(new.theta, grad_theta_L, config.lr_theta, -1.0,
                                                    config.clip_norm, "theta/L"):
            skipped += 1
        if len(feasible_L) < len(jobs) and not TrainerService._apply(
                new.theta, grad_theta_c, config.lr_theta, -1.0, config.clip_norm, "theta/c_bar"):
            skipped += 1

        state.observe(feasible_cost, feasible_L)
        metrics = StepMetrics(
            step=state.step,
            feasible_frac=len(feasible_L) / len(jobs),
            mean_ln_eps=float(np.mean(ln_eps)),
            mean_L=float(np.mean(feasible_L)) if feasible_L else math.nan,
            elbo=float(np.mean(elbos)) if elbos else math.nan,
            lam=elbo_lam,
            skipped_updates=skipped,
        )
        state.step += 1
        return new, metrics

    # ------------------------------------------------------------------
    # inference and evaluation
    # ------------------------------------------------------------------
    @staticmethod
    def check_feasibility(solution: Optional[PFSolution], network: Network, xi_ln: float = -10.0
                          ) -> Tuple[bool, List[str]]:
        """ln ε < ξ, slack P/Q within limits, non-slack |v| within band (boundaries allowed)"""
        if solution is None:
            return False, ["mismatch", "slack_limits", "voltage_limits"]
        violated = []
        if not solution.ln_epsilon < xi_ln:
            violated.append("mismatch")
        plain = PFSolution(v=solution.v, epsilon=solution.epsilon, c_bar_tail=solution.c_bar_tail,
                           slack_injection=solution.slack_injection, converged=solution.converged)
        k = np.asarray(PolicyService.constraint_values(plain, network))
        n_v = 2 * (network.n_bus - 1)
        if not np.all(k[n_v:] <= 0.0):
            violated.append("slack_limits")
        if not np.all(k[:n_v] <= 0.0):
            violated.append("voltage_limits")
        return not violated, violated

    @staticmethod
    def infer(bundle: PolicyBundle, network: Network, S_d, S: int, seed, settings: Optional[HelmSettings] = None
              ) -> InferenceResult:
        """Cheapest feasible candidate among S drawn commitments, else the one of least ε"""
        settings = settings or HelmSettings()
        S_d = np.asarray(S_d, dtype=complex)
        S = min(S, 2 ** network.n_commit)
        probs = np.asarray(PolicyService.forward_b(bundle, S_d))
        draws = SamplerService.sample_without_replacement(probs, S, seed)

        best_feasible: Optional[InferenceResult] = None
        best_eps: Optional[Tuple[float, InferenceResult]] = None
        for b in draws.configs:
            S_g, v_s = PolicyService.forward_g(bundle, S_d, b)
            S_g = np.asarray(S_g) * b
            v_s = float(v_s)
            try:
                sol = HelmService.solve_powerflow(network, S_d, S_g, v_s, settings=settings)
            except LopfError as e:
                logger.debug(f"inference solve failed for b={b.tolist()}: {e}")
                sol = None
            ok, violated = TrainerService.check_feasibility(sol, network, settings.xi_ln)
            cost = math.inf if sol is None else float(PolicyService.generation_cost(
                network, S_g, sol.slack_injection, b))
            cand = InferenceResult(b=b.copy(), S_g=S_g, v_s=v_s, solution=sol, cost=cost, feasible=ok,
                                   violated=violated)
            if ok and (best_feasible is None or cost < best_feasible.cost):
                best_feasible = cand
            eps = sol.epsilon if sol is not None else math.inf
            if best_eps is None or eps < best_eps[0]:
                best_eps = (eps, cand)
        return best_feasible if best_feasible is not None else best_eps[1]

    @staticmethod
    def evaluate(bundle: PolicyBundle, network: Network, test_set: np.ndarray, S: int, seed: int,
                 settings: Optional[HelmSettings] = None,
                 oracle: Optional[Sequence[Tuple[bool, float]]] = None) -> EvaluationReport:
        """
        Feasible %, mean cost and mean seconds per instance. With oracle
        results the mean cost is taken over instances both solved feasibly.
        """
        test_set = np.atleast_2d(np.asarray(test_set, dtype=complex))
        if test_set.shape[0] == 0 or test_set.size == 0:
            raise PreconditionError("test set is empty")
        if oracle is not None and len(oracle) != test_set.shape[0]:
            raise PreconditionError(f"{len(oracle)} oracle results for {test_set.shape[0]} instances")
        rows = []
        for idx, S_d in enumerate(test_set):
            start = time.perf_counter()
            res = TrainerService.infer(bundle, network, S_d, S, np.random.default_rng([seed, idx]), settings)
            seconds = time.perf_counter() - start
            ln_eps = res.solution.ln_epsilon if res.solution is not None else math.inf
            row = EvaluationRow(instance=idx, feasible=res.feasible, cost=res.cost, seconds=seconds,
                                ln_eps=ln_eps, violated=res.violated)
            if oracle is not None:
                row.oracle_feasible, row.oracle_cost = bool(oracle[idx][0]), float(oracle[idx][1])
            rows.append(row)

        n = len(rows)
        if oracle is not None:
            both = [r for r in rows if r.feasible and r.oracle_feasible]
        else:
            both = [r for r in rows if r.feasible]
        report = EvaluationReport(
            instances=n,
            feasible_pct=100.0 * sum(r.feasible for r in rows) / n,
            mean_cost=float(np.mean([r.cost for r in both])) if both else None,
            mean_oracle_cost=float(np.mean([r.oracle_cost for r in both])) if both and oracle is not None else None,
            mutually_feasible=len(both),
            mean_seconds=float(np.mean([r.seconds for r in rows])),
            rows=rows,
        )
        logger.info(f"evaluation: {report.feasible_pct:.2f}% feasible over {n} instances, "
                    f"mean cost {report.mean_cost}, {report.mean_seconds * 1e3:.1f} ms/instance")
        return report

    @staticmethod
    def sample_batch(rng: np.random.Generator, train_set: np.ndarray, batch: int) -> np.ndarray:
        T = train_set.shape[0]
        idx = rng.choice(T, size=batch, replace=T < batch)
        return train_set[idx]

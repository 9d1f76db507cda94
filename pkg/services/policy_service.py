# services/policy_service.py - Actor, dual and commitment networks plus checkpoints
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from config.train_config import PolicySettings
from services.grid_service import Network
from services.helm_service import PFSolution
from utils import autodiff as ad
from utils.errors import CheckpointError, PreconditionError
from utils.file_helper import atomic_path

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
GROUPS = ("theta", "psi", "phi")
LAYERS = 3


@dataclass(frozen=True)
class MlpArch:
    in_dim: int
    hidden: int
    out_dim: int

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        dims = [self.in_dim, self.hidden, self.hidden, self.out_dim]
        out = {}
        for layer in range(LAYERS):
            out[f"W{layer}"] = (dims[layer], dims[layer + 1])
            out[f"b{layer}"] = (dims[layer + 1],)
        return out

    def to_dict(self) -> Dict[str, int]:
        return {"in_dim": self.in_dim, "hidden": self.hidden, "out_dim": self.out_dim}


@dataclass
class PolicyBundle:
    """
    Θ (actor g), ψ (dual u), φ (commitment b) and the case-derived constants
    the output layers need.
    """
    theta: Dict[str, np.ndarray]
    psi: Dict[str, np.ndarray]
    phi: Dict[str, np.ndarray]
    arch: Dict[str, MlpArch]
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    vs_min: float
    vs_max: float
    demand_scale: np.ndarray
    n_constraints: int
    case_hash: str = ""
    meta: Dict[str, Any] = field(default_factory=dict)

    def params(self, group: str) -> Dict[str, np.ndarray]:
        return getattr(self, group)

    def copy(self) -> "PolicyBundle":
        dup = {g: {k: v.copy() for k, v in self.params(g).items()} for g in GROUPS}
        return PolicyBundle(
            theta=dup["theta"], psi=dup["psi"], phi=dup["phi"], arch=dict(self.arch),
            p_min=self.p_min, p_max=self.p_max, q_min=self.q_min, q_max=self.q_max,
            vs_min=self.vs_min, vs_max=self.vs_max, demand_scale=self.demand_scale,
            n_constraints=self.n_constraints, case_hash=self.case_hash, meta=dict(self.meta),
        )


class PolicyService:
    """Ba mạng nơ-ron: g (phát điện), u (nhân tử đối ngẫu), b (đóng/cắt tổ máy)"""

    @staticmethod
    def init_mlp(arch: MlpArch, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        params = {}
        for name, shape in arch.shapes().items():
            if name.startswith("W"):
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-limit, limit, size=shape)
            else:
                params[name] = np.zeros(shape)
        return params

    @staticmethod
    def mlp(params: Dict[str, Any], x):
        """Three affine layers with tanh in between; plain or tracked"""
        h = x
        for layer in range(LAYERS):
            h = ad.add(ad.matvec(ad.transpose(params[f"W{layer}"]), h), params[f"b{layer}"])
            if layer < LAYERS - 1:
                h = ad.tanh(h)
        return h

    @staticmethod
    def n_constraints(network: Network) -> int:
        # upper and lower voltage band per non-slack bus, four slack limits
        return 2 * (network.n_bus - 1) + 4

    @staticmethod
    def create_bundle(network: Network, settings: Optional[PolicySettings] = None) -> PolicyBundle:
        settings = settings or PolicySettings()
        n, k = network.n_bus, network.n_commit
        n_con = PolicyService.n_constraints(network)
        arch = {
            "theta": MlpArch(2 * n + k, settings.hidden, 2 * k + 1),
            "psi": MlpArch(2 * n + n_con, settings.hidden, n_con),
            "phi": MlpArch(2 * n, settings.hidden, k),
        }
        params = {}
        for gid, group in enumerate(GROUPS):
            rng = np.random.default_rng([settings.init_seed, gid])
            params[group] = PolicyService.init_mlp(arch[group], rng)

        committed = [network.gen_buses[i] for i in network.committable]
        slack = network.case.slack_bus
        bundle = PolicyBundle(
            theta=params["theta"], psi=params["psi"], phi=params["phi"], arch=arch,
            p_min=np.array([g.pmin for g in committed]),
            p_max=np.array([g.pmax for g in committed]),
            q_min=np.array([g.qmin for g in committed]),
            q_max=np.array([g.qmax for g in committed]),
            vs_min=slack.vmin, vs_max=slack.vmax,
            demand_scale=np.maximum(np.abs(network.base_demand), settings.demand_floor),
            n_constraints=n_con,
            case_hash=network.case_hash,
        )
        logger.info(f"Created policy bundle: hidden={settings.hidden}, committable={k}, constraints={n_con}")
        return bundle

    @staticmethod
    def demand_features(bundle: PolicyBundle, S_d) -> np.ndarray:
        S_d = np.asarray(S_d)
        if S_d.shape != bundle.demand_scale.shape:
            raise PreconditionError(f"demand has shape {S_d.shape}, expected {bundle.demand_scale.shape}")
        return np.concatenate([S_d.real / bundle.demand_scale, S_d.imag / bundle.demand_scale])

    @staticmethod
    def forward_g(bundle: PolicyBundle, S_d, b, theta: Optional[Dict[str, Any]] = None):
        """
        (S_g, v_s): P, Q of each committable generator bus and the slack voltage,
        each squeezed into its box by a sigmoid output layer.
        """
        theta = bundle.theta if theta is None else theta
        b = np.asarray(b, dtype=float)
        k = bundle.p_min.size
        if b.shape != (k,):
            raise PreconditionError(f"commitment has shape {b.shape}, expected ({k},)")
        x = np.concatenate([PolicyService.demand_features(bundle, S_d), b])
        sig = ad.sigmoid(PolicyService.mlp(theta, x))
        P = ad.add(ad.mul(ad.take(sig, np.arange(k)), bundle.p_max - bundle.p_min), bundle.p_min)
        Q = ad.add(ad.mul(ad.take(sig, np.arange(k, 2 * k)), bundle.q_max - bundle.q_min), bundle.q_min)
        v_s = ad.add(ad.mul(ad.reshape(ad.take(sig, np.array([2 * k])), ()), bundle.vs_max - bundle.vs_min),
                     bundle.vs_min)
        S_g = ad.add(P, ad.mul(Q, 1j))
        return S_g, v_s

    @staticmethod
    def forward_u(bundle: PolicyBundle, S_d, k_plus, psi: Optional[Dict[str, Any]] = None):
        """Non-negative multiplier proxies, one per a-posteriori constraint"""
        psi = bundle.psi if psi is None else psi
        k_plus = np.asarray(ad.value(k_plus), dtype=float)
        if k_plus.shape != (bundle.n_constraints,):
            raise PreconditionError(f"k has shape {k_plus.shape}, expected ({bundle.n_constraints},)")
        x = np.concatenate([PolicyService.demand_features(bundle, S_d), k_plus])
        return ad.softplus(PolicyService.mlp(psi, x))

    @staticmethod
    def logits_b(bundle: PolicyBundle, S_d, phi: Optional[Dict[str, Any]] = None):
        phi = bundle.phi if phi is None else phi
        return PolicyService.mlp(phi, PolicyService.demand_features(bundle, S_d))

    @staticmethod
    def forward_b(bundle: PolicyBundle, S_d, phi: Optional[Dict[str, Any]] = None):
        """Inclusion probability of each committable unit under q(b|S_d)"""
        return ad.sigmoid(PolicyService.logits_b(bundle, S_d, phi))

    @staticmethod
    def log_q_from_logits(logits, b):
        """log Π p^b (1-p)^(1-b) with p = sigmoid(logits), computed stably"""
        b = np.asarray(b, dtype=float)
        on = ad.mul(ad.softplus(ad.neg(logits)), b)
        off = ad.mul(ad.softplus(logits), 1.0 - b)
        return ad.neg(ad.sum_(ad.add(on, off)))

    @staticmethod
    def log_q(bundle: PolicyBundle, S_d, b, phi: Optional[Dict[str, Any]] = None):
        return PolicyService.log_q_from_logits(PolicyService.logits_b(bundle, S_d, phi), b)

    @staticmethod
    def constraint_values(solution: PFSolution, network: Network, vmin=None, vmax=None):
        """
        Raw k: voltage band excess per non-slack bus (upper then lower), then
        the slack P/Q limits. Positive entries are violations.
        """
        if solution.graph is not None:
            v, s_inj = solution.graph.v, solution.graph.slack_injection
        else:
            v, s_inj = solution.v, solution.slack_injection
        ns = network.adm.non_slack
        vmin = network.vmin if vmin is None else vmin
        vmax = network.vmax if vmax is None else vmax
        vm = ad.abs_(ad.take(v, ns))
        upper = ad.sub(vm, vmax[ns])
        lower = ad.sub(vmin[ns], vm)
        pmin, pmax, qmin, qmax = network.slack_limits
        P_s, Q_s = ad.real(s_inj), ad.imag(s_inj)
        slack = ad.stack([ad.sub(P_s, pmax), ad.sub(pmin, P_s), ad.sub(Q_s, qmax), ad.sub(qmin, Q_s)])
        return ad.concatenate([upper, lower, slack])

    @staticmethod
    def generation_cost(network: Network, S_g, slack_injection, b=None):
        """
        Σ over committed units of c2 P² + c1 P + c0, plus the slack unit at the
        real part of its injection. Units with b = 0 contribute nothing.
        """
        committed = [network.gen_buses[i] for i in network.committable]
        b = np.ones(len(committed)) if b is None else np.asarray(b, dtype=float)
        c2 = np.array([g.cost.c2 for g in committed])
        c1 = np.array([g.cost.c1 for g in committed])
        c0 = np.array([g.cost.c0 for g in committed])
        P = ad.real(S_g)
        units = ad.add(ad.add(ad.mul(ad.mul(P, P), c2), ad.mul(P, c1)), c0)
        total = ad.sum_(ad.mul(units, b))
        slack_cost = network.gen_buses[network.slack_gen].cost
        P_s = ad.real(slack_injection)
        slack_term = ad.add(ad.add(ad.mul(ad.mul(P_s, P_s), slack_cost.c2), ad.mul(P_s, slack_cost.c1)),
                            slack_cost.c0)
        return ad.add(total, slack_term)

    # ------------------------------------------------------------------
    # checkpoints
    # ------------------------------------------------------------------
    @staticmethod
    def save_checkpoint(path: Union[str, Path], bundle: PolicyBundle, config_hash: str = "",
                        trainer_state: Optional[Dict[str, Any]] = None) -> Path:
        """
        One .npz holding every parameter as `<group>/<name>`, the case
        constants as `const/<name>`, trainer arrays as `state/<name>` and a
        JSON `__meta__` string. Written to a temporary file, then renamed.
        """
        path = Path(path)
        arrays: Dict[str, np.ndarray] = {}
        for group in GROUPS:
            for name, arr in bundle.params(group).items():
                arrays[f"{group}/{name}"] = np.asarray(arr)
        for name in ("p_min", "p_max", "q_min", "q_max", "demand_scale"):
            arrays[f"const/{name}"] = getattr(bundle, name)

        state = dict(trainer_state or {})
        scalars = {}
        for key, val in state.items():
            if isinstance(val, np.ndarray) or isinstance(val, list):
                arrays[f"state/{key}"] = np.asarray(val, dtype=float)
            else:
                scalars[key] = val
        meta = {
            "format": CHECKPOINT_FORMAT,
            "arch": {g: bundle.arch[g].to_dict() for g in GROUPS},
            "vs_min": bundle.vs_min,
            "vs_max": bundle.vs_max,
            "n_constraints": bundle.n_constraints,
            "case_hash": bundle.case_hash,
            "config_hash": config_hash,
            "state": scalars,
            "extra": bundle.meta,
        }
        arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
        with atomic_path(path, suffix=".npz") as tmp:
            with open(tmp, "wb") as fh:
                np.savez(fh, **arrays)
        logger.info(f"Checkpoint written: {path}")
        return path

    @staticmethod
    def load_checkpoint(path: Union[str, Path], network: Optional[Network] = None
                        ) -> Tuple[PolicyBundle, Dict[str, Any]]:
        """Returns the bundle and the trainer state (scalars from the metadata plus state arrays)"""
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            with np.load(path, allow_pickle=False) as data:
                contents = {k: data[k] for k in data.files}
        except (OSError, ValueError) as e:
            raise CheckpointError(f"unreadable checkpoint {path}: {e}")
        if "__meta__" not in contents:
            raise CheckpointError(f"{path} has no metadata entry")
        meta = json.loads(str(contents.pop("__meta__")))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format')}")
        if network is not None and meta["case_hash"] and meta["case_hash"] != network.case_hash:
            raise CheckpointError(
                f"checkpoint was trained on case {meta['case_hash']}, got {network.case_hash}")

        arch = {g: MlpArch(**meta["arch"][g]) for g in GROUPS}
        params = {g: {} for g in GROUPS}
        state_arrays = {}
        for key, arr in contents.items():
            head, _, name = key.partition("/")
            if head in params:
                params[head][name] = arr
            elif head == "state":
                state_arrays[name] = arr
        for g in GROUPS:
            expected = arch[g].shapes()
            for name, shape in expected.items():
                if name not in params[g] or params[g][name].shape != shape:
                    raise CheckpointError(f"{path}: parameter {g}/{name} missing or mis-shaped")

        bundle = PolicyBundle(
            theta=params["theta"], psi=params["psi"], phi=params["phi"], arch=arch,
            p_min=contents["const/p_min"], p_max=contents["const/p_max"],
            q_min=contents["const/q_min"], q_max=contents["const/q_max"],
            vs_min=float(meta["vs_min"]), vs_max=float(meta["vs_max"]),
            demand_scale=contents["const/demand_scale"],
            n_constraints=int(meta["n_constraints"]),
            case_hash=meta["case_hash"],
            meta=meta.get("extra", {}),
        )
        state = dict(meta.get("state", {}))
        state.update(state_arrays)
        state["config_hash"] = meta.get("config_hash", "")
        return bundle, state

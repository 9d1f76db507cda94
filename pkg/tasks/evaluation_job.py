# tasks/evaluation_job.py - Held-out evaluation, optionally against the brute-force oracle
import logging
import math
import time
from typing import List, Optional, Tuple

import numpy as np

from config.solver_config import HelmSettings, OracleSettings
from schemas.report_schemas import EvaluationReport
from services.grid_service import Network
from services.oracle_service import OracleService
from services.policy_service import PolicyBundle
from services.trainer_service import TrainerService
from utils.errors import PreconditionError

logger = logging.getLogger(__name__)


def oracle_results(network: Network, test_set: np.ndarray, oracle: OracleSettings
                   ) -> Tuple[List[Tuple[bool, float]], float]:
    """(feasible, cost) of the brute-force OPF per instance, and the mean seconds per instance"""
    out = []
    start = time.perf_counter()
    for idx, S_d in enumerate(test_set):
        res = OracleService.brute_force_opf(network, S_d, settings=oracle)
        out.append((res.feasible, res.cost if res.feasible else math.inf))
        logger.debug(f"oracle instance {idx}: feasible={res.feasible}, cost={res.cost:.4f}, {res.evaluated} solves")
    seconds = (time.perf_counter() - start) / max(len(out), 1)
    return out, seconds


def run_evaluation(bundle: PolicyBundle, network: Network, test_set: np.ndarray, samples: int, seed: int,
                   settings: HelmSettings, oracle: Optional[OracleSettings] = None) -> EvaluationReport:
    """
    Feasible percentage, mean cost and per-instance time of the policy on
    `test_set`. With `oracle`, every instance is also solved by brute force
    and the mean costs compare instances feasible for both.
    """
    test_set = np.atleast_2d(np.asarray(test_set, dtype=complex))
    if test_set.shape[0] == 0:
        raise PreconditionError("test set is empty")
    if test_set.shape[1] != network.n_bus:
        raise PreconditionError(f"demand has {test_set.shape[1]} columns, case has {network.n_bus} buses")

    reference = None
    oracle_seconds = None
    if oracle is not None:
        reference, oracle_seconds = oracle_results(network, test_set, oracle)
    report = TrainerService.evaluate(bundle, network, test_set, samples, seed, settings, reference)
    if oracle_seconds is not None:
        report.mean_oracle_seconds = oracle_seconds
        if report.mean_cost is not None and report.mean_oracle_cost:
            gap = 100.0 * (report.mean_cost - report.mean_oracle_cost) / abs(report.mean_oracle_cost)
            logger.info(f"optimality gap {gap:.2f}% over {report.mutually_feasible} instances; "
                        f"policy {report.mean_seconds * 1e3:.1f} ms vs oracle {oracle_seconds * 1e3:.1f} ms")
    return report


def report_rows(report: EvaluationReport) -> List[list]:
    """Summary as key/value rows for the report header table"""
    rows = [
        ["instances", report.instances],
        ["feasible_pct", report.feasible_pct],
        ["mean_cost", report.mean_cost],
        ["mean_seconds", report.mean_seconds],
    ]
    if report.mean_oracle_cost is not None or report.mean_oracle_seconds is not None:
        rows += [
            ["mean_oracle_cost", report.mean_oracle_cost],
            ["mutually_feasible", report.mutually_feasible],
            ["mean_oracle_seconds", report.mean_oracle_seconds],
        ]
    return rows

# routers/training.py - Subcommands: train, infer, evaluate
import logging

import numpy as np

from schemas.report_schemas import EvaluationRow
from services.demand_service import DemandService
from services.policy_service import PolicyService
from services.trainer_service import TrainerService
from tasks.evaluation_job import report_rows, run_evaluation
from tasks.train_job import run_training
from utils.cli_helper import CommandContext
from utils.errors import PreconditionError

logger = logging.getLogger(__name__)

INFER_COLUMNS = ["instance", "feasible", "cost", "ln_eps", "v_s", "b", "p", "q", "violated"]


def register(subparsers, common) -> None:
    p = subparsers.add_parser("train", parents=[common], help="learn the policy on a demand file")
    p.add_argument("--demand", help="demand file (required)")
    p.add_argument("--test-fraction", type=float, help="hold out this tail fraction of the rows")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr-theta", type=float)
    p.add_argument("--lr-psi", type=float)
    p.add_argument("--lr-phi", type=float)
    p.add_argument("--checkpoint", help="checkpoint written during and after training")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(handler=train)

    p = subparsers.add_parser("infer", parents=[common], help="set-points from a trained policy")
    p.add_argument("--checkpoint", help="trained checkpoint (required)")
    p.add_argument("--demand", help="demand file; defaults to the case-file demand")
    p.add_argument("--samples", type=int)
    p.set_defaults(handler=infer)

    p = subparsers.add_parser("evaluate", parents=[common], help="held-out feasibility and cost report")
    p.add_argument("--checkpoint", help="trained checkpoint (required)")
    p.add_argument("--demand", help="demand file (required)")
    p.add_argument("--test-fraction", type=float, help="evaluate only this tail fraction of the rows")
    p.add_argument("--samples", type=int)
    p.add_argument("--oracle", action="store_true", default=None, help="compare against brute-force OPF")
    p.add_argument("--resolution", type=int, help="oracle P/Q grid points per unit")
    p.set_defaults(handler=evaluate)


def _held_out(ctx: CommandContext, matrix: np.ndarray, tail: bool) -> np.ndarray:
    fraction = ctx.option("test_fraction", None, float)
    if fraction is None:
        return matrix
    train_part, test_part = DemandService.split(matrix, 1.0 - fraction)
    return test_part if tail else train_part


def train(ctx: CommandContext) -> int:
    network = ctx.network()
    config = ctx.train_config()
    train_set = _held_out(ctx, ctx.demand(required=True), tail=False)
    logger.info(f"train: {train_set.shape[0]} instances, config {config.config_hash()[:12]}")
    run_training(network, train_set, config,
                 checkpoint=ctx.option("checkpoint"),
                 metrics_path=ctx.option("out"),
                 resume_from=ctx.option("resume"),
                 stream=ctx.stdout)
    return 0


def _load_policy(ctx: CommandContext):
    network = ctx.network()
    bundle, _ = PolicyService.load_checkpoint(ctx.require("checkpoint"), network)
    return network, bundle


def infer(ctx: CommandContext) -> int:
    network, bundle = _load_policy(ctx)
    settings = ctx.helm_settings()
    samples = ctx.option("samples", 16, int)
    rows = []
    for idx, S_d in enumerate(ctx.demand()):
        res = TrainerService.infer(bundle, network, S_d, samples, np.random.default_rng([ctx.seed, idx]), settings)
        ln_eps = res.solution.ln_epsilon if res.solution is not None else float("inf")
        rows.append([idx, res.feasible, res.cost, ln_eps, res.v_s, res.b.tolist(), res.S_g.real.tolist(),
                     res.S_g.imag.tolist(), ",".join(res.violated) or "-"])
    ctx.write_table(INFER_COLUMNS, rows, [f"case={network.case.name} hash={network.case_hash} seed={ctx.seed}"])
    return 0


def evaluate(ctx: CommandContext) -> int:
    network, bundle = _load_policy(ctx)
    test_set = _held_out(ctx, ctx.demand(required=True), tail=True)
    if test_set.shape[0] == 0:
        raise PreconditionError("test set is empty")
    use_oracle = ctx.option("oracle", False, lambda s: s.strip().lower() in ("1", "true", "yes"))
    oracle = ctx.oracle_settings() if use_oracle else None
    report = run_evaluation(bundle, network, test_set, ctx.option("samples", 16, int), ctx.seed,
                            ctx.helm_settings(), oracle)
    comments = [f"case={network.case.name} hash={network.case_hash} seed={ctx.seed}"]
    comments += [f"{key}={value!r}" for key, value in report_rows(report)]
    ctx.write_table(EvaluationRow.columns(), [r.cells() for r in report.rows], comments)
    return 0

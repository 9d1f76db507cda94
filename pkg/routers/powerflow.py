# routers/powerflow.py - Subcommands: solve, gradcheck, sweep-alpha, sweep-coeff, oracle
import logging

import numpy as np

from schemas.report_schemas import CoefficientRow, GradCheckRow, SweepRow
from services.grid_service import GridService
from services.oracle_service import OracleService
from tasks.powerflow_jobs import (alpha_sweep_job, coefficient_sweep_job, gradient_check,
                                  nr_rows, parse_alphas, solve_report, voltage_rows)
from utils.cli_helper import CommandContext

logger = logging.getLogger(__name__)

VOLTAGE_COLUMNS = ["bus", "vm", "va_deg", "v_re", "v_im"]
# short series keep the mismatch well above rounding noise at random points
GRADCHECK_DEFAULTS = {"n_max": 4, "pade_m": 2}


def register(subparsers, common) -> None:
    p = subparsers.add_parser("solve", parents=[common], help="HELM power flow at given injections")
    p.add_argument("--demand", help="demand file; the first row is solved")
    _injection_flags(p)
    p.set_defaults(handler=solve)

    p = subparsers.add_parser("gradcheck", parents=[common], help="tape gradients against finite differences")
    p.add_argument("--count", type=int, help="random points (default 20)")
    p.add_argument("--hidden", type=int, help="hidden width of the generator network (default 16)")
    p.set_defaults(handler=gradcheck)

    p = subparsers.add_parser("sweep-alpha", parents=[common], help="ln ε against generation scaling")
    p.add_argument("--alphas", help="comma list or start:stop:step (default 0.1:4.0:0.1)")
    p.set_defaults(handler=sweep_alpha)

    p = subparsers.add_parser("sweep-coeff", parents=[common], help="ln|c̄[n]| against ln ε over random scalings")
    p.add_argument("--count", type=int, help="random scalings (default 500)")
    p.set_defaults(handler=sweep_coeff)

    p = subparsers.add_parser("oracle", parents=[common], help="Newton-Raphson solve or brute-force OPF")
    p.add_argument("mode", nargs="?", choices=["nr", "opf"], default="nr")
    p.add_argument("--demand", help="demand file (nr: first row, opf: every row)")
    _injection_flags(p)
    p.add_argument("--resolution", type=int, help="P/Q grid points per unit for opf (default 21)")
    p.set_defaults(handler=oracle)


def _injection_flags(p) -> None:
    p.add_argument("--injections", help="generator set-points CSV (bus,p,q in MW/MVAr); default: case file")
    p.add_argument("--v-s", type=float, help="slack voltage magnitude p.u. (default: case file)")


def _header(ctx: CommandContext, settings) -> list:
    network = ctx.network()
    return [f"case={network.case.name} hash={network.case_hash}",
            f"n_max={settings.n_max} pade_m={settings.pade_m} xi_ln={settings.xi_ln}"]


def solve(ctx: CommandContext) -> int:
    network = ctx.network()
    settings = ctx.helm_settings()
    S_g, v_s = ctx.setpoints()
    S_d = ctx.demand()[0]
    report, sol = solve_report(network, S_d, S_g, v_s, settings)
    comments = _header(ctx, settings) + [
        f"converged={int(report.converged)} ln_eps={report.ln_eps!r} ln_c_bar={np.log(report.c_bar_tail)!r}",
        f"slack_p={report.slack_p!r} slack_q={report.slack_q!r} v_s={report.v_s!r}",
        f"pade_min_order={report.pade_min_order} seconds={report.seconds:.6f}",
    ]
    ctx.write_table(VOLTAGE_COLUMNS, voltage_rows(network, sol.v), comments)
    return 0


def gradcheck(ctx: CommandContext) -> int:
    """Exit status 1 when any check exceeds the tolerance"""
    network = ctx.network()
    settings = ctx.helm_settings(GRADCHECK_DEFAULTS)
    oracle = ctx.oracle_settings()
    rows = gradient_check(network, ctx.option("count", 20, int), ctx.seed, settings,
                          fd_step=oracle.fd_step, hidden=ctx.option("hidden", 16, int))
    worst = max((r.rel_error for r in rows), default=float("nan"))
    comments = _header(ctx, settings) + [f"seed={ctx.seed} fd_step={oracle.fd_step!r}",
                                         f"checks={len(rows)} max_rel_error={worst!r}"]
    ctx.write_table(GradCheckRow.columns(), [r.cells() for r in rows], comments)
    return 0 if rows and all(r.passed for r in rows) else 1


def sweep_alpha(ctx: CommandContext) -> int:
    settings = ctx.helm_settings()
    rows = alpha_sweep_job(ctx.network(), parse_alphas(ctx.option("alphas")), settings)
    ctx.write_table(SweepRow.columns(), [r.cells() for r in rows], _header(ctx, settings))
    return 0


def sweep_coeff(ctx: CommandContext) -> int:
    settings = ctx.helm_settings()
    rows = coefficient_sweep_job(ctx.network(), ctx.option("count", 500, int), ctx.seed, settings)
    ctx.write_table(CoefficientRow.columns(), [r.cells() for r in rows],
                    _header(ctx, settings) + [f"seed={ctx.seed}"])
    return 0


def oracle(ctx: CommandContext) -> int:
    network = ctx.network()
    settings = ctx.oracle_settings()
    demand = ctx.demand()
    if ctx.args.mode == "nr":
        S_g, v_s = ctx.setpoints()
        converged, rows = nr_rows(network, demand[0], S_g, v_s, settings)
        comments = [f"case={network.case.name} hash={network.case_hash}", f"converged={int(converged)}"]
        ctx.write_table(VOLTAGE_COLUMNS, rows, comments)
        return 0 if converged else 1

    rows = []
    for idx, S_d in enumerate(demand):
        res = OracleService.brute_force_opf(network, S_d, settings=settings)
        rows.append([idx, res.feasible, res.cost, list(res.b) if res.b is not None else None,
                     res.v_s, None if res.S_g is None else res.S_g.real.tolist(),
                     None if res.S_g is None else res.S_g.imag.tolist(), res.evaluated])
    summary = GridService.summarize(network)
    comments = [f"case={network.case.name} hash={network.case_hash} decommittable={summary.decommittable}",
                f"resolution={settings.resolution} vs_resolution={settings.vs_resolution}"]
    ctx.write_table(["instance", "feasible", "cost", "b", "v_s", "p", "q", "evaluated"], rows, comments)
    return 0

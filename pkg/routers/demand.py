# routers/demand.py - Subcommand: synth-demand
import logging
from pathlib import Path

from services.demand_service import DemandService
from utils.cli_helper import CommandContext
from utils.errors import UsageError

logger = logging.getLogger(__name__)


def register(subparsers, common) -> None:
    p = subparsers.add_parser("synth-demand", parents=[common], help="synthetic demand with target std/mean ratios")
    p.add_argument("--count", type=int, help="number of instances (default 2500)")
    p.add_argument("--ratio", help="std/mean for every bus, or a MW trace CSV to take per-bus ratios from")
    p.set_defaults(handler=synth_demand)


def _ratios(ctx: CommandContext, network):
    raw = ctx.option("ratio", "0.1")
    try:
        return float(raw)
    except ValueError:
        if not Path(raw).is_file():
            raise UsageError(f"--ratio: {raw!r} is neither a number nor a file")
        return DemandService.ratios_from_csv(raw, network)


def synth_demand(ctx: CommandContext) -> int:
    network = ctx.network()
    out = ctx.require("out")
    demand = DemandService.synthesize(network, ctx.option("count", 2500, int), _ratios(ctx, network), ctx.seed)
    DemandService.save_demand(out, demand, network, ctx.seed)
    return 0

# main.py - Command-line entry point: power flow, gradient checks, sweeps, training, evaluation
import logging
import sys
from typing import Optional, Sequence, TextIO

from config.settings_loader import load_config_file
from logging_config import setup_logging
from routers import demand, powerflow, training
from utils.cli_helper import CliParser, CommandContext
from utils.errors import LopfError, UsageError
from utils.response_helper import one_line, response_error

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 2
EXIT_USAGE = UsageError.code


def build_parser() -> CliParser:
    # model-backed flags default to None so a config file can fill them
    common = CliParser(add_help=False)
    common.add_argument("--config", help="KEY=value settings file; flags override it")
    common.add_argument("--case", help="case file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output file (default stdout)")
    common.add_argument("--n-max", type=int)
    common.add_argument("--pade-m", type=int)
    common.add_argument("--xi-ln", type=float)
    common.add_argument("--log-dir", help="directory for lopf.log (default: console only)")
    common.add_argument("--log-level", default="INFO")

    parser = CliParser(prog="lopf", description="Differentiable AC power flow and learned OPF")
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True
    powerflow.register(subparsers, common)
    training.register(subparsers, common)
    demand.register(subparsers, common)
    return parser


def _fail(code: int, message: str, kind: str) -> int:
    sys.stderr.write(one_line(response_error(code, message, kind)) + "\n")
    sys.stderr.flush()
    return code


def run(argv: Optional[Sequence[str]] = None, stdout: Optional[TextIO] = None) -> int:
    """Parse `argv`, run one subcommand, return the exit status"""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, str(e), "UsageError")

    setup_logging(args.log_dir, args.log_level)
    try:
        ctx = CommandContext(args=args, file_values=load_config_file(args.config), stdout=stdout or sys.stdout)
        logger.debug(f"command {args.command}: {ctx.flags()}")
        return args.handler(ctx)
    except LopfError as e:
        logger.debug(f"{args.command} failed", exc_info=True)
        return _fail(e.code, str(e), type(e).__name__)
    except OSError as e:
        return _fail(EXIT_FAILURE, str(e), type(e).__name__)


if __name__ == "__main__":
    sys.exit(run())

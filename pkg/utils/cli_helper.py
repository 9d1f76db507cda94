# utils/cli_helper.py - Option lookup, case/demand loading and table output shared by the subcommands
import argparse
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence, TextIO, Tuple

import numpy as np

from config.settings_loader import merge_settings
from config.solver_config import HelmSettings, OracleSettings
from config.train_config import TrainConfig
from services.demand_service import DemandService
from services.grid_service import GridService, Network
from utils.errors import UsageError
from utils.file_helper import format_table, write_text_atomic

logger = logging.getLogger(__name__)

# samples per instance when neither the config file nor a flag sets it
DESK_SAMPLES = 16


class CliParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so run() owns the exit status"""

    def error(self, message):
        raise UsageError(message)


def flag_name(name: str) -> str:
    return "--" + name.replace("_", "-")


@dataclass
class CommandContext:
    args: argparse.Namespace
    file_values: Dict[str, str] = field(default_factory=dict)
    stdout: Optional[TextIO] = None
    _network: Optional[Network] = field(default=None, repr=False)

    # ------------------------------------------------------------------
    # options: flag > config file > default
    # ------------------------------------------------------------------
    def option(self, name: str, default: Any = None, cast: Optional[Callable[[str], Any]] = None) -> Any:
        value = getattr(self.args, name, None)
        if value is None:
            value = self.file_values.get(name)
        if value is None:
            return default
        if cast is not None and isinstance(value, str):
            try:
                return cast(value)
            except ValueError:
                raise UsageError(f"{flag_name(name)}: invalid value {value!r}")
        return value

    def require(self, name: str, cast: Optional[Callable[[str], Any]] = None) -> Any:
        value = self.option(name, cast=cast)
        if value is None:
            raise UsageError(f"{flag_name(name)} is required for '{self.args.command}'")
        return value

    def flags(self) -> Dict[str, Any]:
        return {k: v for k, v in vars(self.args).items() if v is not None}

    # ------------------------------------------------------------------
    # settings models
    # ------------------------------------------------------------------
    def helm_settings(self, defaults: Optional[Dict[str, Any]] = None) -> HelmSettings:
        base = dict(defaults or {})
        base.update(self.file_values)
        return merge_settings(HelmSettings, base, self.flags(), fields=("n_max", "pade_m", "xi_ln"))

    def oracle_settings(self) -> OracleSettings:
        return merge_settings(OracleSettings, self.file_values, self.flags())

    def train_config(self) -> TrainConfig:
        base = {"samples": DESK_SAMPLES}
        base.update(self.file_values)
        return merge_settings(TrainConfig, base, self.flags())

    @property
    def seed(self) -> int:
        return self.option("seed", 0, int)

    # ------------------------------------------------------------------
    # inputs
    # ------------------------------------------------------------------
    def network(self) -> Network:
        if self._network is None:
            case = GridService.load_case(self.require("case"))
            self._network = GridService.prepare(case)
        return self._network

    def setpoints(self) -> Tuple[np.ndarray, float]:
        """Case-file S_g and v_s, overridden by `--injections` and `--v-s`"""
        network = self.network()
        path = self.option("injections")
        S_g = network.base_setpoints() if path is None else DemandService.load_setpoints(path, network)
        v_s = self.option("v_s", float(network.case.slack_setpoint()), float)
        return S_g, v_s

    def demand(self, required: bool = False) -> np.ndarray:
        """Rows of `--demand`, or the case-file demand as a single row"""
        network = self.network()
        path = self.require("demand") if required else self.option("demand")
        if path is None:
            return network.base_demand[None, :].copy()
        return DemandService.load_demand(path, network)

    # ------------------------------------------------------------------
    # outputs
    # ------------------------------------------------------------------
    def write_table(self, columns: Sequence[str], rows, comments: Sequence[str] = ()) -> None:
        """`#`-headed TSV to `--out` (write-then-rename) or to stdout"""
        text = format_table(columns, rows, comments)
        out = self.option("out")
        if out:
            write_text_atomic(out, text)
            logger.info(f"Wrote {out}")
        else:
            self.stdout.write(text)
            self.stdout.flush()

# services/grid_service.py - Case parsing, validation and admittance assembly
import hashlib
import logging
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from schemas.grid_schemas import (
    BUS_TYPE_CODES, BUS_TYPE_NAMES, Branch, Bus, CaseSummary, GenCost, Generator, GeneratorBus, GridCase,
)
from utils import autodiff as ad
from utils.autodiff import Factorization
from utils.errors import CaseSemanticError, CaseSyntaxError, SingularBranchError

logger = logging.getLogger(__name__)

# minimum column counts of the MATPOWER tables we read
TABLE_COLUMNS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}

_TABLE_OPEN = re.compile(r"^mpc\.(\w+)\s*=\s*\[\s*(.*)$")
_SCALAR = re.compile(r"^mpc\.(\w+)\s*=\s*([^;\[]+?)\s*;?\s*$")
_FUNCTION = re.compile(r"^function\s+(?:\w+\s*=\s*)?(\w+)")


@dataclass(frozen=True)
class Admittance:
    """Y, Yʳ (slack row and column removed) and the slack coupling column"""
    Y: np.ndarray
    Y_reduced: np.ndarray
    y_slack: np.ndarray
    slack_index: int
    non_slack: np.ndarray

    @cached_property
    def factorization(self) -> Factorization:
        return Factorization(self.Y_reduced)

    @property
    def n_bus(self) -> int:
        return self.Y.shape[0]


@dataclass(frozen=True)
class Network:
    """A case with everything the solvers and policies derive from it, computed once"""
    case: GridCase
    adm: Admittance
    gen_buses: List[GeneratorBus]
    gen_index: np.ndarray          # bus position of each generator bus
    slack_gen: int                 # position of the slack in gen_buses
    committable: np.ndarray        # positions in gen_buses that may be switched off
    vmin: np.ndarray
    vmax: np.ndarray
    base_demand: np.ndarray
    case_hash: str = ""

    @property
    def n_bus(self) -> int:
        return self.case.n_bus

    @property
    def n_gen(self) -> int:
        return len(self.gen_buses)

    @property
    def n_commit(self) -> int:
        return len(self.committable)

    @property
    def slack_index(self) -> int:
        return self.adm.slack_index

    @property
    def commit_index(self) -> np.ndarray:
        """Bus position of each committable generator bus"""
        return self.gen_index[self.committable]

    def base_setpoints(self) -> np.ndarray:
        """Case-file S_g over the committable generator buses"""
        return self.case.base_generation()[self.committable]

    @property
    def slack_limits(self) -> Tuple[float, float, float, float]:
        g = self.gen_buses[self.slack_gen]
        return g.pmin, g.pmax, g.qmin, g.qmax

    def expand_commitment(self, b: Sequence[float]) -> np.ndarray:
        """Commitment per generator bus; the slack is always on"""
        full = np.ones(self.n_gen)
        full[self.committable] = np.asarray(b, dtype=float)
        return full


class GridService:
    """Đọc file case, kiểm tra và lắp ma trận tổng dẫn"""

    # ------------------------------------------------------------------
    # parsing
    # ------------------------------------------------------------------
    @staticmethod
    def _read_tables(text: str) -> Tuple[str, float, Dict[str, List[Tuple[int, List[float]]]]]:
        name = "case"
        base_mva = 100.0
        tables: Dict[str, List[Tuple[int, List[float]]]] = {}
        current: Optional[str] = None
        open_line = 0

        def add_row(table: str, lineno: int, body: str):
            body = body.strip().rstrip(";").strip()
            if not body:
                return
            for chunk in body.split(";"):
                chunk = chunk.strip()
                if not chunk:
                    continue
                try:
                    row = [float(tok) for tok in chunk.replace(",", " ").split()]
                except ValueError:
                    raise CaseSyntaxError(lineno, f"non-numeric entry in table '{table}': {chunk!r}")
                tables[table].append((lineno, row))

        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("%", 1)[0].strip()
            if not line:
                continue
            if current is not None:
                if "]" in line:
                    before = line.split("]", 1)[0]
                    add_row(current, lineno, before)
                    current = None
                else:
                    add_row(current, lineno, line)
                continue
            m = _FUNCTION.match(line)
            if m:
                name = m.group(1)
                continue
            m = _TABLE_OPEN.match(line)
            if m:
                current, rest = m.group(1), m.group(2)
                if current in tables:
                    raise CaseSyntaxError(lineno, f"table '{current}' defined twice")
                tables[current] = []
                open_line = lineno
                if "]" in rest:
                    add_row(current, lineno, rest.split("]", 1)[0])
                    current = None
                else:
                    add_row(current, lineno, rest)
                continue
            m = _SCALAR.match(line)
            if m:
                key, val = m.group(1), m.group(2).strip()
                if key == "baseMVA":
                    try:
                        base_mva = float(val)
                    except ValueError:
                        raise CaseSyntaxError(lineno, f"baseMVA is not a number: {val!r}")
                continue
            if line.startswith("return") or line == "end":
                continue
            raise CaseSyntaxError(lineno, f"unrecognized statement: {line!r}")

        if current is not None:
            raise CaseSyntaxError(open_line, f"table '{current}' is never closed")
        return name, base_mva, tables

    @staticmethod
    def _check_widths(tables, name: str):
        for lineno, row in tables.get(name, []):
            if len(row) < TABLE_COLUMNS[name]:
                raise CaseSyntaxError(lineno, f"table '{name}' needs {TABLE_COLUMNS[name]} columns, got {len(row)}")

    @staticmethod
    def _cost_from_row(lineno: int, row: List[float], base_mva: float, bus_id: int) -> GenCost:
        model, startup, shutdown, n = int(row[0]), row[1], row[2], int(row[3])
        if model != 2:
            raise CaseSemanticError(f"generator at bus {bus_id}: only polynomial costs (model 2) are supported", [bus_id])
        if n < 0 or n > 3:
            raise CaseSemanticError(f"generator at bus {bus_id}: polynomial degree {n - 1} is not supported", [bus_id])
        coeffs = row[4:4 + n]
        if len(coeffs) < n:
            raise CaseSyntaxError(lineno, f"gencost row declares {n} coefficients, found {len(coeffs)}")
        c2, c1, c0 = [0.0] * (3 - n) + list(coeffs)
        # $/MW^2h, $/MWh -> per-unit power
        return GenCost(startup=startup, shutdown=shutdown, c2=c2 * base_mva ** 2, c1=c1 * base_mva, c0=c0)

    @staticmethod
    def parse_case(text: str) -> GridCase:
        """Parse MATPOWER-style case text into a validated per-unit GridCase"""
        name, base_mva, tables = GridService._read_tables(text)
        for required in ("bus", "gen", "branch"):
            if required not in tables:
                raise CaseSemanticError(f"case has no '{required}' table")
        for t in TABLE_COLUMNS:
            GridService._check_widths(tables, t)
        if base_mva <= 0:
            raise CaseSemanticError(f"baseMVA must be positive, got {base_mva}")

        buses = []
        for lineno, row in tables["bus"]:
            bus_id, code = int(row[0]), int(row[1])
            if code not in BUS_TYPE_CODES:
                raise CaseSemanticError(f"bus {bus_id}: unsupported bus type {code}", [bus_id])
            try:
                buses.append(Bus(
                    bus_id=bus_id, bus_type=BUS_TYPE_CODES[code],
                    pd=row[2] / base_mva, qd=row[3] / base_mva,
                    gs=row[4] / base_mva, bs=row[5] / base_mva,
                    area=int(row[6]), vm=row[7], va=row[8], base_kv=row[9], zone=int(row[10]),
                    vmax=row[11], vmin=row[12],
                ))
            except ValidationError as e:
                raise CaseSemanticError(f"bus {bus_id}: {GridService._first_error(e)}", [bus_id])

        cost_rows = tables.get("gencost")
        if cost_rows is None:
            logger.warning(f"Case '{name}' has no gencost table; all costs are zero")
        elif len(cost_rows) < len(tables["gen"]):
            raise CaseSemanticError(
                f"gencost has {len(cost_rows)} rows for {len(tables['gen'])} generators")

        generators = []
        for k, (lineno, row) in enumerate(tables["gen"]):
            bus_id = int(row[0])
            status = int(row[7])
            if status <= 0:
                logger.info(f"Case '{name}': dropping out-of-service generator at bus {bus_id}")
                continue
            cost = GenCost()
            if cost_rows is not None:
                cost = GridService._cost_from_row(cost_rows[k][0], cost_rows[k][1], base_mva, bus_id)
            try:
                generators.append(Generator(
                    bus_id=bus_id, pg=row[1] / base_mva, qg=row[2] / base_mva,
                    qmax=row[3] / base_mva, qmin=row[4] / base_mva, vg=row[5], mbase=row[6],
                    status=status, pmax=row[8] / base_mva, pmin=row[9] / base_mva, cost=cost,
                ))
            except ValidationError as e:
                raise CaseSemanticError(f"generator at bus {bus_id}: {GridService._first_error(e)}", [bus_id])

        branches = []
        for lineno, row in tables["branch"]:
            f, t = int(row[0]), int(row[1])
            status = int(row[10])
            if status <= 0:
                logger.info(f"Case '{name}': dropping out-of-service branch {f}-{t}")
                continue
            branches.append(Branch(
                from_bus=f, to_bus=t, r=row[2], x=row[3], b=row[4],
                rate_a=row[5], rate_b=row[6], rate_c=row[7], ratio=row[8], angle=row[9], status=status,
            ))

        case = GridCase(name=name, base_mva=base_mva, buses=buses, generators=generators, branches=branches)
        GridService.validate(case)
        logger.debug(f"Parsed case '{name}': {len(buses)} buses, {len(generators)} generators, {len(branches)} branches")
        return case

    @staticmethod
    def _first_error(e: ValidationError) -> str:
        errs = e.errors()
        return errs[0]["msg"] if errs else str(e)

    @staticmethod
    def validate(case: GridCase) -> None:
        """Case-level invariants; row-level ones are checked by the schemas"""
        ids = case.bus_ids
        seen, dupes = set(), []
        for i in ids:
            if i in seen:
                dupes.append(i)
            seen.add(i)
        if dupes:
            raise CaseSemanticError(f"duplicate bus ids {sorted(set(dupes))}", sorted(set(dupes)))

        slacks = [b.bus_id for b in case.buses if b.bus_type == "slack"]
        if len(slacks) != 1:
            msg = "case has no slack bus" if not slacks else f"case has {len(slacks)} slack buses: {slacks}"
            raise CaseSemanticError(msg, slacks)

        for g in case.generators:
            if g.bus_id not in seen:
                raise CaseSemanticError(f"generator references missing bus {g.bus_id}", [g.bus_id])
        for br in case.branches:
            missing = [x for x in (br.from_bus, br.to_bus) if x not in seen]
            if missing:
                raise CaseSemanticError(f"branch {br.from_bus}-{br.to_bus} references missing bus {missing}", missing)
            if br.from_bus == br.to_bus:
                raise CaseSemanticError(f"branch {br.from_bus}-{br.to_bus} connects a bus to itself", [br.from_bus])

    @staticmethod
    def load_case(path: Union[str, Path]) -> GridCase:
        text = Path(path).read_text(encoding="utf-8")
        return GridService.parse_case(text)

    # ------------------------------------------------------------------
    # serialization
    # ------------------------------------------------------------------
    @staticmethod
    def format_case(case: GridCase) -> str:
        """Write the case back in the same format, MATPOWER units"""
        base = case.base_mva

        def num(x) -> str:
            x = float(x)
            return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)

        def row(values) -> str:
            return "\t" + "\t".join(num(v) for v in values) + ";"

        lines = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {num(base)};", ""]
        lines.append("%% bus data")
        lines.append("%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin")
        lines.append("mpc.bus = [")
        for b in case.buses:
            lines.append(row([b.bus_id, BUS_TYPE_NAMES[b.bus_type], b.pd * base, b.qd * base, b.gs * base,
                              b.bs * base, b.area, b.vm, b.va, b.base_kv, b.zone, b.vmax, b.vmin]))
        lines += ["];", "", "%% generator data",
                  "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin", "mpc.gen = ["]
        for g in case.generators:
            lines.append(row([g.bus_id, g.pg * base, g.qg * base, g.qmax * base, g.qmin * base, g.vg, g.mbase,
                              g.status, g.pmax * base, g.pmin * base]))
        lines += ["];", "", "%% branch data",
                  "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus", "mpc.branch = ["]
        for br in case.branches:
            lines.append(row([br.from_bus, br.to_bus, br.r, br.x, br.b, br.rate_a, br.rate_b, br.rate_c,
                              br.ratio, br.angle, br.status]))
        lines += ["];", "", "%% generator cost data", "%\t2\tstartup\tshutdown\tn\tc2\tc1\tc0", "mpc.gencost = ["]
        for g in case.generators:
            c = g.cost
            lines.append(row([2, c.startup, c.shutdown, 3, c.c2 / base ** 2, c.c1 / base, c.c0]))
        lines += ["];", ""]
        return "\n".join(lines)

    @staticmethod
    def case_hash(case: GridCase) -> str:
        return hashlib.sha256(GridService.format_case(case).encode("utf-8")).hexdigest()[:16]

    # ------------------------------------------------------------------
    # admittance
    # ------------------------------------------------------------------
    @staticmethod
    def build_admittance(case: GridCase) -> Admittance:
        """
        Y-bus: series admittance 1/(r+jx), half the line charging at each
        terminal, off-nominal tap and phase shift on the from side, bus shunts.
        """
        n = case.n_bus
        index = {b.bus_id: i for i, b in enumerate(case.buses)}
        Y = np.zeros((n, n), dtype=complex)
        for br in case.branches:
            if br.r == 0.0 and br.x == 0.0:
                raise SingularBranchError(br.from_bus, br.to_bus)
            f, t = index[br.from_bus], index[br.to_bus]
            ys = 1.0 / complex(br.r, br.x)
            tap = br.tap
            ytt = ys + 0.5j * br.b
            Y[f, f] += ytt / (tap * np.conj(tap))
            Y[f, t] += -ys / np.conj(tap)
            Y[t, f] += -ys / tap
            Y[t, t] += ytt
        for i, b in enumerate(case.buses):
            Y[i, i] += b.shunt

        slack = case.slack_index
        non_slack = np.array([i for i in range(n) if i != slack], dtype=int)
        Y_reduced = Y[np.ix_(non_slack, non_slack)].copy()
        y_slack = Y[non_slack, slack].copy()
        return Admittance(Y=Y, Y_reduced=Y_reduced, y_slack=y_slack, slack_index=slack, non_slack=non_slack)

    @staticmethod
    def prepare(case: GridCase) -> Network:
        """Build the admittance and the generator-bus view once per case"""
        adm = GridService.build_admittance(case)
        gen_buses = case.generator_buses()
        slack_gen = next(k for k, g in enumerate(gen_buses) if g.is_slack)
        committable = np.array([k for k, g in enumerate(gen_buses) if not g.is_slack], dtype=int)
        return Network(
            case=case,
            adm=adm,
            gen_buses=gen_buses,
            gen_index=np.array([g.bus_index for g in gen_buses], dtype=int),
            slack_gen=slack_gen,
            committable=committable,
            vmin=np.array([b.vmin for b in case.buses]),
            vmax=np.array([b.vmax for b in case.buses]),
            base_demand=case.base_demand(),
            case_hash=GridService.case_hash(case),
        )

    @staticmethod
    def as_network(case_or_network: Union[GridCase, Network]) -> Network:
        if isinstance(case_or_network, Network):
            return case_or_network
        return GridService.prepare(case_or_network)

    @staticmethod
    def summarize(network: Network) -> CaseSummary:
        case = network.case
        return CaseSummary(
            name=case.name,
            buses=case.n_bus,
            generators=len(case.generators),
            branches=len(case.branches),
            generator_buses=network.n_gen,
            decommittable=network.n_commit,
            base_mva=case.base_mva,
            total_demand_mw=float(network.base_demand.real.sum() * case.base_mva),
            slack_bus=case.slack_bus.bus_id,
            case_hash=network.case_hash,
        )

    @staticmethod
    def bus_injection(network: Network, S_d, S_g):
        """
        Net injection per bus: S_g (one entry per committable generator bus)
        placed on its bus, minus S_d. Works on plain or tracked arrays.
        """
        gen = ad.scatter(S_g, network.commit_index, network.n_bus)
        return ad.sub(gen, S_d)

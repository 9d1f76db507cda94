# schemas/grid_schemas.py - Case file data models (per-unit on the case base)
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, validator

BusType = Literal["pq", "gen", "slack"]

# MATPOWER bus type codes
BUS_TYPE_CODES = {1: "pq", 2: "gen", 3: "slack"}
BUS_TYPE_NAMES = {v: k for k, v in BUS_TYPE_CODES.items()}


class Bus(BaseModel):
    """Một nút của lưới. Demand and shunt are per-unit, angles in degrees."""
    bus_id: int = Field(..., description="Bus number as written in the case file")
    bus_type: BusType
    pd: float = 0.0
    qd: float = 0.0
    gs: float = 0.0
    bs: float = 0.0
    area: int = 1
    vm: float = 1.0
    va: float = 0.0
    base_kv: float = 0.0
    zone: int = 1
    vmax: float = 1.1
    vmin: float = 0.9

    class Config:
        allow_mutation = False

    # vmin follows vmax in the column order, so the band check sits on vmin
    @validator("vmin")
    def validate_voltage_band(cls, v, values):
        vmax = values.get("vmax")
        if vmax is not None and not v < vmax:
            raise ValueError(f"Vmin {v} must be below Vmax {vmax}")
        return v

    @property
    def demand(self) -> complex:
        return complex(self.pd, self.qd)

    @property
    def shunt(self) -> complex:
        return complex(self.gs, self.bs)


class GenCost(BaseModel):
    """Polynomial cost c2*P^2 + c1*P + c0 with P in per-unit, result in $/h"""
    startup: float = 0.0
    shutdown: float = 0.0
    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0

    class Config:
        allow_mutation = False

    def __call__(self, p):
        return self.c2 * p * p + self.c1 * p + self.c0


class Generator(BaseModel):
    bus_id: int
    pg: float = 0.0
    qg: float = 0.0
    qmax: float = 0.0
    qmin: float = 0.0
    vg: float = 1.0
    mbase: float = 100.0
    status: int = 1
    pmax: float = 0.0
    pmin: float = 0.0
    cost: GenCost = Field(default_factory=GenCost)

    class Config:
        allow_mutation = False

    # pmin/qmin are declared after pmax/qmax in the MATPOWER column order,
    # so the checks sit on the later field
    @validator("pmin")
    def validate_p_limits(cls, v, values):
        pmax = values.get("pmax")
        if pmax is not None and v > pmax:
            raise ValueError(f"Pmin {v} exceeds Pmax {pmax}")
        return v

    @validator("qmin")
    def validate_q_limits(cls, v, values):
        qmax = values.get("qmax")
        if qmax is not None and v > qmax:
            raise ValueError(f"Qmin {v} exceeds Qmax {qmax}")
        return v


class Branch(BaseModel):
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    rate_a: float = 0.0
    rate_b: float = 0.0
    rate_c: float = 0.0
    ratio: float = 0.0
    angle: float = 0.0
    status: int = 1

    class Config:
        allow_mutation = False

    @property
    def tap(self) -> complex:
        """Complex tap t·e^{jθ}; a zero ratio means a line (t = 1)"""
        t = self.ratio if self.ratio != 0.0 else 1.0
        return t * np.exp(1j * np.deg2rad(self.angle))


class GeneratorBus(BaseModel):
    """
    All in-service units on one bus merged into one machine: limits summed,
    cost evaluated with the power split evenly over the units.
    """
    bus_id: int
    bus_index: int
    units: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost: GenCost
    is_slack: bool = False

    class Config:
        allow_mutation = False


class GridCase(BaseModel):
    """Static network; quantities per-unit on base_mva"""
    name: str = "case"
    base_mva: float = Field(100.0, gt=0)
    buses: List[Bus]
    generators: List[Generator]
    branches: List[Branch]

    class Config:
        allow_mutation = False

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> List[int]:
        return [b.bus_id for b in self.buses]

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.bus_type == "slack")

    @property
    def slack_bus(self) -> Bus:
        return self.buses[self.slack_index]

    def bus_index(self, bus_id: int) -> int:
        for i, b in enumerate(self.buses):
            if b.bus_id == bus_id:
                return i
        raise KeyError(bus_id)

    def base_demand(self) -> np.ndarray:
        """S_d per bus, complex p.u."""
        return np.array([b.demand for b in self.buses], dtype=complex)

    def generator_buses(self) -> List[GeneratorBus]:
        """
        Generator buses in bus order. The slack bus is always present, even
        when the file lists no unit on it (limits collapse to zero then).
        """
        slack_id = self.slack_bus.bus_id
        merged = []
        for i, bus in enumerate(self.buses):
            units = [g for g in self.generators if g.bus_id == bus.bus_id]
            if not units and bus.bus_id != slack_id:
                continue
            n = max(len(units), 1)
            cost = GenCost(
                startup=sum(g.cost.startup for g in units),
                shutdown=sum(g.cost.shutdown for g in units),
                c2=sum(g.cost.c2 for g in units) / (n * n),
                c1=sum(g.cost.c1 for g in units) / n,
                c0=sum(g.cost.c0 for g in units),
            )
            merged.append(GeneratorBus(
                bus_id=bus.bus_id,
                bus_index=i,
                units=len(units),
                pmin=sum(g.pmin for g in units),
                pmax=sum(g.pmax for g in units),
                qmin=sum(g.qmin for g in units),
                qmax=sum(g.qmax for g in units),
                cost=cost,
                is_slack=bus.bus_id == slack_id,
            ))
        return merged

    def base_generation(self) -> np.ndarray:
        """Case-file dispatch per generator bus (same order as generator_buses), complex p.u."""
        out = []
        for gb in self.generator_buses():
            units = [g for g in self.generators if g.bus_id == gb.bus_id]
            out.append(complex(sum(g.pg for g in units), sum(g.qg for g in units)))
        return np.array(out, dtype=complex)

    def slack_setpoint(self) -> float:
        """Voltage magnitude the case file sets at the slack (Vg of its unit, else Vm)"""
        slack_id = self.slack_bus.bus_id
        for g in self.generators:
            if g.bus_id == slack_id:
                return g.vg
        return self.slack_bus.vm


class CaseSummary(BaseModel):
    name: str
    buses: int
    generators: int
    branches: int
    generator_buses: int
    decommittable: int
    base_mva: float
    total_demand_mw: float
    slack_bus: int
    case_hash: Optional[str] = None

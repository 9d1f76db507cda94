# schemas/report_schemas.py - Rows of the tables the jobs and the CLI emit
from typing import List, Optional

from pydantic import BaseModel, Field


class SweepRow(BaseModel):
    alpha: float
    n: int
    ln_eps: float

    @staticmethod
    def columns() -> List[str]:
        return ["alpha", "n", "ln_eps"]

    def cells(self):
        return [self.alpha, self.n, self.ln_eps]


class CoefficientRow(BaseModel):
    index: int
    demand_scale: float
    alpha: float
    ln_c_bar: float
    ln_eps: float

    @staticmethod
    def columns() -> List[str]:
        return ["index", "demand_scale", "alpha", "ln_c_bar", "ln_eps"]

    def cells(self):
        return [self.index, self.demand_scale, self.alpha, self.ln_c_bar, self.ln_eps]


class GradCheckRow(BaseModel):
    """Tape gradient against central differences for one quantity at one point"""
    point: int
    quantity: str
    wrt: str
    ln_eps: float
    tape_norm: float
    fd_norm: float
    rel_error: float
    passed: bool

    @staticmethod
    def columns() -> List[str]:
        return ["point", "quantity", "wrt", "ln_eps", "tape_norm", "fd_norm", "rel_error", "passed"]

    def cells(self):
        return [self.point, self.quantity, self.wrt, self.ln_eps, self.tape_norm, self.fd_norm, self.rel_error,
                self.passed]


class StepMetrics(BaseModel):
    """Một dòng metrics cho mỗi bước huấn luyện"""
    step: int
    feasible_frac: float
    mean_ln_eps: float
    mean_L: float
    elbo: float
    lam: float = Field(..., description="λ used for this step")
    skipped_updates: int = 0

    @staticmethod
    def columns() -> List[str]:
        return ["step", "feasible_frac", "mean_ln_eps", "mean_L", "elbo", "lambda", "skipped_updates"]

    def cells(self):
        return [self.step, self.feasible_frac, self.mean_ln_eps, self.mean_L, self.elbo, self.lam,
                self.skipped_updates]


class EvaluationRow(BaseModel):
    instance: int
    feasible: bool
    cost: float
    seconds: float
    ln_eps: float
    violated: List[str] = Field(default_factory=list)
    oracle_feasible: Optional[bool] = None
    oracle_cost: Optional[float] = None

    @staticmethod
    def columns() -> List[str]:
        return ["instance", "feasible", "cost", "seconds", "ln_eps", "violated", "oracle_feasible", "oracle_cost"]

    def cells(self):
        return [self.instance, self.feasible, self.cost, self.seconds, self.ln_eps,
                ",".join(self.violated) or "-", self.oracle_feasible, self.oracle_cost]


class EvaluationReport(BaseModel):
    instances: int
    feasible_pct: float
    mean_cost: Optional[float] = Field(None, description="Mean cost over instances feasible for both policy and oracle")
    mean_oracle_cost: Optional[float] = None
    mutually_feasible: int = 0
    mean_seconds: float
    mean_oracle_seconds: Optional[float] = None
    rows: List[EvaluationRow] = Field(default_factory=list)


class SolveReport(BaseModel):
    case: str
    converged: bool
    ln_eps: float
    c_bar_tail: float
    slack_p: float
    slack_q: float
    v_s: float
    pade_min_order: int
    seconds: float

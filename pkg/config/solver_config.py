# config/solver_config.py - Power-flow solver settings (HELM and the reference oracles)
import math

from pydantic import BaseModel, Field, validator


class HelmSettings(BaseModel):
    """Bậc chuỗi lũy thừa, bậc Padé và ngưỡng vật lý"""
    n_max: int = Field(20, ge=1, description="Highest power-series order")
    pade_m: int = Field(10, ge=0, description="Padé numerator order")
    xi_ln: float = Field(-10.0, description="Natural-log mismatch threshold; converged iff ln ε < xi_ln")
    pade_cond_max: float = Field(1e12, gt=1.0, description="Toeplitz condition cap before order reduction")
    pole_tol: float = Field(1e-12, gt=0)

    class Config:
        allow_mutation = False

    @validator("pade_m")
    def validate_orders(cls, v, values):
        n_max = values.get("n_max")
        if n_max is not None and n_max < 2 * v:
            raise ValueError(f"n_max={n_max} must be at least 2*pade_m={2 * v}")
        return v

    @property
    def xi(self) -> float:
        return math.exp(self.xi_ln)


class OracleSettings(BaseModel):
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(50, ge=1)
    resolution: int = Field(21, ge=2, description="P and Q grid points per generator")
    vs_resolution: int = Field(5, ge=1, description="Slack voltage grid points")
    threads: int = Field(1, ge=1)
    fd_step: float = Field(1e-6, gt=0)

    class Config:
        allow_mutation = False

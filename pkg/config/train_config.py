# config/train_config.py - Policy architecture and training-loop settings
import hashlib
import json
from typing import Literal

from pydantic import BaseModel, Field, validator

from config.solver_config import HelmSettings


class PolicySettings(BaseModel):
    hidden: int = Field(128, ge=1, description="Hidden width of each three-layer network")
    init_seed: int = 0
    demand_floor: float = Field(1e-3, gt=0, description="Floor of the per-bus input normalization scale")

    class Config:
        allow_mutation = False


class TrainConfig(BaseModel):
    """
    Every knob of the training loop. The hash of this model is written into
    checkpoints and metric headers so a run can be matched to its settings.
    """
    batch: int = Field(32, ge=1)
    samples: int = Field(50, ge=1, description="Commitment configurations drawn per instance")
    steps: int = Field(500, ge=1)
    seed: int = 0
    lr_theta: float = Field(1e-3, gt=0)
    lr_psi: float = Field(1e-3, gt=0)
    lr_phi: float = Field(1e-3, gt=0)
    hidden: int = Field(128, ge=1)
    n_max: int = Field(20, ge=1)
    pade_m: int = Field(10, ge=0)
    xi_ln: float = -10.0
    lambda_window: int = Field(100, ge=1, description="Feasible costs averaged for λ")
    penalty_multiplier: float = Field(10.0, gt=0)
    clip_norm: float = Field(5.0, ge=0, description="Global-norm clip per parameter group; 0 disables")
    loss_scale: Literal["lambda", "none"] = "lambda"
    proxy_loss: Literal["log", "linear"] = "log"
    checkpoint_every: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)

    class Config:
        allow_mutation = False

    @validator("pade_m")
    def validate_orders(cls, v, values):
        n_max = values.get("n_max")
        if n_max is not None and n_max < 2 * v:
            raise ValueError(f"n_max={n_max} must be at least 2*pade_m={2 * v}")
        return v

    def helm(self) -> HelmSettings:
        return HelmSettings(n_max=self.n_max, pade_m=self.pade_m, xi_ln=self.xi_ln)

    def policy(self) -> PolicySettings:
        return PolicySettings(hidden=self.hidden, init_seed=self.seed)

    def config_hash(self) -> str:
        # threads and checkpoint cadence do not change the result
        payload = self.dict(exclude={"threads", "checkpoint_every", "steps"})
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

"""Settings models for the solver, the oracles and the training loop."""
from config.solver_config import HelmSettings, OracleSettings
from config.train_config import PolicySettings, TrainConfig

__all__ = ["HelmSettings", "OracleSettings", "PolicySettings", "TrainConfig"]

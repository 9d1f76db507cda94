# tasks/train_job.py - Training loop with metrics stream, checkpoints and resume
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import ExitStack
from pathlib import Path
from typing import List, Optional, TextIO, Tuple, Union

import numpy as np

from config.train_config import TrainConfig
from schemas.report_schemas import StepMetrics
from services.grid_service import Network
from services.policy_service import PolicyBundle, PolicyService
from services.trainer_service import TrainerService, TrainerState
from utils.errors import CheckpointError, PreconditionError
from utils.file_helper import TableStream

logger = logging.getLogger(__name__)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Random stream of one step; depends only on (seed, step) so resumed runs replay exactly"""
    return np.random.default_rng([seed, step])


def start_or_resume(network: Network, config: TrainConfig,
                    resume_from: Optional[Union[str, Path]] = None) -> Tuple[PolicyBundle, TrainerState]:
    if resume_from:
        bundle, saved = PolicyService.load_checkpoint(resume_from, network)
        if saved.get("config_hash") and saved["config_hash"] != config.config_hash():
            raise CheckpointError(
                f"checkpoint config {saved['config_hash'][:12]} differs from requested {config.config_hash()[:12]}")
        state = TrainerState.from_dict(saved)
        logger.info(f"Resuming from {resume_from} at step {state.step}")
        return bundle, state
    bundle = PolicyService.create_bundle(network, config.policy())
    state = TrainerState(window=config.lambda_window,
                         bootstrap_cost=TrainerService.bootstrap_cost(bundle, network, config.helm()))
    logger.info(f"Fresh run: bootstrap cost {state.bootstrap_cost:.4f}, λ={state.lam:.3e}")
    return bundle, state


def run_training(network: Network, train_set: np.ndarray, config: TrainConfig,
                 checkpoint: Optional[Union[str, Path]] = None,
                 metrics_path: Optional[Union[str, Path]] = None,
                 resume_from: Optional[Union[str, Path]] = None,
                 stream: Optional[TextIO] = None) -> Tuple[PolicyBundle, TrainerState, List[StepMetrics]]:
    """
    Run `config.steps` steps in total (a resumed run only does the remainder).
    Metrics go to `metrics_path` (or `stream`) one row per step; the bundle is
    checkpointed every `checkpoint_every` steps and at the end.
    """
    train_set = np.atleast_2d(np.asarray(train_set, dtype=complex))
    if train_set.shape[0] == 0:
        raise PreconditionError("training set is empty")
    if train_set.shape[1] != network.n_bus:
        raise PreconditionError(f"demand has {train_set.shape[1]} columns, case has {network.n_bus} buses")
    if config.samples > 2 ** network.n_commit:
        logger.warning(f"samples={config.samples} exceeds 2^{network.n_commit}; using every configuration")

    bundle, state = start_or_resume(network, config, resume_from)
    comments = [f"case={network.case_hash}", f"config={config.config_hash()}", f"seed={config.seed}",
                f"start_step={state.step}"]
    history: List[StepMetrics] = []

    with ExitStack() as stack:
        table = stack.enter_context(TableStream(metrics_path, StepMetrics.columns(), comments, stream=stream))
        pool = stack.enter_context(ThreadPoolExecutor(max_workers=config.threads)) if config.threads > 1 else None
        while state.step < config.steps:
            rng = step_rng(config.seed, state.step)
            batch = TrainerService.sample_batch(rng, train_set, config.batch)
            bundle, metrics = TrainerService.train_step(bundle, network, batch, config, rng, state, pool)
            table.write(metrics.cells())
            history.append(metrics)
            logger.debug(f"step {metrics.step}: feasible {metrics.feasible_frac:.3f}, "
                         f"ln ε {metrics.mean_ln_eps:.2f}, L {metrics.mean_L:.4f}")
            if checkpoint and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                PolicyService.save_checkpoint(checkpoint, bundle, config.config_hash(), state.to_dict())

    if checkpoint:
        PolicyService.save_checkpoint(checkpoint, bundle, config.config_hash(), state.to_dict())
    if history:
        last = history[-1]
        logger.info(f"Training finished at step {state.step}: feasible {last.feasible_frac:.3f}, "
                    f"ln ε {last.mean_ln_eps:.2f}")
    return bundle, state, history

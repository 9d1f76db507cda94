# services/sampler_service.py - Distinct commitment configurations drawn from q(b|S_d)
import heapq
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from utils.errors import PreconditionError

logger = logging.getLogger(__name__)

MAX_ENUMERATION_BITS = 20
ATTEMPTS_PER_SAMPLE = 100
# keeps log q finite when a sigmoid saturates to exactly 0 or 1
PROB_EPS = 1e-15


@dataclass
class SampleSet:
    configs: np.ndarray   # (S, k) of 0/1
    log_q: np.ndarray     # (S,)
    filled: int = 0       # configurations added by the deterministic fill


def _rng(seed: Union[int, np.random.Generator, None]) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=float).reshape(-1)
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise PreconditionError(f"probabilities must lie in [0, 1], got {p}")
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


class SamplerService:

    @staticmethod
    def log_prob(probs, configs) -> np.ndarray:
        """log q of each row of `configs` under the factorized Bernoulli"""
        p = _check_probs(probs)
        b = np.atleast_2d(np.asarray(configs, dtype=float))
        return b @ np.log(p) + (1.0 - b) @ np.log1p(-p)

    @staticmethod
    def top_configurations(probs, count: int) -> np.ndarray:
        """
        The `count` most probable configurations in decreasing probability,
        found best-first: start at the per-bit mode and flip bits in order of
        increasing log-probability cost.
        """
        p = _check_probs(probs)
        k = p.size
        count = min(count, 2 ** k)
        mode = (p > 0.5).astype(int)
        cost = np.abs(np.log(p) - np.log1p(-p))
        order = np.argsort(cost, kind="stable")
        c = cost[order]

        out = [mode.copy()]
        if k == 0 or count <= 1:
            return np.array(out[:count], dtype=int).reshape(count, k)
        tie = 0
        heap: List[Tuple[float, int, Tuple[int, ...]]] = [(c[0], tie, (0,))]
        while heap and len(out) < count:
            total, _, flips = heapq.heappop(heap)
            config = mode.copy()
            config[order[list(flips)]] ^= 1
            out.append(config)
            last = flips[-1]
            if last + 1 < k:
                tie += 1
                heapq.heappush(heap, (total + c[last + 1], tie, flips + (last + 1,)))
                tie += 1
                heapq.heappush(heap, (total - c[last] + c[last + 1], tie, flips[:-1] + (last + 1,)))
        return np.array(out, dtype=int)

    @staticmethod
    def sample_without_replacement(probs, S: int, seed: Union[int, np.random.Generator, None] = None) -> SampleSet:
        """
        Draw Bernoulli vectors one at a time and reject repeats until S distinct
        ones are collected. After 100·S attempts the remainder is filled with the
        most probable unseen configurations.
        """
        p = _check_probs(probs)
        k = p.size
        if S < 1:
            raise PreconditionError(f"sample count must be positive, got {S}")
        if S > 2 ** k:
            raise PreconditionError(f"cannot draw {S} distinct configurations from 2^{k}")
        rng = _rng(seed)

        seen = set()
        configs = []
        attempts = 0
        cap = ATTEMPTS_PER_SAMPLE * S
        while len(configs) < S and attempts < cap:
            attempts += 1
            draw = (rng.random(k) < p).astype(int)
            key = draw.tobytes()
            if key in seen:
                continue
            seen.add(key)
            configs.append(draw)

        filled = 0
        if len(configs) < S:
            logger.warning(f"sampler: {len(configs)}/{S} distinct after {cap} attempts, filling by probability")
            for config in SamplerService.top_configurations(p, S + len(configs)):
                if len(configs) >= S:
                    break
                key = config.astype(int).tobytes()
                if key in seen:
                    continue
                seen.add(key)
                configs.append(config.astype(int))
                filled += 1

        configs = np.array(configs, dtype=int).reshape(S, k)
        return SampleSet(configs=configs, log_q=SamplerService.log_prob(p, configs), filled=filled)

    @staticmethod
    def enumerate_all(probs) -> Tuple[np.ndarray, np.ndarray]:
        """Every configuration (lexicographic, first bit most significant) with its exact probability"""
        p = _check_probs(probs)
        k = p.size
        if k > MAX_ENUMERATION_BITS:
            raise PreconditionError(f"enumeration over {k} units exceeds the limit of {MAX_ENUMERATION_BITS}")
        codes = np.arange(2 ** k)[:, None]
        shifts = np.arange(k - 1, -1, -1)[None, :]
        configs = ((codes >> shifts) & 1).astype(int)
        q = np.prod(np.where(configs == 1, p, 1.0 - p), axis=1)
        return configs, q

    @staticmethod
    def mode(probs) -> np.ndarray:
        return (np.asarray(probs) > 0.5).astype(int)

# services/demand_service.py - Demand streams: synthetic patterns, CSV traces, train/test split
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from services.grid_service import Network
from utils.errors import DemandDataError, PreconditionError
from utils.file_helper import atomic_path

logger = logging.getLogger(__name__)

DAY = 24
AR_COEFF = 0.7


class DemandService:
    """Sinh và nạp chuỗi phụ tải"""

    @staticmethod
    def _power_factor_ratio(network: Network) -> np.ndarray:
        """Q/P per bus of the base case (0 where P is 0)"""
        base = network.base_demand
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(base.real != 0.0, base.imag / base.real, 0.0)
        return ratio

    @staticmethod
    def synthesize(network: Network, T: int, ratios, seed: int) -> np.ndarray:
        """
        T×N complex demand. Per bus a daily sinusoid plus AR(1) noise is mapped
        affinely so its sample mean is the base |S_d,i| and its std/mean is the
        target ratio; the base power factor is kept. Buses with no base demand
        stay at zero.
        """
        if T < 2:
            raise PreconditionError(f"need at least two instances, got {T}")
        n = network.n_bus
        ratios = np.broadcast_to(np.asarray(ratios, dtype=float), (n,)).copy()
        if np.any(ratios < 0) or not np.all(np.isfinite(ratios)):
            raise PreconditionError("std/mean ratios must be finite and non-negative")
        rng = np.random.default_rng(seed)
        base = network.base_demand
        mean = np.abs(base)
        sign = np.where(base.real < 0, -1.0, 1.0)
        t = np.arange(T)

        out = np.zeros((T, n), dtype=complex)
        q_over_p = DemandService._power_factor_ratio(network)
        for i in range(n):
            if mean[i] == 0.0:
                continue
            phase = rng.uniform(0.0, 2 * np.pi)
            noise = np.zeros(T)
            shocks = rng.normal(0.0, 0.3, size=T)
            for step in range(1, T):
                noise[step] = AR_COEFF * noise[step - 1] + shocks[step]
            pattern = np.sin(2 * np.pi * t / DAY + phase) + noise
            z = (pattern - pattern.mean()) / pattern.std()
            # positivity needs mean * (1 + ratio * min z) > 0
            limit = 1.0 / -z.min() if z.min() < 0 else np.inf
            ratio = ratios[i]
            if ratio >= limit:
                clipped = 0.99 * limit
                logger.warning(f"bus {network.case.buses[i].bus_id}: std/mean {ratio:.4f} unreachable "
                               f"with positive demand, clipped to {clipped:.4f}")
                ratio = clipped
            magnitude = mean[i] * (1.0 + ratio * z)
            # magnitude -> P with the base power factor
            p = sign[i] * magnitude / np.sqrt(1.0 + q_over_p[i] ** 2)
            if base.real[i] == 0.0:
                out[:, i] = 1j * np.sign(base.imag[i]) * magnitude
            else:
                out[:, i] = p + 1j * p * q_over_p[i]
        logger.info(f"Synthesized {T} demand instances for {n} buses (seed {seed})")
        return out

    @staticmethod
    def _read_table(path: Union[str, Path]) -> pd.DataFrame:
        try:
            return pd.read_csv(path, comment="#", dtype=str, skipinitialspace=True)
        except FileNotFoundError:
            raise DemandDataError(f"file not found: {path}")
        except pd.errors.EmptyDataError:
            raise DemandDataError(f"file is empty: {path}")

    @staticmethod
    def _numeric(frame: pd.DataFrame, columns: Sequence[str]) -> np.ndarray:
        values = np.zeros((len(frame), len(columns)))
        for j, col in enumerate(columns):
            parsed = pd.to_numeric(frame[col], errors="coerce")
            bad = parsed.isna()
            if bad.any():
                row = int(np.nonzero(bad.to_numpy())[0][0])
                raise DemandDataError(f"non-numeric value {frame[col].iloc[row]!r}", row=row + 1, column=col)
            values[:, j] = parsed.to_numpy(dtype=float)
        return values

    @staticmethod
    def load_csv(path: Union[str, Path], network: Network) -> np.ndarray:
        """
        MW trace, one column per bus id. Converted to p.u. and given the base
        power factor of each bus.
        """
        frame = DemandService._read_table(path)
        frame.columns = [str(c).strip() for c in frame.columns]
        columns = []
        for bus in network.case.buses:
            name = str(bus.bus_id)
            if name not in frame.columns:
                raise DemandDataError(f"missing column for bus {bus.bus_id}", column=name)
            columns.append(name)
        mw = DemandService._numeric(frame, columns)
        p = mw / network.case.base_mva
        q_over_p = DemandService._power_factor_ratio(network)
        logger.info(f"Loaded {p.shape[0]} demand rows from {path}")
        return p + 1j * p * q_over_p[None, :]

    @staticmethod
    def load_setpoints(path: Union[str, Path], network: Network) -> np.ndarray:
        """
        Generator set-points in MW/MVAr, columns `bus,p,q`, one row per
        committable generator bus. Unlisted buses keep the case-file values.
        """
        frame = DemandService._read_table(path)
        frame.columns = [str(c).strip().lower() for c in frame.columns]
        for col in ("bus", "p", "q"):
            if col not in frame.columns:
                raise DemandDataError(f"missing column {col}", column=col)
        values = DemandService._numeric(frame, ["bus", "p", "q"])
        S_g = np.asarray(network.base_setpoints(), dtype=complex).copy()
        position = {network.case.buses[i].bus_id: k for k, i in enumerate(network.commit_index)}
        for row, (bus, p, q) in enumerate(values):
            k = position.get(int(bus))
            if k is None:
                raise DemandDataError(f"bus {int(bus)} has no committable generator", row=row + 1, column="bus")
            S_g[k] = complex(p, q) / network.case.base_mva
        logger.info(f"Loaded set-points for {len(values)} generator buses from {path}")
        return S_g

    @staticmethod
    def ratios_from_csv(path: Union[str, Path], network: Network) -> np.ndarray:
        """Per-bus std/mean of a MW trace (0 where the mean is 0)"""
        frame = DemandService._read_table(path)
        frame.columns = [str(c).strip() for c in frame.columns]
        ids = [str(b.bus_id) for b in network.case.buses]
        missing = [c for c in ids if c not in frame.columns]
        if missing:
            raise DemandDataError(f"missing column for bus {missing[0]}", column=missing[0])
        mw = DemandService._numeric(frame, ids)
        mean = mw.mean(axis=0)
        std = mw.std(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(mean != 0.0, std / np.abs(mean), 0.0)

    @staticmethod
    def save_demand(path: Union[str, Path], demand: np.ndarray, network: Network, seed: Optional[int]) -> Path:
        """p.u. demand as CSV: `p_<bus>` and `q_<bus>` columns under a provenance comment"""
        path = Path(path)
        ids = [b.bus_id for b in network.case.buses]
        frame = pd.DataFrame(
            np.hstack([demand.real, demand.imag]),
            columns=[f"p_{i}" for i in ids] + [f"q_{i}" for i in ids],
        )
        with atomic_path(path, suffix=".csv") as tmp:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                fh.write(f"# seed={seed} case={network.case_hash} rows={demand.shape[0]} unit=pu\n")
                frame.to_csv(fh, index=False, float_format="%.17g")
        logger.info(f"Saved {demand.shape[0]} demand rows to {path}")
        return path

    @staticmethod
    def load_demand(path: Union[str, Path], network: Network) -> np.ndarray:
        """Inverse of save_demand; falls back to a MW trace when the p_/q_ columns are absent"""
        frame = DemandService._read_table(path)
        frame.columns = [str(c).strip() for c in frame.columns]
        ids = [b.bus_id for b in network.case.buses]
        p_cols = [f"p_{i}" for i in ids]
        if not all(c in frame.columns for c in p_cols):
            return DemandService.load_csv(path, network)
        q_cols = [f"q_{i}" for i in ids]
        for c in q_cols:
            if c not in frame.columns:
                raise DemandDataError(f"missing column {c}", column=c)
        values = DemandService._numeric(frame, p_cols + q_cols)
        n = len(ids)
        return values[:, :n] + 1j * values[:, n:]

    @staticmethod
    def split(matrix: np.ndarray, fraction: float, seed: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Chronological split: the first round(T·fraction) rows train, the rest test.
        Both parts keep at least one row. `seed` is accepted for interface
        symmetry; the split is not random.
        """
        if not 0.0 < fraction < 1.0:
            raise PreconditionError(f"train fraction must be in (0, 1), got {fraction}")
        T = matrix.shape[0]
        if T < 2:
            raise PreconditionError(f"splitting needs at least two rows, got {T}")
        n_train = min(max(int(round(T * fraction)), 1), T - 1)
        logger.info(f"split: {n_train} train / {T - n_train} test")
        return matrix[:n_train], matrix[n_train:]

# config/settings_loader.py - KEY=value config file reader
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Type

from dotenv import dotenv_values
from pydantic import BaseModel, ValidationError

from utils.errors import PreconditionError

logger = logging.getLogger(__name__)


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_").lower()


def load_config_file(path: Optional[str]) -> Dict[str, str]:
    """
    Read `--config` files: KEY=value lines, `#` comments, keys are long flag
    names with dashes or underscores. The process environment is not touched.
    """
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise PreconditionError(f"config file not found: {path}")
    raw = dotenv_values(p)
    values = {normalize_key(k): v for k, v in raw.items() if v is not None}
    logger.info(f"Loaded {len(values)} settings from {p}")
    return values


def merge_settings(model: Type[BaseModel], file_values: Dict[str, Any], flag_values: Dict[str, Any],
                   fields: Optional[Iterable[str]] = None) -> BaseModel:
    """defaults < config file < flags; unknown keys are ignored per model"""
    names = set(fields) if fields is not None else set(model.__fields__)
    merged = {k: v for k, v in file_values.items() if k in names}
    merged.update({k: v for k, v in flag_values.items() if k in names and v is not None})
    try:
        return model(**merged)
    except ValidationError as e:
        raise PreconditionError(f"invalid {model.__name__}: {e}")

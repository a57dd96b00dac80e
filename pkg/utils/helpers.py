# helpers.py
# Helper functions (logging, hashing, seeded randomness)

import hashlib
import json
import logging
from typing import Any, Optional

import numpy as np

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: Optional[str] = None) -> logging.Logger:
    """
    Configure the package logger once.

    Args:
        level: Logging level name; defaults to NEURO_DSE_LOG_LEVEL

    Returns:
        The configured ``neuro_dse`` logger
    """
    if level is None:
        from neuro_dse.config import LOG_LEVEL
        level = LOG_LEVEL

    logger = logging.getLogger("neuro_dse")
    if not any(getattr(h, "_neuro_dse", False) for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._neuro_dse = True
        logger.addHandler(handler)
    logger.setLevel(level.upper() if isinstance(level, str) else level)
    return logger


def canonical_json(payload: Any) -> str:
    """Deterministic compact JSON (sorted keys) used for hashing."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_to_builtin)


def dump_json(payload: Any) -> str:
    """Deterministic indented JSON for files on disk."""
    return json.dumps(payload, sort_keys=True, indent=2, default=_to_builtin) + "\n"


def config_hash(payload: Any) -> str:
    """SHA-256 of the canonical JSON form of ``payload``."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def make_rng(seed: Optional[int]) -> np.random.Generator:
    return np.random.default_rng(seed)


def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if hasattr(value, "model_dump"):
        return value.model_dump(mode="json")
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")

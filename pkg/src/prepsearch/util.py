"""Small shared helpers: seeded RNG streams and deterministic JSON records."""
from __future__ import annotations

import json
import zlib
from typing import Any

import numpy as np


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose, derived from one root seed.

    The stream id is a CRC of the name, so the mapping is stable across runs
    and platforms (unlike hash()).
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def pyify(obj: Any) -> Any:
    """Convert numpy scalars/arrays (recursively) to plain Python values."""
    if isinstance(obj, np.ndarray):
        return [pyify(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {k: pyify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [pyify(v) for v in obj]
    return obj


def json_line(record: dict) -> str:
    """One compact JSON object per line; key order is insertion order, so
    identical records serialize to identical bytes."""
    return json.dumps(pyify(record), separators=(",", ":")) + "\n"

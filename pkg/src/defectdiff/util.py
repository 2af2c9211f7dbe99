"""Seed substreams, config hashing, and file checksums shared across modules."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def substream(seed: int, *tags) -> int:
    """Derive an independent integer seed for a named stage of a run.

    Every stochastic stage draws from its own substream so stages can be
    re-run in isolation without disturbing one another.
    """
    text = "/".join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()

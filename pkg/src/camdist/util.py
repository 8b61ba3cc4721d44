"""Small helpers shared by the training, adaptation and experiment code."""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(*objs):
    """Short stable digest of one or more (dataclass) configs."""
    blob = json.dumps([_plain(o) for o in objs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def stream(seed, *keys):
    """Independent generator for a (seed, key...) coordinate; no shared state."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))

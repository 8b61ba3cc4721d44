"""Distortion sampling and construction of meta-learning tasks.

A :class:`DistortionTask` is one camera: a whole distorted 2D trajectory
paired with its untouched 3D ground truth. For meta-learning each task is
cut into fixed-length windows and split into a support (task-level
training) and a query (task-level testing) set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera
from .camera import DistortionParams, Intrinsics
from .datagen import Clip
from .errors import InvalidInputError

SOURCES = ("predicted", "gt3d")
MODES = ("stratified", "uniform", "none")


@dataclass(frozen=True)
class SamplerConfig:
    lambda1: float = 5.0  # max |k1|, |k2|, |k3|
    lambda2: float = 0.5  # max |p1|, |p2|
    n_tasks: int = 5

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise InvalidInputError(f"lambda1 and lambda2 must be positive, got {self.lambda1}, {self.lambda2}")
        if self.n_tasks < 1:
            raise InvalidInputError(f"n_tasks must be >= 1, got {self.n_tasks}")


def sample_uniform(cfg: SamplerConfig, rng):
    k = rng.uniform(-cfg.lambda1, cfg.lambda1, size=3)
    p = rng.uniform(-cfg.lambda2, cfg.lambda2, size=2)
    return DistortionParams(*k, *p)


def stratum(cfg: SamplerConfig, i, n=None):
    """Closed k1 interval of stratum ``i`` (1-based) out of ``n``."""
    n = cfg.n_tasks if n is None else n
    lo = -cfg.lambda1 + 2 * cfg.lambda1 * ((i - 1) / n)
    hi = -cfg.lambda1 + 2 * cfg.lambda1 * (i / n)
    return lo, hi


def sample_k1_stratified(cfg: SamplerConfig, i, rng, n=None):
    """k1 for the i-th task of a meta-batch, drawn from the i-th of n even bins.

    Bins are half-open ``[lo, hi)`` except the last, which includes +lambda1.
    """
    n = cfg.n_tasks if n is None else n
    if not 1 <= i <= n:
        raise InvalidInputError(f"task index must be in 1..{n}, got {i}")
    u = (i - 1 + rng.random()) / n
    k1 = -cfg.lambda1 + 2 * cfg.lambda1 * u
    lo, hi = stratum(cfg, i, n)
    # rounding must not push a draw onto the next bin's lower edge
    if i < n and k1 >= hi:
        k1 = np.nextafter(hi, -np.inf)
    return float(max(k1, lo))


def sample_stratified(cfg: SamplerConfig, i, rng, n=None):
    k1 = sample_k1_stratified(cfg, i, rng, n)
    rest = sample_uniform(cfg, rng)
    return DistortionParams(k1, rest.k2, rest.k3, rest.p1, rest.p2)


@dataclass
class DistortionTask:
    inputs: np.ndarray  # (T, J, 2) distorted pixels
    targets: np.ndarray  # (T, J, 3) ground truth, never modified
    params: DistortionParams
    intrinsics: Intrinsics
    root: int = 0

    def __post_init__(self):
        if self.inputs.shape[:2] != self.targets.shape[:2]:
            raise InvalidInputError(
                f"input {self.inputs.shape} and target {self.targets.shape} disagree on frames/joints"
            )


def task_from_predicted(traj, gt, K: Intrinsics, d: DistortionParams, root=0):
    """Distort detector keypoints; the 3D target is passed through untouched."""
    traj = np.asarray(traj, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if traj.shape[:2] != gt.shape[:2]:
        raise InvalidInputError(f"trajectory {traj.shape} and ground truth {gt.shape} disagree")
    return DistortionTask(camera.distort_pixel(traj, K, d), gt, d, K, root)


def task_from_gt3d(gt, K: Intrinsics, d: DistortionParams, root=0):
    """Project clean ground truth, then distort; no detector jitter on this path."""
    gt = np.asarray(gt, dtype=np.float64)
    return task_from_predicted(camera.project(gt, K), gt, K, d, root)


def task_for_clip(clip: Clip, d: DistortionParams, source="predicted"):
    m = clip.motion
    if source == "predicted":
        return task_from_predicted(clip.keypoints, m.gt3d, m.intrinsics, d, m.topology.root)
    if source == "gt3d":
        return task_from_gt3d(m.gt3d, m.intrinsics, d, m.topology.root)
    raise InvalidInputError(f"unknown task source {source!r}; expected one of {SOURCES}")


@dataclass
class WindowBatch:
    """Temporal windows and the root-relative 3D pose of each center frame."""

    inputs: np.ndarray  # (B, T, J, 2) pixels
    targets: np.ndarray | None  # (B, J, 3) mm, root-relative
    intrinsics: Intrinsics

    def __len__(self):
        return self.inputs.shape[0]


def windows(task: DistortionTask, frames, starts=None):
    """Cut a task into windows of ``frames`` frames (all stride-1 windows by default)."""
    T = task.inputs.shape[0]
    if T < frames:
        raise InvalidInputError(f"sequence of {T} frames is shorter than the {frames}-frame window")
    if starts is None:
        starts = np.arange(T - frames + 1)
    starts = np.asarray(starts, dtype=np.int64)
    idx = starts[:, None] + np.arange(frames)
    centers = starts + frames // 2
    tgt = task.targets[centers]
    tgt = tgt - tgt[:, task.root : task.root + 1]
    return WindowBatch(task.inputs[idx], tgt, task.intrinsics)


@dataclass
class EpisodeTask:
    """One meta-learning task: support/query windows under one distortion."""

    params: DistortionParams
    support: WindowBatch
    query: WindowBatch


def split_starts(n_starts, rng):
    """Disjoint 50/50 support/query split of the window start indices."""
    perm = rng.permutation(n_starts)
    half = n_starts // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def make_episode(clip: Clip, d: DistortionParams, frames, batch_size, rng, source="predicted"):
    task = task_for_clip(clip, d, source)
    n_starts = task.inputs.shape[0] - frames + 1
    if n_starts < 2:
        raise InvalidInputError(f"clip of {task.inputs.shape[0]} frames too short for support/query windows")
    sup, qry = split_starts(n_starts, rng)
    sup = rng.choice(sup, size=batch_size, replace=len(sup) < batch_size)
    qry = rng.choice(qry, size=batch_size, replace=len(qry) < batch_size)
    return EpisodeTask(d, windows(task, frames, sup), windows(task, frames, qry))


def draw_params(cfg: SamplerConfig, mode, i, rng):
    if mode == "stratified":
        return sample_stratified(cfg, i, rng)
    if mode == "uniform":
        return sample_uniform(cfg, rng)
    if mode == "none":
        return DistortionParams.zeros()
    raise InvalidInputError(f"unknown sampling mode {mode!r}; expected one of {MODES}")


def make_meta_batch(clips, cfg: SamplerConfig, mode, rng, frames=9, batch_size=128, source="predicted"):
    """Sample ``cfg.n_tasks`` episode tasks.

    Each task gets its own child generator seeded from ``rng``, so the
    result does not depend on the order in which tasks are built.
    """
    if not clips:
        raise InvalidInputError("cannot sample tasks from an empty dataset")
    task_rngs = [np.random.default_rng(s) for s in rng.integers(0, 2**63, size=cfg.n_tasks)]
    batch = []
    for i, trng in enumerate(task_rngs, start=1):
        d = draw_params(cfg, mode, i, trng)
        clip = clips[int(trng.integers(len(clips)))]
        batch.append(make_episode(clip, d, frames, batch_size, trng, source))
    return batch


def bin_violations(k1_values, cfg: SamplerConfig):
    """Number of strata not holding exactly one of the given k1 values."""
    n = len(k1_values)
    counts = np.zeros(n, dtype=int)
    for k1 in k1_values:
        for i in range(1, n + 1):
            lo, hi = stratum(cfg, i, n)
            if lo <= k1 < hi or (i == n and k1 == hi):
                counts[i - 1] += 1
                break
    return int(np.sum(counts != 1))

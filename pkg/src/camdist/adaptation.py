"""Test-time adaptation to one camera.

Scenario 1 fine-tunes on a small labeled set recorded with the target
camera. Scenario 2 (Inference Stage Optimization) sees only unlabeled test
keypoints and minimizes bone-length symmetry plus bone-length consistency
of the network's own predictions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import lifter as L
from .errors import InvalidInputError, NumericError
from .skeleton import SkeletonTopology, bone_lengths
from .taskgen import WindowBatch
from .util import stream


@dataclass(frozen=True)
class AdaptConfig:
    lr: float = 0.6
    epochs: int = 100
    scenario: int = 1
    batch_size: int = 1024
    optimizer: str = "sgd"
    w_symmetry: float = 1.0
    w_consistency: float = 1.0
    n_windows: int = 256  # size of the adaptation set drawn per environment
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidInputError("adaptation lr must be positive")
        if self.epochs < 0:
            raise InvalidInputError("adaptation epochs must be >= 0")
        if self.scenario not in (1, 2):
            raise InvalidInputError(f"scenario must be 1 or 2, got {self.scenario}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidInputError(f"unknown adaptation optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.n_windows < 1:
            raise InvalidInputError("batch_size and n_windows must be >= 1")


def symmetry_loss(pred, topo: SkeletonTopology):
    """Sum over frames and mirror pairs of |left bone length - right bone length|."""
    if not topo.mirror_pairs:
        raise InvalidInputError("topology defines no mirror pairs")
    lengths = bone_lengths(pred, topo)
    left = [l for l, _ in topo.mirror_pairs]
    right = [r for _, r in topo.mirror_pairs]
    return abs(lengths[..., left] - lengths[..., right]).sum()


def consistency_loss(pred, topo: SkeletonTopology):
    """Sum over consecutive frames and bones of |l(t+1) - l(t)|."""
    if pred.shape[0] < 2:
        raise InvalidInputError("bone-length consistency needs at least two frames")
    lengths = bone_lengths(pred, topo)
    return abs(lengths[1:] - lengths[:-1]).sum()


def iso_loss(pred, topo, w_symmetry=1.0, w_consistency=1.0):
    return w_symmetry * symmetry_loss(pred, topo) + w_consistency * consistency_loss(pred, topo)


@dataclass
class UnlabeledClip:
    """Test-environment keypoints only; deliberately carries no 3D labels."""

    keypoints: np.ndarray  # (T, J, 2) distorted pixels
    intrinsics: object

    def windows(self, frames):
        T = self.keypoints.shape[0]
        if T < frames + 1:
            raise InvalidInputError(f"unlabeled clip of {T} frames too short for consecutive {frames}-frame windows")
        idx = np.arange(T - frames + 1)[:, None] + np.arange(frames)
        return self.keypoints[idx]


def _make_opt(params, cfg):
    from .training import Optimizer

    return Optimizer(params, cfg.optimizer, cfg.lr)


def _curve_row(epoch, loss, monitor, params):
    row = {"epoch": epoch, "loss": loss}
    if monitor is not None:
        row["mpjpe"] = float(monitor(params))
    return row


def finetune_scenario1(params, labeled: WindowBatch, cfg: AdaptConfig, lifter_cfg, monitor=None):
    """Supervised MPJPE fine-tuning on a small labeled set.

    ``monitor(params) -> float`` is evaluated before training and after
    every epoch (typically MPJPE on held-out data) and recorded in the
    curve; it never influences the updates. On numeric divergence the
    parameters with the lowest training loss seen so far are returned.
    """
    if labeled.targets is None:
        raise InvalidInputError("scenario 1 needs labeled windows")
    n = len(labeled)
    opt = _make_opt(params, cfg)
    cur = opt.current()
    with torch.no_grad():
        loss0 = float(L.batch_loss(cur, labeled, lifter_cfg))
    curve = [_curve_row(0, loss0, monitor, cur)]
    best = (loss0, cur)
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, 1, epoch).permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            sel = order[s : s + cfg.batch_size]
            mb = WindowBatch(labeled.inputs[sel], labeled.targets[sel], labeled.intrinsics)
            try:
                loss, g = L.grad(opt.current(), lambda p: L.batch_loss(p, mb, lifter_cfg))
            except NumericError:
                return best[1], curve
            opt.step(g)
            losses.append(float(loss.detach()) * len(sel))
        cur = opt.current()
        ep_loss = sum(losses) / n
        if not math.isfinite(ep_loss):
            return best[1], curve
        if ep_loss < best[0]:
            best = (ep_loss, cur)
        curve.append(_curve_row(epoch + 1, ep_loss, monitor, cur))
    return opt.current(), curve


def iso_objective(params, clips_windows, intrinsics, lifter_cfg, topo, cfg: AdaptConfig):
    """Mean over clips of the per-frame ISO loss (metres) of consecutive predictions."""
    total = 0.0
    for win, K in zip(clips_windows, intrinsics):
        pred = L.forward(params, win, K, lifter_cfg)  # (T', J, 3) consecutive center frames
        total = total + iso_loss(pred, topo, cfg.w_symmetry, cfg.w_consistency) / pred.shape[0]
    return total * L.LOSS_SCALE / len(clips_windows)


def iso_scenario2(params, unlabeled, cfg: AdaptConfig, lifter_cfg, topo, monitor=None):
    """Inference Stage Optimization on unlabeled clips (no 3D labels are accepted).

    Every clip is turned into stride-1 windows so that predictions for
    frames t and t+1 come from the same stream. One epoch is one pass over
    the clips in minibatches of ``cfg.batch_size`` windows (whole clips).
    """
    for u in unlabeled:
        if not isinstance(u, UnlabeledClip):
            raise InvalidInputError("ISO accepts UnlabeledClip inputs only")
    wins = [u.windows(lifter_cfg.frames) for u in unlabeled]
    Ks = [u.intrinsics for u in unlabeled]
    opt = _make_opt(params, cfg)
    cur = opt.current()
    with torch.no_grad():
        loss0 = float(iso_objective(cur, wins, Ks, lifter_cfg, topo, cfg))
    curve = [_curve_row(0, loss0, monitor, cur)]
    best = (loss0, cur)
    # group whole clips into minibatches of about batch_size windows
    groups, group, size = [], [], 0
    for i, w in enumerate(wins):
        group.append(i)
        size += len(w)
        if size >= cfg.batch_size:
            groups.append(group)
            group, size = [], 0
    if group:
        groups.append(group)
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, 2, epoch).permutation(len(groups))
        losses = []
        for gi in order:
            sel = groups[gi]
            try:
                loss, g = L.grad(
                    opt.current(),
                    lambda p: iso_objective(p, [wins[i] for i in sel], [Ks[i] for i in sel], lifter_cfg, topo, cfg),
                )
            except NumericError:
                return best[1], curve
            opt.step(g)
            losses.append(float(loss.detach()) * len(sel))
        cur = opt.current()
        ep_loss = sum(losses) / len(wins)
        if ep_loss < best[0]:
            best = (ep_loss, cur)
        curve.append(_curve_row(epoch + 1, ep_loss, monitor, cur))
    return opt.current(), curve


CURVE_COLUMNS = ("label", "epoch", "loss", "mpjpe")


def write_curves_csv(path, curves):
    """``curves`` maps a label (e.g. 'maml/S1/d1') to a list of curve rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for label, rows in curves.items():
            for r in rows:
                mp = "" if "mpjpe" not in r else format(r["mpjpe"], ".6f")
                w.writerow([label, r["epoch"], format(r["loss"], ".9f"), mp])


def read_curves_csv(path):
    curves = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {"epoch": int(r["epoch"]), "loss": float(r["loss"])}
            if r["mpjpe"]:
                row["mpjpe"] = float(r["mpjpe"])
            curves.setdefault(r["label"], []).append(row)
    return curves

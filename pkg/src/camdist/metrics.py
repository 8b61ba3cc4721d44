"""MPJPE, Procrustes-aligned MPJPE and PCKh evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, InvalidInputError


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * points @ self.rotation.T + self.translation


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3 or pred.ndim < 2:
        raise InvalidInputError(f"prediction {pred.shape} and ground truth {gt.shape} must be matching (..., J, 3)")
    return pred, gt


def mpjpe(pred, gt):
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def procrustes_align(pred, gt):
    """Least-squares similarity transform taking ``pred`` (J, 3) onto ``gt``."""
    pred, gt = _pair(pred, gt)
    if pred.ndim != 2:
        raise InvalidInputError("procrustes_align works on a single (J, 3) pose")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    X, Y = pred - mu_p, gt - mu_g
    sv_gt = np.linalg.svd(Y, compute_uv=False)
    if sv_gt[1] <= 1e-9 * max(sv_gt[0], 1.0):
        raise DegenerateGeometryError("ground-truth joints are collinear or coincident")
    var_p = np.sum(X * X)
    if var_p == 0:
        raise DegenerateGeometryError("predicted joints are all coincident")
    U, S, Vt = np.linalg.svd(Y.T @ X)  # cross-covariance gt <- pred
    signs = np.ones(3)
    if np.linalg.det(U @ Vt) < 0:
        signs[-1] = -1.0
    R = (U * signs) @ Vt
    scale = float(np.sum(S * signs) / var_p)
    t = mu_g - scale * R @ mu_p
    tf = SimilarityTransform(scale, R, t)
    return tf, tf.apply(pred)


def p_mpjpe(pred, gt):
    """MPJPE after per-frame Procrustes alignment."""
    pred, gt = _pair(pred, gt)
    P = pred.reshape(-1, *pred.shape[-2:])
    G = gt.reshape(-1, *gt.shape[-2:])
    errs = [np.mean(np.linalg.norm(procrustes_align(p, g)[1] - g, axis=-1)) for p, g in zip(P, G)]
    return float(np.mean(errs))


def pckh(pred, gt, topo, ratio=0.5):
    """Percentage of joints closer than ``ratio`` x the frame's head-segment length.

    The comparison is strict: a joint exactly at the threshold is wrong.
    """
    pred, gt = _pair(pred, gt)
    P = pred.reshape(-1, *pred.shape[-2:])
    G = gt.reshape(-1, *gt.shape[-2:])
    neck, head = topo.head_segment
    head_len = np.linalg.norm(G[:, head] - G[:, neck], axis=-1)
    if np.any(head_len <= 0):
        raise DegenerateGeometryError("ground-truth head segment has zero length")
    dist = np.linalg.norm(P - G, axis=-1)
    return float(100.0 * np.mean(dist < ratio * head_len[:, None]))


@dataclass
class MetricReport:
    mpjpe: float
    p_mpjpe: float
    pckh: float
    breakdown: list = field(default_factory=list)  # rows of dicts

    def __post_init__(self):
        if not 0.0 <= self.pckh <= 100.0:
            raise InvalidInputError(f"PCKh {self.pckh} outside [0, 100]")


def evaluate(pred, gt, topo, groups=None):
    """Full report; ``groups`` optionally labels each frame for a breakdown table."""
    rep = MetricReport(mpjpe(pred, gt), p_mpjpe(pred, gt), pckh(pred, gt, topo))
    if groups is not None:
        groups = np.asarray(groups)
        for g in sorted(set(groups.tolist())):
            sel = groups == g
            rep.breakdown.append(
                {"group": g, "frames": int(sel.sum()), "mpjpe": mpjpe(pred[sel], gt[sel]),
                 "p_mpjpe": p_mpjpe(pred[sel], gt[sel]), "pckh": pckh(pred[sel], gt[sel], topo)}
            )
    return rep


METRIC_COLUMNS = ("preset", "scenario", "variant", "metric", "value")


def fmt(value):
    """Fixed text form used in every CSV so reruns compare byte-for-byte."""
    return format(float(value), ".6f")


def write_metric_csv(path, rows):
    """Rows are dicts with METRIC_COLUMNS keys; one row per (preset, scenario, metric)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["preset"], r["scenario"], r.get("variant", ""), r["metric"], fmt(r["value"])])


def report_rows(report: MetricReport, preset, scenario, variant=""):
    rows = [
        {"preset": preset, "scenario": scenario, "variant": variant, "metric": m, "value": getattr(report, m)}
        for m in ("mpjpe", "p_mpjpe", "pckh")
    ]
    for b in report.breakdown:
        for m in ("mpjpe", "p_mpjpe", "pckh"):
            rows.append({"preset": preset, "scenario": scenario, "variant": variant,
                         "metric": f"{m}[{b['group']}]", "value": b[m]})
    return rows


def read_metric_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["value"] = float(r["value"])
    return rows

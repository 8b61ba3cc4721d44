"""Shared fixtures-as-functions for gradient checks."""

import numpy as np
import torch

from camdist import lifter as L
from camdist.camera import Intrinsics
from camdist.taskgen import WindowBatch


def random_batch(cfg, n, seed):
    rng = np.random.default_rng(seed)
    K = Intrinsics.default()
    pix = rng.uniform(200, 800, size=(n, cfg.frames, cfg.joints, 2))
    tgt = rng.normal(size=(n, cfg.joints, 3)) * 300
    tgt -= tgt[:, cfg.root : cfg.root + 1]
    return WindowBatch(pix, tgt, K)


def flat_loss(params, batch, cfg):
    """Loss as a function of a flat numpy parameter vector."""

    def f(vec):
        with torch.no_grad():
            return float(L.batch_loss(params.with_flat(torch.from_numpy(vec)), batch, cfg))

    return f


def composed_loss(params, support, query, alpha, cfg):
    """Query loss after one exact inner SGD step, as a function of the flat vector."""

    def f(vec):
        p = params.with_flat(torch.from_numpy(vec))
        _, g = L.grad(p, lambda q: L.batch_loss(q, support, cfg))
        adapted = L.sgd_step(p, g, alpha)
        with torch.no_grad():
            return float(L.batch_loss(adapted, query, cfg))

    return f


def relative_errors(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)

"""Random-distortion pretraining followed by MAML meta-training.

Every sampling step draws from its own generator keyed by
``(seed, phase, epoch, step)``, so a run resumed from an epoch checkpoint
replays exactly the batches the uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import lifter as L
from .errors import InvalidInputError, NumericError
from .taskgen import SamplerConfig, make_meta_batch
from .util import config_hash, stream

log = logging.getLogger(__name__)

PRETRAIN, META = 1, 2
QUERY_MODES = ("fresh_uniform", "reuse")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1  # inner (task-level) SGD rate
    beta: float = 0.001  # outer rate
    meta_batch: int = 5
    batch_size: int = 128
    epochs: int = 6
    steps_per_epoch: int = 40
    pretrain_epochs: int = 6
    pretrain_mode: str = "uniform"  # "none" trains on undistorted input only
    lr_decay: float = 0.95
    lambda1: float = 5.0
    lambda2: float = 0.5
    seed: int = 0
    second_order: bool = True
    outer_optimizer: str = "adam"  # "sgd" gives a plain gradient step
    task_sampling: str = "stratified"  # task-level training distribution
    query_mode: str = "fresh_uniform"
    source: str = "predicted"

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise InvalidInputError("learning rates must be positive")
        if self.meta_batch < 1 or self.batch_size < 1:
            raise InvalidInputError("meta_batch and batch_size must be >= 1")
        if self.epochs < 0 or self.pretrain_epochs < 0 or self.steps_per_epoch < 1:
            raise InvalidInputError("epoch counts must be >= 0 and steps_per_epoch >= 1")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise InvalidInputError(f"unknown outer optimizer {self.outer_optimizer!r}")
        if self.query_mode not in QUERY_MODES:
            raise InvalidInputError(f"query_mode must be one of {QUERY_MODES}")
        if not 0 < self.lr_decay <= 1:
            raise InvalidInputError("lr_decay must be in (0, 1]")

    @property
    def sampler(self):
        return SamplerConfig(self.lambda1, self.lambda2, self.meta_batch)


@dataclass
class TrainReport:
    pretrain_loss: list = field(default_factory=list)
    task_train_loss: list = field(default_factory=list)
    task_test_loss: list = field(default_factory=list)
    wall_time: float = 0.0
    seed: int = 0
    config_hash: str = ""

    def rows(self):
        for e, v in enumerate(self.pretrain_loss):
            yield {"phase": "pretrain", "epoch": e + 1, "loss": v, "task_train_loss": "", "task_test_loss": ""}
        for e, (a, b) in enumerate(zip(self.task_train_loss, self.task_test_loss)):
            yield {"phase": "meta", "epoch": e + 1, "loss": "", "task_train_loss": a, "task_test_loss": b}

    def to_dict(self):
        return asdict(self)


TRAIN_COLUMNS = ("phase", "epoch", "loss", "task_train_loss", "task_test_loss", "seed", "config_hash")


def write_train_csv(path, report: TrainReport):
    """Loss history as CSV. Wall time is left out so reruns are byte-identical."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_COLUMNS)
        for r in report.rows():
            vals = [r["phase"], r["epoch"]]
            vals += ["" if r[k] == "" else format(r[k], ".9f") for k in ("loss", "task_train_loss", "task_test_loss")]
            w.writerow(vals + [report.seed, report.config_hash])


class Optimizer:
    """Adam (or plain SGD) over a LifterParams mapping of leaf tensors."""

    def __init__(self, params, kind="adam", lr=1e-3):
        self.params = L.LifterParams((k, v.detach().clone().requires_grad_(True)) for k, v in params.items())
        self.kind = kind
        tensors = list(self.params.values())
        if kind == "adam":
            self.opt = torch.optim.Adam(tensors, lr=lr, foreach=False)
        else:
            self.opt = torch.optim.SGD(tensors, lr=lr, foreach=False)

    @property
    def lr(self):
        return self.opt.param_groups[0]["lr"]

    @lr.setter
    def lr(self, value):
        for g in self.opt.param_groups:
            g["lr"] = value

    def step(self, grads):
        for name, p in self.params.items():
            p.grad = grads[name].detach().clone()
        self.opt.step()
        self.opt.zero_grad(set_to_none=True)

    def current(self):
        return self.params.detached()

    def state_tensors(self):
        out = {}
        names = list(self.params)
        for idx, st in self.opt.state_dict()["state"].items():
            for key, val in st.items():
                out[f"opt.{names[idx]}.{key}"] = torch.as_tensor(val, dtype=torch.float64).reshape(-1) if key == "step" else val
        return out

    def load_state_tensors(self, extra):
        sd = self.opt.state_dict()
        names = list(self.params)
        state = {}
        for idx, name in enumerate(names):
            st = {}
            for key in ("step", "exp_avg", "exp_avg_sq", "momentum_buffer"):
                t = extra.get(f"opt.{name}.{key}")
                if t is not None:
                    st[key] = t.reshape(()).to(torch.float32) if key == "step" else t.clone()
            if st:
                state[idx] = st
        sd["state"] = state
        self.opt.load_state_dict(sd)


def _guard(params, fn, *args):
    try:
        return fn(*args)
    except NumericError as exc:
        raise NumericError(str(exc), checkpoint=params.detached()) from None


def pretrain_random_distortion(params, clips, cfg: TrainConfig, lifter_cfg: L.LifterConfig, report=None,
                               start_epoch=0, opt=None, on_epoch=None):
    """Supervised Adam training on uniformly distorted (or undistorted) tasks."""
    if not clips:
        raise InvalidInputError("pretraining needs a non-empty dataset")
    report = report if report is not None else TrainReport(seed=cfg.seed)
    opt = opt or Optimizer(params, "adam", cfg.beta)
    for epoch in range(start_epoch, cfg.pretrain_epochs):
        opt.lr = cfg.beta * cfg.lr_decay ** epoch
        losses = []
        for step in range(cfg.steps_per_epoch):
            rng = stream(cfg.seed, PRETRAIN, epoch, step)
            tasks = make_meta_batch(clips, cfg.sampler, cfg.pretrain_mode, rng, lifter_cfg.frames,
                                    cfg.batch_size, cfg.source)
            for task in tasks:
                cur = opt.current()
                loss, g = _guard(cur, L.grad, cur, lambda p: L.batch_loss(p, task.support, lifter_cfg))
                opt.step(g)
                losses.append(float(loss.detach()))
        report.pretrain_loss.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.5f", epoch + 1, report.pretrain_loss[-1])
        if on_epoch:
            on_epoch("pretrain", epoch, opt, report)
    return opt.current(), report


def inner_adapt(params, support, alpha, lifter_cfg: L.LifterConfig):
    """One plain SGD step on the support batch."""
    _, g = L.grad(params, lambda p: L.batch_loss(p, support, lifter_cfg))
    return L.sgd_step(params.detached(), {k: v.detach() for k, v in g.items()}, alpha)


def meta_gradient(params, tasks, cfg: TrainConfig, lifter_cfg: L.LifterConfig, query_tasks=None):
    """Average meta-gradient over a meta-batch, accumulated in task order."""
    total, s_losses, q_losses = None, [], []
    for i, task in enumerate(tasks):
        query = task.query if query_tasks is None else query_tasks[i].query
        r = L.lifter_meta_grad(params, task.support, query, cfg.alpha, lifter_cfg, cfg.second_order)
        assert r.inner_steps == 1
        s_losses.append(r.support_loss)
        q_losses.append(r.query_loss)
        total = r.grads if total is None else L.LifterParams((k, total[k] + r.grads[k]) for k in total)
    n = len(tasks)
    return L.LifterParams((k, v / n) for k, v in total.items()), float(np.mean(s_losses)), float(np.mean(q_losses))


def sample_meta_step(clips, cfg: TrainConfig, lifter_cfg, epoch, step):
    rng = stream(cfg.seed, META, epoch, step)
    tasks = make_meta_batch(clips, cfg.sampler, cfg.task_sampling, rng, lifter_cfg.frames, cfg.batch_size, cfg.source)
    query_tasks = None
    if cfg.query_mode == "fresh_uniform":
        query_tasks = make_meta_batch(clips, cfg.sampler, "uniform", rng, lifter_cfg.frames, cfg.batch_size,
                                      cfg.source)
    return tasks, query_tasks


def meta_step(opt: Optimizer, tasks, cfg: TrainConfig, lifter_cfg, query_tasks=None):
    params = opt.current()
    g, s, q = _guard(params, meta_gradient, params, tasks, cfg, lifter_cfg, query_tasks)
    opt.step(g)
    return s, q


def _save_state(path, opt, lifter_cfg, cfg, phase, epoch, report):
    meta = {"phase": phase, "epoch": epoch, "train": asdict(cfg), "report": report.to_dict(),
            "optimizer": opt.kind}
    L.save_checkpoint(path, opt.current(), lifter_cfg, opt.state_tensors(), meta)


def meta_train(clips, cfg: TrainConfig, lifter_cfg: L.LifterConfig, init_params=None, out_dir=None,
               resume=None, stop_after=None):
    """Run pretraining (if configured) and meta-training.

    ``out_dir`` receives ``state_<phase>_<epoch>.ckpt`` after every epoch and
    ``final.ckpt`` at the end. ``resume`` is one of those state files.
    ``stop_after`` (phase, epoch) interrupts the run after that epoch,
    which the tests use to check split-run equivalence.
    """
    t0 = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    report = TrainReport(seed=cfg.seed, config_hash=config_hash(cfg, lifter_cfg))
    phase, start = "pretrain", 0
    params = init_params if init_params is not None else L.init_params(lifter_cfg)
    pre_opt = meta_opt = None
    if resume is not None:
        params, ck_cfg, extra, meta = L.load_checkpoint(resume)
        if ck_cfg != lifter_cfg:
            raise InvalidInputError("resume checkpoint was written for a different lifter config")
        phase, start = meta["phase"], meta["epoch"] + 1
        saved = meta["report"]
        report.pretrain_loss = list(saved["pretrain_loss"])
        report.task_train_loss = list(saved["task_train_loss"])
        report.task_test_loss = list(saved["task_test_loss"])
        if phase == "pretrain":
            pre_opt = Optimizer(params, "adam", cfg.beta)
            pre_opt.load_state_tensors(extra)
        else:
            meta_opt = Optimizer(params, cfg.outer_optimizer, cfg.beta)
            meta_opt.load_state_tensors(extra)

    stopped = False

    def checkpoint(ph, epoch, opt, rep):
        nonlocal stopped
        if out_dir is not None:
            _save_state(out_dir / f"state_{ph}_{epoch + 1:03d}.ckpt", opt, lifter_cfg, cfg, ph, epoch, rep)
        if stop_after == (ph, epoch + 1):
            stopped = True
            raise _Stop

    try:
        if phase == "pretrain":
            params, _ = pretrain_random_distortion(params, clips, cfg, lifter_cfg, report, start, pre_opt, checkpoint)
            start = 0
        opt = meta_opt or Optimizer(params, cfg.outer_optimizer, cfg.beta)
        for epoch in range(start, cfg.epochs):
            opt.lr = cfg.beta * cfg.lr_decay ** epoch
            s_all, q_all = [], []
            for step in range(cfg.steps_per_epoch):
                tasks, query_tasks = sample_meta_step(clips, cfg, lifter_cfg, epoch, step)
                s, q = meta_step(opt, tasks, cfg, lifter_cfg, query_tasks)
                s_all.append(s)
                q_all.append(q)
            report.task_train_loss.append(float(np.mean(s_all)))
            report.task_test_loss.append(float(np.mean(q_all)))
            log.info("meta epoch %d task-train %.5f task-test %.5f", epoch + 1, s_all[-1], q_all[-1])
            checkpoint("meta", epoch, opt, report)
        params = opt.current()
    except _Stop:
        pass
    except NumericError as exc:
        if out_dir is not None and exc.checkpoint is not None:
            L.save_checkpoint(out_dir / "last_good.ckpt", exc.checkpoint, lifter_cfg)
        raise
    report.wall_time = time.perf_counter() - t0
    if stopped:
        return None, report
    if out_dir is not None:
        L.save_checkpoint(out_dir / "final.ckpt", params, lifter_cfg, meta={"train": asdict(cfg)})
        write_train_csv(out_dir / "train_report.csv", report)
    return params, report


class _Stop(Exception):
    pass


def probe_loss(params, batch, lifter_cfg):
    with torch.no_grad():
        return float(L.batch_loss(params, batch, lifter_cfg))


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})

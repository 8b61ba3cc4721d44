"""Scripted desk-scale experiments.

Four experiments, each writing into ``<out>/<name>/<experiment>/``:

* degradation      an undistorted-trained lifter on clean vs distorted test data
* dynamics         MPJPE during scenario 1/2 adaptation, meta-trained vs pretrain-only
* ablation         base / +MAML / +stratified / +pretraining, after scenario 1
* generation_path  tasks from detector keypoints vs from clean projections

Trained models are cached under ``<out>/<name>/models/<tag>-<hash>/`` and
shared between experiments of the same run directory. Everything is
seeded from the config, so a rerun reproduces every CSV byte for byte.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import adaptation as A
from . import camera, datagen, metrics, plotting, taskgen
from . import lifter as L
from . import training as T
from .config import Config
from .errors import ConfigError
from .skeleton import default_topology
from .util import config_hash

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("base", "+maml", "+stratified", "+pretraining")
KIND_FILES = {
    "degradation": ("metrics.csv", "degradation.svg"),
    "dynamics": ("metrics.csv", "curves.csv"),
    "ablation": ("metrics.csv", "ablation.svg"),
    "generation_path": ("metrics.csv", "generation_path.svg"),
}


@dataclass(frozen=True)
class ExperimentSpec:
    config: Config
    out_dir: Path

    @property
    def name(self):
        return self.config.experiment.name

    @property
    def run_dir(self):
        return Path(self.out_dir) / self.name

    @property
    def hash(self):
        return config_hash(self.config)


class Workspace:
    """Data, trained models and adaptation sets for one run directory."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.cfg = spec.config
        self.topo = default_topology()
        self.run_dir = spec.run_dir
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "spec.toml").write_text(self.cfg.dumps())
        (self.run_dir / "config_hash.txt").write_text(spec.hash + "\n")
        self._clips = {}
        self._models = {}

    # -- data ---------------------------------------------------------------

    def clips(self, which, noise=None):
        d = self.cfg.data
        noise = noise or d.noise
        key = (which, noise)
        if key not in self._clips:
            n, seed = {"train": (d.n_clips, d.seed), "test": (d.test_clips, d.test_seed),
                       "adapt": (d.adapt_clips, d.adapt_seed)}[which]
            self._clips[key] = datagen.gen_dataset(n, d.n_frames, seed, noise_config=noise)
        return self._clips[key]

    def test_windows(self, preset):
        """One WindowBatch per test clip, plus the action label of every window."""
        d = camera.preset(preset)
        lc = self.cfg.lifter
        out, groups = [], []
        for c in self.clips("test"):
            wb = taskgen.windows(taskgen.task_for_clip(c, d, self.cfg.eval.source), lc.frames)
            out.append(wb)
            groups += [c.motion.action] * len(wb)
        return out, groups

    def labeled_set(self, preset):
        """Scenario 1 data: windows of the labeled clips under the target distortion."""
        d = camera.preset(preset)
        lc = self.cfg.lifter
        wins = [taskgen.windows(taskgen.task_for_clip(c, d), lc.frames) for c in self.clips("adapt")]
        inputs = np.concatenate([w.inputs for w in wins])
        targets = np.concatenate([w.targets for w in wins])
        n = min(self.cfg.adapt.n_windows, len(inputs))
        sel = np.sort(np.random.default_rng(self.cfg.adapt.seed).choice(len(inputs), n, replace=False))
        return taskgen.WindowBatch(inputs[sel], targets[sel], wins[0].intrinsics)

    def unlabeled_set(self, preset):
        """Scenario 2 data: distorted test keypoints only."""
        d = camera.preset(preset)
        k = self.cfg.experiment.s2_frames
        out = []
        for c in self.clips("test"):
            kp = taskgen.task_for_clip(c, d, self.cfg.eval.source).inputs
            out.append(A.UnlabeledClip(kp[:k] if k else kp, c.motion.intrinsics))
        return out

    # -- models -------------------------------------------------------------

    def model(self, tag, train_cfg, init_tag=None):
        """Train (or load from the cache) a model; ``init_tag`` names the starting model."""
        init = self._models[init_tag][0] if init_tag else None
        init_hash = self._models[init_tag][1] if init_tag else ""
        h = config_hash(self.cfg.data, self.cfg.lifter, train_cfg, init_hash)
        if tag in self._models and self._models[tag][1] == h:
            return self._models[tag][0]
        mdir = self.run_dir / "models" / f"{tag}-{h}"
        final = mdir / "final.ckpt"
        if final.exists():
            params, _, _, _ = L.load_checkpoint(final)
            log.info("loaded cached model %s", mdir.name)
        else:
            log.info("training model %s", mdir.name)
            params, report = T.meta_train(self.clips("train"), train_cfg, self.cfg.lifter,
                                          init_params=init, out_dir=mdir)
            plotting.plot_train_report(report, mdir / "train_report.svg", title=tag)
        self._models[tag] = (params, h)
        return params

    def undistorted_model(self):
        e = self.cfg.experiment
        if e.checkpoint:
            path = Path(e.checkpoint)
            if not path.exists():
                raise ConfigError(f"experiment.checkpoint {path} does not exist")
            params, ck_cfg, _, _ = L.load_checkpoint(path)
            if ck_cfg != self.cfg.lifter:
                raise ConfigError(f"checkpoint {path} was written for a different lifter config")
            return params
        t = self.cfg.train
        epochs = e.undistorted_epochs or t.pretrain_epochs
        return self.model("undistorted", replace(t, pretrain_mode="none", pretrain_epochs=epochs, epochs=0))

    def pretrained_model(self, source="predicted"):
        t = replace(self.cfg.train, source=source)
        return self.model(f"pretrain-{source}", replace(t, epochs=0))

    def meta_model(self, source="predicted"):
        self.pretrained_model(source)
        t = replace(self.cfg.train, source=source)
        return self.model(f"maml-{source}", replace(t, pretrain_epochs=0), init_tag=f"pretrain-{source}")

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, params, preset):
        wins, groups = self.test_windows(preset)
        lc = self.cfg.lifter
        pred = np.concatenate([L.predict(params, wb, lc) for wb in wins])
        gt = np.concatenate([wb.targets for wb in wins])
        return metrics.evaluate(pred, gt, self.topo, groups)

    def monitor(self, preset):
        wins, _ = self.test_windows(preset)
        lc = self.cfg.lifter
        gt = np.concatenate([wb.targets for wb in wins])

        def mpjpe(params):
            return metrics.mpjpe(np.concatenate([L.predict(params, wb, lc) for wb in wins]), gt)

        return mpjpe

    def adapt(self, params, preset, scenario, monitor=True):
        acfg = self.cfg.experiment.adapt_for(self.cfg.adapt, scenario)
        mon = self.monitor(preset) if monitor else None
        if scenario == 1:
            return A.finetune_scenario1(params, self.labeled_set(preset), acfg, self.cfg.lifter, mon)
        return A.iso_scenario2(params, self.unlabeled_set(preset), acfg, self.cfg.lifter, self.topo, mon)


def _subdir(ws, kind):
    d = ws.run_dir / kind
    d.mkdir(parents=True, exist_ok=True)
    return d


def run_degradation_trend(spec: ExperimentSpec, ws=None):
    """Evaluate an undistorted-trained lifter on the clean test set and every preset."""
    ws = ws or Workspace(spec)
    params = ws.undistorted_model()
    presets = ["none"] + [p for p in ws.cfg.eval.presets if p != "none"]
    reports = {p: ws.evaluate(params, p) for p in presets}
    rows = []
    for p in presets:
        rows += metrics.report_rows(reports[p], p, "none", "undistorted")
    out = _subdir(ws, "degradation")
    metrics.write_metric_csv(out / "metrics.csv", rows)
    plotting.plot_metric_bars(rows, out / "degradation.svg", title="undistorted-trained lifter")
    return reports


def run_adaptation_dynamics(spec: ExperimentSpec, ws=None, presets=None):
    """Scenario 1 and 2 curves for the meta-trained and pretrain-only inits."""
    ws = ws or Workspace(spec)
    e = ws.cfg.experiment
    presets = presets or (e.heavy + e.moderate)
    inits = {"pre": ws.pretrained_model(), "maml": ws.meta_model()}
    curves, rows = {}, []
    out = _subdir(ws, "dynamics")
    for p in presets:
        for s in (1, 2):
            panel = {}
            for name, params in inits.items():
                _, curve = ws.adapt(params, p, s)
                label = f"{name}/S{s}/{p}"
                curves[label] = panel[label] = curve
                rows.append({"preset": p, "scenario": f"S{s}", "variant": name, "metric": "mpjpe_epoch0",
                             "value": curve[0]["mpjpe"]})
                rows.append({"preset": p, "scenario": f"S{s}", "variant": name, "metric": "mpjpe_final",
                             "value": curve[-1]["mpjpe"]})
            plotting.plot_curves(panel, out / f"{p}_S{s}.svg", title=f"{p}, scenario {s}")
    A.write_curves_csv(out / "curves.csv", curves)
    metrics.write_metric_csv(out / "metrics.csv", rows)
    return curves


def _adapted_rows(ws, params, variant, presets, scenarios=(1,)):
    rows = []
    for p in presets:
        rows += metrics.report_rows(ws.evaluate(params, p), p, "none", variant)
        for s in scenarios:
            adapted, _ = ws.adapt(params, p, s, monitor=False)
            rows += metrics.report_rows(ws.evaluate(adapted, p), p, f"S{s}", variant)
    return rows


def ablation_models(ws):
    t = ws.cfg.train
    scratch = replace(t, pretrain_epochs=0)
    return {
        "base": lambda: ws.undistorted_model(),
        "+maml": lambda: ws.model("maml-uniform-scratch", replace(scratch, task_sampling="uniform")),
        "+stratified": lambda: ws.model("maml-stratified-scratch", scratch),
        "+pretraining": lambda: ws.meta_model(),
    }


def run_ablation(spec: ExperimentSpec, ws=None, presets=None):
    """Four cumulative variants, evaluated after scenario 1 adaptation."""
    ws = ws or Workspace(spec)
    e = ws.cfg.experiment
    presets = presets or e.heavy
    rows = []
    for variant, build in ablation_models(ws).items():
        rows += _adapted_rows(ws, build(), variant, presets)
    out = _subdir(ws, "ablation")
    metrics.write_metric_csv(out / "metrics.csv", rows)
    plotting.plot_metric_bars([r for r in rows if r["scenario"] == "S1"], out / "ablation.svg",
                              title="ablation after scenario 1")
    return rows


def run_generation_path_comparison(spec: ExperimentSpec, ws=None, presets=None):
    """Meta-train on detector-keypoint tasks vs clean-projection tasks; test on jittered data."""
    ws = ws or Workspace(spec)
    e = ws.cfg.experiment
    presets = presets or (e.heavy + e.moderate)
    rows = []
    for source in ("predicted", "gt3d"):
        rows += _adapted_rows(ws, ws.meta_model(source), source, presets, scenarios=(1, 2))
    out = _subdir(ws, "generation_path")
    metrics.write_metric_csv(out / "metrics.csv", rows)
    plotting.plot_metric_bars([r for r in rows if r["scenario"] == "S1"], out / "generation_path.svg",
                              title="task generation path, scenario 1")
    return rows


RUNNERS = {
    "degradation": run_degradation_trend,
    "dynamics": run_adaptation_dynamics,
    "ablation": run_ablation,
    "generation_path": run_generation_path_comparison,
}


def run(spec: ExperimentSpec, kinds=None):
    """Run the configured experiment kind(s) in one shared workspace; returns the run dir."""
    kind = spec.config.experiment.kind
    kinds = kinds or (tuple(RUNNERS) if kind == "all" else (kind,))
    ws = Workspace(spec)
    for k in kinds:
        log.info("experiment %s: %s", spec.name, k)
        RUNNERS[k](spec, ws)
    problems = check_run_dir(spec.run_dir, kinds)
    if problems:
        raise ConfigError("incomplete run directory: " + "; ".join(problems))
    return spec.run_dir


def check_run_dir(run_dir, kinds):
    """List of missing artifacts (empty when the run directory is complete)."""
    run_dir = Path(run_dir)
    missing = [f for f in ("spec.toml", "config_hash.txt") if not (run_dir / f).exists()]
    models = list((run_dir / "models").glob("*/final.ckpt"))
    if not models:
        missing.append("models/*/final.ckpt")
    for m in models:
        if not (m.parent / "train_report.csv").exists():
            missing.append(str(m.parent.relative_to(run_dir) / "train_report.csv"))
    for k in kinds:
        for f in KIND_FILES[k]:
            if not (run_dir / k / f).exists():
                missing.append(f"{k}/{f}")
        if not list((run_dir / k).glob("*.svg")):
            missing.append(f"{k}/*.svg")
    return missing


def ratio(rows, preset, base="none", metric="mpjpe", scenario="none"):
    """Helper for trend checks: metric(preset) / metric(base) in a metric table."""
    val = {(r["preset"], r["scenario"], r["metric"]): r["value"] for r in rows}
    return val[(preset, scenario, metric)] / val[(base, scenario, metric)]

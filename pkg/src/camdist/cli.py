"""Command-line entry point: ``camdist <subcommand> [options]``.

Exit status is 0 on success, 1 on a usage error (bad flags, unknown
subcommand; the synopsis goes to stderr) and 2 on a runtime error (bad
input file, numeric divergence, invalid config values).

Every subcommand accepts ``--config FILE``, ``--set section.key=value``
(repeatable), ``--seed N`` and ``--out DIR``. Values are resolved as
flag > config file > built-in default; ``--out`` falls back to the
``CAMDIST_OUT`` environment variable and then to ``./camdist-out``.

Dataset arguments take a file path or ``@name`` for a dataset bundled with
the package (``@tiny``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adaptation as A
from . import camera, datagen, metrics, plotting, taskgen
from . import config as C
from . import experiments as X
from . import lifter as L
from . import training as T
from .errors import CamDistError, ConfigError, InvalidInputError
from .skeleton import default_topology

log = logging.getLogger("camdist")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="FILE", help="TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="master seed for data, init, training and adaptation")
    p.add_argument("--out", metavar="DIR", help=f"output directory (default ${C.OUT_ENV} or ./{C.DEFAULT_OUT})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="camdist", description="Distortion-adaptive 3D pose lifting: data, training, "
                     "adaptation and evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset file")
    p.add_argument("--clips", type=int, help="number of clips (data.n_clips)")
    p.add_argument("--frames", type=int, help="frames per clip (data.n_frames)")
    p.add_argument("--name", default="dataset.txt", help="output file name inside --out")

    p = sub.add_parser("distort", parents=[common], help="apply lens distortion to a dataset's keypoints")
    p.add_argument("input", help="dataset file or @bundled name")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=sorted(camera.PRESETS))
    g.add_argument("--params", metavar="K1,K2,K3,P1,P2", help="custom distortion coefficients")
    p.add_argument("--name", default="distorted.txt", help="output file name inside --out")

    for name, helptext in (("pretrain", "random-distortion pretraining only"),
                           ("meta-train", "pretraining (unless --init) followed by MAML meta-training")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help="training dataset (default: generated from [data])")
        p.add_argument("--epochs", type=int, help="meta-training epochs (train.epochs)")
        p.add_argument("--pretrain-epochs", type=int, help="pretraining epochs (train.pretrain_epochs)")
        if name == "meta-train":
            p.add_argument("--init", metavar="CKPT", help="start from this checkpoint and skip pretraining")
            p.add_argument("--resume", metavar="STATE", help="resume from a state_*.ckpt written by a previous run")

    p = sub.add_parser("adapt", parents=[common], help="test-time adaptation of a checkpoint to one camera")
    p.add_argument("checkpoint")
    p.add_argument("--scenario", type=int, choices=(1, 2), required=True)
    p.add_argument("--preset", default="d1", choices=sorted(camera.PRESETS))
    p.add_argument("--data", help="scenario 1: labeled clips; scenario 2: test clips (labels unused)")
    p.add_argument("--eval-data", help="clips whose MPJPE is tracked per epoch (default: the test set)")
    p.add_argument("--epochs", type=int, help="adaptation epochs (adapt.epochs)")
    p.add_argument("--lr", type=float, help="adaptation learning rate (adapt.lr)")

    p = sub.add_parser("eval", parents=[common], help="MPJPE, P-MPJPE and PCKh of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="test clips (default: generated test set)")
    p.add_argument("--preset", action="append", choices=sorted(camera.PRESETS),
                   help="preset to evaluate (repeatable; default eval.presets)")
    p.add_argument("--variant", default="", help="label written to the variant column")

    p = sub.add_parser("exp", help="scripted experiments")
    esub = p.add_subparsers(dest="exp_command", metavar="<exp-command>", parser_class=_Parser)
    q = esub.add_parser("run", parents=[common], help="run an experiment spec file")
    q.add_argument("spec", help="experiment config (TOML) or @bundled name")
    q.add_argument("--kind", choices=C.ExperimentConfig.KINDS, help="override experiment.kind")

    p = sub.add_parser("report", parents=[common], help="merge metric/curve CSVs and emit SVG plots")
    p.add_argument("csv", nargs="+", help="metrics.csv, curves.csv or train_report.csv files")
    return parser


# ---------------------------------------------------------------------------


def _resolve(args, **section_flags):
    cfg = C.resolve(args.config, args.overrides, args.seed)
    for key, value in section_flags.items():
        if value is not None:
            section, name = key.split("__")
            cfg = C.from_dict({section: {name: value}}, cfg)
    return cfg


def _out(args):
    out = C.default_out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_path(arg):
    if arg.startswith("@"):
        p = Path(__file__).with_name("data") / f"{arg[1:]}.txt"
        if not p.exists():
            raise ConfigError(f"no bundled dataset named {arg[1:]!r}")
        return p
    return Path(arg)


def _load_clips(arg, cfg, which):
    if arg:
        return datagen.load_dataset(_dataset_path(arg))
    d = cfg.data
    n, seed = {"train": (d.n_clips, d.seed), "test": (d.test_clips, d.test_seed),
               "adapt": (d.adapt_clips, d.adapt_seed)}[which]
    return datagen.gen_dataset(n, d.n_frames, seed, noise_config=d.noise)


def _write_config(out, cfg):
    (out / "config.toml").write_text(cfg.dumps())


def cmd_gen_data(args):
    cfg = _resolve(args, data__n_clips=args.clips, data__n_frames=args.frames)
    out = _out(args)
    clips = datagen.gen_dataset(cfg.data.n_clips, cfg.data.n_frames, cfg.data.seed, noise_config=cfg.data.noise)
    path = datagen.save_dataset(out / args.name, clips)
    print(path)


def _parse_params(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise InvalidInputError(f"--params must be five comma-separated numbers, got {text!r}") from None
    if len(vals) != 5:
        raise InvalidInputError(f"--params needs exactly five values (k1,k2,k3,p1,p2), got {len(vals)}")
    return camera.DistortionParams(*vals)


def cmd_distort(args):
    _resolve(args)
    d = camera.preset(args.preset) if args.preset else _parse_params(args.params)
    clips = datagen.load_dataset(_dataset_path(args.input))
    out_clips = [datagen.Clip(c.motion, camera.distort_pixel(c.keypoints, c.motion.intrinsics, d)) for c in clips]
    path = datagen.save_dataset(_out(args) / args.name, out_clips)
    print(path)


def _train(args, pretrain_only):
    cfg = _resolve(args, train__epochs=args.epochs, train__pretrain_epochs=args.pretrain_epochs)
    out = _out(args)
    tcfg = cfg.train
    init = None
    if pretrain_only:
        tcfg = replace(tcfg, epochs=0)
    elif getattr(args, "init", None):
        init, ck_cfg, _, _ = L.load_checkpoint(args.init)
        if ck_cfg != cfg.lifter:
            raise ConfigError("--init checkpoint was written for a different [lifter] config")
        tcfg = replace(tcfg, pretrain_epochs=0)
    clips = _load_clips(args.data, cfg, "train")
    _write_config(out, cfg)
    params, report = T.meta_train(clips, tcfg, cfg.lifter, init_params=init, out_dir=out,
                                  resume=getattr(args, "resume", None))
    plotting.plot_train_report(report, out / "train_report.svg")
    print(out / "final.ckpt")


def cmd_pretrain(args):
    _train(args, pretrain_only=True)


def cmd_meta_train(args):
    _train(args, pretrain_only=False)


def cmd_adapt(args):
    cfg = _resolve(args, adapt__epochs=args.epochs, adapt__lr=args.lr)
    acfg = replace(cfg.adapt, scenario=args.scenario)
    params, lc, _, _ = L.load_checkpoint(args.checkpoint)
    d = camera.preset(args.preset)
    out = _out(args)
    eval_clips = _load_clips(args.eval_data, cfg, "test")
    wins = [taskgen.windows(taskgen.task_for_clip(c, d, cfg.eval.source), lc.frames) for c in eval_clips]
    gt = np.concatenate([w.targets for w in wins])

    def monitor(p):
        return metrics.mpjpe(np.concatenate([L.predict(p, w, lc) for w in wins]), gt)

    if args.scenario == 1:
        clips = _load_clips(args.data, cfg, "adapt")
        lab = [taskgen.windows(taskgen.task_for_clip(c, d), lc.frames) for c in clips]
        inputs = np.concatenate([w.inputs for w in lab])
        targets = np.concatenate([w.targets for w in lab])
        n = min(acfg.n_windows, len(inputs))
        sel = np.sort(np.random.default_rng(acfg.seed).choice(len(inputs), n, replace=False))
        labeled = taskgen.WindowBatch(inputs[sel], targets[sel], lab[0].intrinsics)
        adapted, curve = A.finetune_scenario1(params, labeled, acfg, lc, monitor)
    else:
        clips = _load_clips(args.data, cfg, "test")
        # only the distorted keypoints cross into the adaptation code
        unl = [A.UnlabeledClip(taskgen.task_for_clip(c, d, cfg.eval.source).inputs, c.motion.intrinsics)
               for c in clips]
        adapted, curve = A.iso_scenario2(params, unl, acfg, lc, default_topology(), monitor)
    _write_config(out, cfg)
    L.save_checkpoint(out / "adapted.ckpt", adapted, lc, meta={"scenario": args.scenario, "preset": args.preset})
    label = f"S{args.scenario}/{args.preset}"
    A.write_curves_csv(out / "curves.csv", {label: curve})
    plotting.plot_curves({label: curve}, out / "curves.svg", title=f"{args.preset}, scenario {args.scenario}")
    print(out / "adapted.ckpt")


def cmd_eval(args):
    cfg = _resolve(args)
    params, lc, _, _ = L.load_checkpoint(args.checkpoint)
    clips = _load_clips(args.data, cfg, "test")
    topo = default_topology()
    rows = []
    for preset in args.preset or cfg.eval.presets:
        d = camera.preset(preset)
        wins, groups = [], []
        for c in clips:
            w = taskgen.windows(taskgen.task_for_clip(c, d, cfg.eval.source), lc.frames)
            wins.append(w)
            groups += [c.motion.action] * len(w)
        pred = np.concatenate([L.predict(params, w, lc) for w in wins])
        gt = np.concatenate([w.targets for w in wins])
        rows += metrics.report_rows(metrics.evaluate(pred, gt, topo, groups), preset, "none", args.variant)
    out = _out(args)
    metrics.write_metric_csv(out / "metrics.csv", rows)
    plotting.plot_metric_bars(rows, out / "metrics.svg", title="evaluation")
    for r in rows:
        if r["metric"] in ("mpjpe", "p_mpjpe", "pckh"):
            print(f"{r['preset']:6s} {r['metric']:8s} {metrics.fmt(r['value'])}")


def cmd_exp(args):
    if args.exp_command != "run":
        raise UsageError("usage: camdist exp run SPEC [options]")
    path = C.bundled_config(args.spec[1:]) if args.spec.startswith("@") else args.spec
    cfg = C.resolve(path, args.overrides, args.seed)
    if args.kind:
        cfg = C.from_dict({"experiment": {"kind": args.kind}}, cfg)
    run_dir = X.run(X.ExperimentSpec(cfg, C.default_out_dir(args.out)))
    print(run_dir)


def cmd_report(args):
    _resolve(args)
    out = _out(args)
    metric_rows, curves = [], {}
    for f in args.csv:
        header = Path(f).read_text().split("\n", 1)[0].split(",")
        if tuple(header) == metrics.METRIC_COLUMNS:
            metric_rows += metrics.read_metric_csv(f)
        elif tuple(header) == A.CURVE_COLUMNS:
            curves.update(A.read_curves_csv(f))
        elif tuple(header) == T.TRAIN_COLUMNS:
            rep = _read_train_csv(f)
            plotting.plot_train_report(rep, out / f"{Path(f).parent.name or 'train'}_train_report.svg")
        else:
            raise InvalidInputError(f"{f}: unrecognized CSV header {','.join(header)}")
    written = []
    if metric_rows:
        metrics.write_metric_csv(out / "report.csv", metric_rows)
        written.append(out / "report.csv")
        for m in ("mpjpe", "p_mpjpe", "pckh"):
            if any(r["metric"] == m for r in metric_rows):
                written.append(plotting.plot_metric_bars(metric_rows, out / f"report_{m}.svg", metric=m))
    if curves:
        A.write_curves_csv(out / "curves.csv", curves)
        written += [out / "curves.csv", plotting.plot_curves(curves, out / "curves.svg")]
    for w in written:
        print(w)


def _read_train_csv(path):
    import csv

    rep = T.TrainReport()
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["phase"] == "pretrain":
                rep.pretrain_loss.append(float(r["loss"]))
            else:
                rep.task_train_loss.append(float(r["task_train_loss"]))
                rep.task_test_loss.append(float(r["task_test_loss"]))
    return rep


COMMANDS = {
    "gen-data": cmd_gen_data,
    "distort": cmd_distort,
    "pretrain": cmd_pretrain,
    "meta-train": cmd_meta_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "exp": cmd_exp,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        if getattr(args, "verbose", False):
            logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except (CamDistError, OSError) as exc:
        print(f"camdist: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

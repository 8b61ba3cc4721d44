from dataclasses import replace

import pytest

from camdist import config as C
from camdist import experiments as X
from camdist import lifter as L
from camdist import metrics
from camdist.errors import ConfigError


@pytest.fixture(scope="module")
def tiny_cfg():
    return C.resolve(C.bundled_config("tiny"), ["adapt.epochs=2"])


@pytest.fixture(scope="module")
def tiny_run(tiny_cfg, tmp_path_factory):
    spec = X.ExperimentSpec(tiny_cfg, tmp_path_factory.mktemp("exp"))
    return spec, X.run(spec)


def test_run_dir_is_complete(tiny_run):
    spec, run_dir = tiny_run
    assert run_dir == spec.run_dir
    assert X.check_run_dir(run_dir, tuple(X.RUNNERS)) == []
    assert C.loads((run_dir / "spec.toml").read_text()) == spec.config
    assert (run_dir / "config_hash.txt").read_text().strip() == spec.hash


def test_row_counts(tiny_run):
    spec, run_dir = tiny_run
    e, presets = spec.config.experiment, spec.config.eval.presets

    deg = metrics.read_metric_csv(run_dir / "degradation/metrics.csv")
    assert {r["preset"] for r in deg} == set(presets)
    assert len([r for r in deg if r["metric"] == "mpjpe"]) == len(presets)

    dyn = metrics.read_metric_csv(run_dir / "dynamics/metrics.csv")
    assert len(dyn) == len(e.heavy + e.moderate) * 2 * 2 * 2  # presets x scenarios x inits x (epoch0, final)

    abl = metrics.read_metric_csv(run_dir / "ablation/metrics.csv")
    assert [v for v in dict.fromkeys(r["variant"] for r in abl)] == list(X.ABLATION_VARIANTS)

    gen = metrics.read_metric_csv(run_dir / "generation_path/metrics.csv")
    assert set(r["variant"] for r in gen) == {"predicted", "gt3d"}
    assert set(r["scenario"] for r in gen) == {"none", "S1", "S2"}


def test_dynamics_curves_start_at_epoch_zero(tiny_run):
    from camdist import adaptation as A

    _, run_dir = tiny_run
    curves = A.read_curves_csv(run_dir / "dynamics/curves.csv")
    for rows in curves.values():
        assert [r["epoch"] for r in rows] == [0, 1, 2]


def test_rerun_is_byte_identical(tiny_cfg, tiny_run, tmp_path):
    _, first = tiny_run
    spec = X.ExperimentSpec(tiny_cfg, tmp_path)
    X.run(spec, ("degradation", "dynamics"))
    for f in ("degradation/metrics.csv", "dynamics/metrics.csv", "dynamics/curves.csv", "degradation/degradation.svg"):
        assert (spec.run_dir / f).read_bytes() == (first / f).read_bytes(), f


def test_cached_models_are_reused(tiny_cfg, tiny_run):
    spec, run_dir = tiny_run
    before = {p: p.stat().st_mtime_ns for p in run_dir.glob("models/*/final.ckpt")}
    X.run(spec, ("degradation",))
    after = {p: p.stat().st_mtime_ns for p in run_dir.glob("models/*/final.ckpt")}
    assert before == after


def test_missing_checkpoint_is_config_error(tiny_cfg, tmp_path):
    cfg = C.from_dict({"experiment": {"checkpoint": str(tmp_path / "nope.ckpt")}}, tiny_cfg)
    with pytest.raises(ConfigError):
        X.run(X.ExperimentSpec(cfg, tmp_path), ("degradation",))


def test_external_checkpoint_is_used(tiny_cfg, tiny_run, tmp_path):
    _, run_dir = tiny_run
    ckpt = next(run_dir.glob("models/undistorted-*/final.ckpt"))
    cfg = C.from_dict({"experiment": {"checkpoint": str(ckpt), "name": "ext"}}, tiny_cfg)
    spec = X.ExperimentSpec(cfg, tmp_path)
    ws = X.Workspace(spec)
    params = ws.undistorted_model()
    assert params.bit_equal(L.load_checkpoint(ckpt)[0])
    wrong = C.from_dict({"lifter": {"channels": 8}}, cfg)
    with pytest.raises(ConfigError):
        X.Workspace(X.ExperimentSpec(wrong, tmp_path)).undistorted_model()


def test_incomplete_run_dir_is_reported(tmp_path):
    problems = X.check_run_dir(tmp_path, ("ablation",))
    assert "spec.toml" in problems and "ablation/metrics.csv" in problems


def test_ratio_helper():
    rows = [{"preset": "none", "scenario": "none", "metric": "mpjpe", "value": 50.0},
            {"preset": "d1", "scenario": "none", "metric": "mpjpe", "value": 100.0}]
    assert X.ratio(rows, "d1") == 2.0


def test_scenario_lr_override_reaches_adaptation(tiny_cfg):
    e = replace(tiny_cfg.experiment, s2_lr=1e-5, s2_optimizer="adam")
    a = e.adapt_for(tiny_cfg.adapt, 2)
    assert (a.lr, a.optimizer, a.scenario) == (1e-5, "adam", 2)

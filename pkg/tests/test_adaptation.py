import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from camdist import adaptation as A
from camdist import camera, datagen, taskgen
from camdist import lifter as L
from camdist.errors import InvalidInputError
from camdist.skeleton import PARENTS

from oracles import consistency, symmetry


def _rigid_motion(topo, T=12, seed=2):
    return datagen.gen_motion(topo, T, seed=seed).root_relative()


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_mirrored_and_static_fixtures_are_zero(topo):
    seq = _rigid_motion(topo)
    assert A.symmetry_loss(seq, topo) == pytest.approx(0, abs=1e-9)
    assert A.consistency_loss(seq, topo) == pytest.approx(0, abs=1e-9)
    static = np.repeat(seq[:1], 5, axis=0)
    assert A.consistency_loss(static, topo) == 0.0


def test_one_longer_left_bone(topo):
    seq = _rigid_motion(topo, T=7).copy()
    wrist, elbow = topo.joint_names.index("left_wrist"), topo.joint_names.index("left_elbow")
    v = seq[:, wrist] - seq[:, elbow]
    seq[:, wrist] += 10.0 * v / np.linalg.norm(v, axis=-1, keepdims=True)
    assert A.symmetry_loss(seq, topo) == pytest.approx(10.0 * 7, abs=1e-9)


def test_growing_bone(topo):
    seq = np.repeat(_rigid_motion(topo, T=1), 9, axis=0).copy()
    head, neck = topo.joint_names.index("head_top"), topo.joint_names.index("neck")
    v = seq[0, head] - seq[0, neck]
    v /= np.linalg.norm(v)
    for t in range(9):
        seq[t, head] += t * v
    assert A.consistency_loss(seq, topo) == pytest.approx(9 - 1, abs=1e-9)


def test_oracles_on_random_sequences(topo, rng):
    for _ in range(30):
        seq = rng.normal(size=(int(rng.integers(2, 6)), 17, 3)) * 200
        assert abs(A.symmetry_loss(seq, topo) - symmetry(seq, PARENTS, topo.mirror_pairs)) <= 1e-9
        assert abs(A.consistency_loss(seq, topo) - consistency(seq, PARENTS)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_invariant_under_per_frame_rigid_motion(topo, seed):
    rng = np.random.default_rng(seed)
    seq = rng.normal(size=(4, 17, 3)) * 200
    moved = np.stack([f @ _random_rotation(rng).T + rng.normal(size=3) * 1000 for f in seq])
    assert A.symmetry_loss(moved, topo) == pytest.approx(A.symmetry_loss(seq, topo), rel=1e-9)
    assert A.consistency_loss(moved, topo) == pytest.approx(A.consistency_loss(seq, topo), rel=1e-9)


def test_additivity_and_torch_agreement(topo, rng):
    seq = rng.normal(size=(5, 17, 3)) * 200
    assert A.iso_loss(seq, topo) == A.symmetry_loss(seq, topo) + A.consistency_loss(seq, topo)
    t = torch.tensor(seq)
    assert float(A.iso_loss(t, topo)) == pytest.approx(A.iso_loss(seq, topo), rel=1e-12)


def test_input_errors(topo):
    with pytest.raises(InvalidInputError):
        A.consistency_loss(np.zeros((1, 17, 3)), topo)
    with pytest.raises(InvalidInputError):
        A.AdaptConfig(lr=0)
    with pytest.raises(InvalidInputError):
        A.AdaptConfig(scenario=3)


@pytest.fixture(scope="module")
def setup(small_clips):
    cfg = L.LifterConfig(frames=3, channels=16)
    d = camera.preset("d3")
    labeled = taskgen.windows(taskgen.task_for_clip(small_clips[0], d), cfg.frames)
    unl = [A.UnlabeledClip(taskgen.task_for_clip(c, d).inputs, c.motion.intrinsics) for c in small_clips[1:]]
    return cfg, L.init_params(cfg), labeled, unl


def test_zero_epochs_is_identity(setup, topo):
    cfg, p, labeled, unl = setup
    q, curve = A.finetune_scenario1(p, labeled, A.AdaptConfig(epochs=0), cfg)
    assert q.bit_equal(p) and len(curve) == 1
    q, curve = A.iso_scenario2(p, unl, A.AdaptConfig(epochs=0, scenario=2), cfg, topo)
    assert q.bit_equal(p) and len(curve) == 1


def test_scenario1_deterministic_and_curve(setup):
    cfg, p, labeled, _ = setup
    acfg = A.AdaptConfig(epochs=4, lr=0.05, batch_size=16)
    def monitor(params):
        return _loss_mm(params, labeled, cfg)

    a, ca = A.finetune_scenario1(p, labeled, acfg, cfg, monitor)
    b, cb = A.finetune_scenario1(p, labeled, acfg, cfg, monitor)
    assert a.bit_equal(b) and ca == cb
    assert len(ca) == 5 and [r["epoch"] for r in ca] == list(range(5))
    assert ca[-1]["loss"] < ca[0]["loss"]


def _loss_mm(params, batch, cfg):
    with torch.no_grad():
        return float(L.batch_loss(params, batch, cfg)) * 1000


def test_scenario1_rejects_unlabeled(setup):
    cfg, p, labeled, _ = setup
    with pytest.raises(InvalidInputError):
        A.finetune_scenario1(p, taskgen.WindowBatch(labeled.inputs, None, labeled.intrinsics), A.AdaptConfig(), cfg)


def test_iso_is_label_free(setup, topo):
    cfg, p, labeled, _ = setup
    assert not hasattr(A.UnlabeledClip(np.zeros((5, 17, 2)), None), "targets")
    with pytest.raises(InvalidInputError):
        A.iso_scenario2(p, [labeled], A.AdaptConfig(scenario=2), cfg, topo)


def test_iso_reduces_its_objective(setup, topo):
    cfg, p, _, unl = setup
    acfg = A.AdaptConfig(epochs=15, scenario=2, lr=1e-3, optimizer="adam")
    q, curve = A.iso_scenario2(p, unl, acfg, cfg, topo)
    wins = [u.windows(cfg.frames) for u in unl]
    ks = [u.intrinsics for u in unl]
    with torch.no_grad():
        before = float(A.iso_objective(p, wins, ks, cfg, topo, acfg))
        after = float(A.iso_objective(q, wins, ks, cfg, topo, acfg))
    assert after < before
    assert curve[0]["loss"] == pytest.approx(before)


def test_curves_csv_round_trip(tmp_path):
    curves = {"maml/S1/d1": [{"epoch": 0, "loss": 0.5, "mpjpe": 100.0}, {"epoch": 1, "loss": 0.25, "mpjpe": 90.0}],
              "pre/S2/d1": [{"epoch": 0, "loss": 0.125}]}
    A.write_curves_csv(tmp_path / "c.csv", curves)
    assert A.read_curves_csv(tmp_path / "c.csv") == curves

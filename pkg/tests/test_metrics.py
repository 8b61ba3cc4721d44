import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camdist import metrics
from camdist.errors import DegenerateGeometryError, InvalidInputError

from oracles import mpjpe as mpjpe_oracle


def _rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_mpjpe_oracle(rng):
    a, b = rng.normal(size=(4, 17, 3)), rng.normal(size=(4, 17, 3))
    assert metrics.mpjpe(a, b) == pytest.approx(mpjpe_oracle(a, b), abs=1e-12)
    with pytest.raises(InvalidInputError):
        metrics.mpjpe(a, b[:, :5])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_p_mpjpe_not_above_mpjpe(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(17, 3)) * 300
    pred = gt + rng.normal(size=(17, 3)) * rng.uniform(1, 300)
    assert metrics.p_mpjpe(pred, gt) <= metrics.mpjpe(pred, gt) + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_procrustes_recovers_similarity(seed):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(17, 3)) * 300
    R, s, t = _rotation(rng), rng.uniform(0.2, 5), rng.normal(size=3) * 1000
    gt = s * pred @ R.T + t
    tf, aligned = metrics.procrustes_align(pred, gt)
    assert np.max(np.abs(aligned - gt)) <= 1e-9 * max(1.0, np.abs(gt).max())
    assert tf.scale == pytest.approx(s, rel=1e-9)
    assert np.allclose(tf.rotation, R, atol=1e-9)


def test_procrustes_never_reflects(rng):
    pred = rng.normal(size=(17, 3))
    mirrored = pred * np.array([-1.0, 1.0, 1.0])
    tf, _ = metrics.procrustes_align(pred, mirrored)
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0)


def test_procrustes_degenerate(rng):
    gt = rng.normal(size=(17, 3))
    with pytest.raises(DegenerateGeometryError):
        metrics.procrustes_align(np.zeros((17, 3)), gt)
    line = np.outer(np.arange(17.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometryError):
        metrics.procrustes_align(gt, line)


def _head_pose(topo):
    gt = np.zeros((1, 17, 3))
    gt[0, :, 0] = np.arange(17) * 1000.0  # joints far apart
    neck, head = topo.head_segment
    gt[0, head] = gt[0, neck] + [0, 100.0, 0]  # head segment 100 mm, threshold 50 mm
    return gt


def test_pckh_fixtures(topo):
    gt = _head_pose(topo)
    assert metrics.pckh(gt.copy(), gt, topo) == 100.0
    assert metrics.pckh(gt + [0, 0, 60.0], gt, topo) == 0.0


def test_pckh_threshold_is_strict(topo):
    gt = _head_pose(topo)
    pred = gt.copy()
    pred[0, 3] += [0, 0, 50.0]  # exactly half the head segment counts as a miss
    pred[0, 4] += [0, 0, 49.0]
    assert metrics.pckh(pred, gt, topo) == pytest.approx(100.0 * 16 / 17)


def test_pckh_exactly_half(topo):
    gt = np.concatenate([_head_pose(topo), _head_pose(topo)])
    pred = gt.copy()
    pred[1] += [0, 0, 60.0]
    assert metrics.pckh(pred, gt, topo) == 50.0


def test_pckh_zero_head_raises(topo):
    gt = np.zeros((1, 17, 3))
    with pytest.raises(DegenerateGeometryError):
        metrics.pckh(gt, gt, topo)


def test_evaluate_breakdown_and_csv(tmp_path, topo, rng):
    gt = np.concatenate([_head_pose(topo)] * 4) + rng.normal(size=(4, 17, 3))
    pred = gt + rng.normal(size=gt.shape) * 20
    rep = metrics.evaluate(pred, gt, topo, groups=["walk", "walk", "squat", "squat"])
    assert [b["group"] for b in rep.breakdown] == ["squat", "walk"]
    assert rep.p_mpjpe <= rep.mpjpe
    rows = metrics.report_rows(rep, "d1", "S1", "maml")
    metrics.write_metric_csv(tmp_path / "m.csv", rows)
    back = metrics.read_metric_csv(tmp_path / "m.csv")
    assert len(back) == 9
    assert back[0]["value"] == pytest.approx(rep.mpjpe, abs=1e-6)
    text = (tmp_path / "m.csv").read_text()
    assert text.startswith("preset,scenario,variant,metric,value\n")

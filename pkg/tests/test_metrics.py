import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_rotation
from lift3d.errors import AlignmentUndefinedError
from lift3d.metrics import (
    ACTION_COLUMNS,
    AUC_THRESHOLDS,
    auc,
    evaluate,
    mpjpe,
    nmpjpe,
    optimal_scale,
    pck,
    pck_curve,
    pmpjpe,
    procrustes_align,
    write_action_table,
)
from lift3d.synthdata import MotionSpec, generate_motion

MOTION = np.asarray(generate_motion(MotionSpec(frames=1000, seed=2)).coords)


def loop_mpjpe(pred, gt, root=0):
    total, count = 0.0, 0
    for f in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            d = (pred[f, j] - pred[f, root]) - (gt[f, j] - gt[f, root])
            total += np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
            count += 1
    return total / count


def test_mpjpe_zero_and_loop_oracle(rng):
    gt = rng.normal(size=(5, 17, 3)) * 300
    assert mpjpe(gt, gt) == 0.0
    pred = gt + rng.normal(size=gt.shape) * 40
    assert mpjpe(pred, gt) == pytest.approx(loop_mpjpe(pred, gt), abs=1e-10)


def test_uniform_offset():
    gt = np.random.default_rng(0).normal(size=(3, 17, 3)) * 300
    pred = gt + np.array([10.0, 0.0, 0.0])
    # a uniform offset is pure translation, removed by root alignment
    assert mpjpe(pred, gt) == pytest.approx(0.0, abs=1e-12)
    assert mpjpe(pred, gt, align_root=False) == pytest.approx(10.0)
    # non-root joints moved, root fixed: every moved joint contributes 10 mm
    pred = gt.copy()
    pred[:, 1:, 0] += 10.0
    assert mpjpe(pred, gt) == pytest.approx(10.0 * 16 / 17)


def test_procrustes_exact_recovery(rng):
    pred = rng.normal(size=(17, 3)) * 300
    R = random_rotation(rng)
    gt = 1.7 * pred @ R.T + rng.normal(size=3) * 1000
    aligned, s, Rh, t = procrustes_align(pred, gt)
    assert pmpjpe(pred, gt) < 1e-9
    assert s[0] == pytest.approx(1.7)
    np.testing.assert_allclose(Rh[0], R, atol=1e-9)


def test_procrustes_refuses_reflection(rng):
    pred = rng.normal(size=(17, 3)) * 300
    mirrored = pred * np.array([-1.0, 1.0, 1.0])
    _, _, R, _ = procrustes_align(mirrored, pred)
    assert np.linalg.det(R[0]) == pytest.approx(1.0)
    assert pmpjpe(mirrored, pred) > 1.0

    # oracle allowing reflections (plain orthogonal Procrustes) reaches zero
    p0 = mirrored - mirrored.mean(0)
    g0 = pred - pred.mean(0)
    U, S, Vt = np.linalg.svd(p0.T @ g0)
    Q = Vt.T @ U.T
    s = S.sum() / (p0 ** 2).sum()
    assert np.abs(s * p0 @ Q.T - g0).max() < 1e-9


def test_procrustes_beats_random_similarities(rng):
    pred = rng.normal(size=(17, 3)) * 300
    gt = pred @ random_rotation(rng).T * 0.9 + rng.normal(size=(17, 3)) * 50
    aligned, *_ = procrustes_align(pred, gt)
    best = ((aligned[0] - gt) ** 2).sum()
    for _ in range(1000):
        cand = rng.uniform(0.5, 1.5) * pred @ random_rotation(rng).T + rng.normal(size=3) * 100
        assert best <= ((cand - gt) ** 2).sum() + 1e-9


def test_procrustes_degenerate():
    with pytest.raises(AlignmentUndefinedError):
        procrustes_align(np.random.default_rng(0).normal(size=(17, 3)), np.ones((17, 3)))


def test_nmpjpe_examples(rng):
    gt = rng.normal(size=(4, 17, 3)) * 300
    assert nmpjpe(2.0 * gt, gt) == pytest.approx(0.0, abs=1e-9)
    assert nmpjpe(gt, gt) == 0.0
    np.testing.assert_allclose(optimal_scale(gt, gt), 1.0)


def test_optimal_scale_beats_random_scalars(rng):
    gt = rng.normal(size=(1, 17, 3)) * 300
    pred = gt * 1.2 + rng.normal(size=gt.shape) * 30
    p = pred - pred[:, :1]
    g = gt - gt[:, :1]
    s = optimal_scale(pred, gt)[0]
    best = ((s * p - g) ** 2).sum()
    for c in rng.uniform(0.1, 3.0, 100):
        assert best <= ((c * p - g) ** 2).sum()


def test_pck_examples():
    gt = np.zeros((1, 4, 3))
    assert pck(gt, gt) == 100.0
    off = gt + np.array([200.0, 0.0, 0.0])
    assert pck(off, gt, align_root=False) == 0.0
    half = gt.copy()
    half[0, :2, 0] = 100.0
    half[0, 2:, 0] = 200.0
    assert pck(half, gt, align_root=False) == 50.0


def test_auc_examples():
    gt = np.zeros((1, 4, 3))
    assert auc(gt, gt) == 100.0
    assert auc(gt + [152.0, 0, 0], gt, align_root=False) == 0.0
    # thresholds 75, 80, ..., 150 accept a 75 mm error: 16 of 31
    assert auc(gt + [75.0, 0, 0], gt, align_root=False) == pytest.approx(100.0 * 16 / 31)
    assert len(AUC_THRESHOLDS) == 31


def test_pck_curve_monotone_and_auc_is_its_mean(rng):
    gt = rng.normal(size=(20, 17, 3)) * 300
    pred = gt + rng.normal(size=gt.shape) * 60
    curve = pck_curve(pred, gt)
    assert np.all(np.diff(curve) >= 0)
    assert auc(pred, gt) == np.mean(curve)


def _realistic_batch(seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(MOTION), size=int(rng.integers(50, 200)))
    gt = MOTION[idx]
    sigma = rng.uniform(1.0, 200.0)
    bias = rng.normal(size=3) * rng.uniform(0, 100)
    return gt + bias + rng.normal(size=gt.shape) * sigma, gt


@given(st.integers(0, 2**32 - 1))
def test_metric_ordering_on_evaluation_batches(seed):
    pred, gt = _realistic_batch(seed)
    rep = evaluate(pred, gt)
    assert rep.ordering_holds(1e-9), rep
    assert 0.0 <= rep.auc <= rep.pck150 <= 100.0


def test_ordering_is_statistical_not_pointwise():
    # a single frame with one gross outlier: the least-squares scale shrinks the
    # pose towards the outlier and raises the mean joint distance above MPJPE
    gt = np.random.default_rng(0).normal(size=(17, 3)) * 200
    gt[0] = 0.0
    pred = gt.copy()
    pred[10] += [3000.0, 0.0, 0.0]
    assert nmpjpe(pred, gt) > mpjpe(pred, gt)


@given(st.integers(0, 2**32 - 1))
def test_metrics_invariant_under_shared_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    pred, gt = _realistic_batch(seed)
    R, t = random_rotation(rng), rng.normal(size=3) * 1000
    a = evaluate(pred, gt).to_dict()
    b = evaluate(pred @ R.T + t, gt @ R.T + t).to_dict()
    for k in ("mpjpe", "pmpjpe", "nmpjpe"):
        assert b[k] == pytest.approx(a[k], rel=1e-9)
    for k in ("pck150", "auc"):
        assert abs(b[k] - a[k]) <= 100.0 / pred[..., 0].size + 1e-9


def test_per_action_table(tmp_path, rng):
    gt = rng.normal(size=(6, 17, 3)) * 300
    pred = gt + rng.normal(size=gt.shape) * 20
    actions = ["Walking"] * 3 + ["Eating"] * 3
    rep = evaluate(pred, gt, actions)
    assert set(rep.per_action) == {"Walking", "Eating"}
    assert rep.per_action["Walking"]["mpjpe"] == pytest.approx(mpjpe(pred[:3], gt[:3]))
    write_action_table({"ours": rep}, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["row", "metric", *ACTION_COLUMNS, "Avg"]
    assert len(rows[0]) == 2 + 15 + 1
    walk = rows[0].index("Walk")
    assert float(rows[1][walk]) == pytest.approx(rep.per_action["Walking"]["mpjpe"], abs=0.01)
    assert rows[1][rows[0].index("Sit")] == ""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from scenefit.core import MotionSequence, ValidationError
from scenefit.metrics import (accel_error_joints, evaluate, jitter_joints, mpjpe, mpjpe_joints,
                              pa_mpjpe_joints, pck_joints, pve_vertices, rte, segments, t_error, w_mpjpe_joints,
                              wa_mpjpe_joints, world_mpjpe_segments)

from conftest import random_rotation, rot


def joints(n=5, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 24, 3))


def test_zero_for_identical():
    g = joints(250)
    for f in (mpjpe_joints, pa_mpjpe_joints, pve_vertices, wa_mpjpe_joints, w_mpjpe_joints):
        assert f(g, g) == 0.0
    assert accel_error_joints(g, g, 30) == 0.0
    assert pck_joints(g, g) == 1.0
    T = g[:, 0]
    assert rte(T, T) == 0.0 and t_error(T, T) == 0.0


def test_mpjpe_offset():
    g = joints()
    p = g.copy()
    off = np.random.default_rng(1).normal(size=(5, 23, 3))
    off *= 0.01 / np.linalg.norm(off, axis=2, keepdims=True)
    p[:, 1:] += off
    # root joint has zero error, the other 23 are 10 mm off
    assert mpjpe_joints(p, g) == pytest.approx(10 * 23 / 24, abs=1e-9)
    assert mpjpe_joints(p + [1, 2, 3], g) == pytest.approx(mpjpe_joints(p, g), abs=1e-9)


def test_mpjpe_matches_loop():
    rng = np.random.default_rng(2)
    for _ in range(10):
        p, g = rng.normal(size=(2, 7, 24, 3))
        acc = []
        for k in range(7):
            for j in range(24):
                acc.append(np.sqrt(sum(((p[k, j, c] - p[k, 0, c]) - (g[k, j, c] - g[k, 0, c])) ** 2 for c in range(3))))
        assert mpjpe_joints(p, g) == pytest.approx(1000 * np.mean(acc), abs=1e-9)


def test_length_mismatch():
    with pytest.raises(ValidationError):
        mpjpe_joints(joints(4), joints(5))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.2, 5.0))
def test_pa_mpjpe_similarity_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(3, 24, 3))
    R = random_rotation(rng)
    p = scale * g @ R.T + rng.normal(size=3)
    assert pa_mpjpe_joints(p, g) < 1e-6


def test_pa_leq_mpjpe():
    rng = np.random.default_rng(3)
    for _ in range(100):
        g = rng.normal(size=(1, 24, 3))
        p = g + 0.1 * rng.normal(size=g.shape)
        assert pa_mpjpe_joints(p, g) <= mpjpe_joints(p, g) + 1e-9


def test_accel_and_jitter_hand_computed():
    g = np.zeros((4, 1, 3))
    p = g.copy()
    p[3, 0] = [0.0, 0.0, 1.0]  # third difference (0,0,1) at the only triple
    assert jitter_joints(p, 30) == pytest.approx(27000.0, rel=1e-15)
    # second differences of p: frame 1 -> 0, frame 2 -> (0,0,1)
    assert accel_error_joints(p, g, 30) == pytest.approx(0.5 * 900.0, rel=1e-15)
    line = np.outer(np.arange(6), [0.1, 0.2, 0.3]).reshape(6, 1, 3)
    assert jitter_joints(line, 30) == pytest.approx(0, abs=1e-9)
    with pytest.raises(ValidationError):
        jitter_joints(p[:3], 30)
    with pytest.raises(ValidationError):
        accel_error_joints(p[:2], g[:2], 30)


def test_pck_examples():
    g = joints(2)
    assert pck_joints(g + 1.0, g) == 1.0  # root-aligned
    p = g.copy()
    p[:, 1:] += [1.0, 0, 0]
    assert pck_joints(p, g) == pytest.approx(1 / 24)
    p = g.copy()
    p[:, 1:12] += [0.1, 0, 0]
    p[:, 12:] += [0, 0.5, 0]
    assert pck_joints(p, g) == 0.5


def test_segments_250():
    assert segments(250) == [(0, 100), (100, 200), (200, 250)]
    g = joints(250)
    p = g + 0.01
    assert len(world_mpjpe_segments(p, g, "wa")) == 3 and len(world_mpjpe_segments(p, g, "w")) == 3


def test_world_alignment_removes_rigid_motion():
    g = joints(100, 4)
    R = rot([0, 0, 1], 10)
    pivot = g[0, 0]
    p = (g - pivot) @ R.T + pivot
    assert wa_mpjpe_joints(p, g) < 1e-9 and w_mpjpe_joints(p, g) < 1e-9


def test_w_geq_wa_under_drift():
    rng = np.random.default_rng(5)
    g = np.cumsum(0.01 * rng.normal(size=(100, 24, 3)), axis=0) + rng.normal(size=(1, 24, 3))
    p = g.copy()
    for k in range(100):
        R = rot([0, 0, 1], 10 * k / 99)
        p[k] = (g[k] - g[0, 0]) @ R.T + g[0, 0]
    assert w_mpjpe_joints(p, g) >= wa_mpjpe_joints(p, g)


def test_t_error_offset():
    g = np.cumsum(np.random.default_rng(6).normal(size=(20, 3)), axis=0)
    assert t_error(g + [1, -2, 3], g) == pytest.approx(0, abs=1e-12)


def test_rte_hand_computed():
    gt = np.c_[np.arange(11.0), np.zeros(11), np.zeros(11)]  # 10 m straight path
    pred = gt + np.c_[np.zeros(11), np.arange(11) / 10.0, np.zeros(11)]  # 1 m lateral drift at the end
    # collinear ground truth: only the centroid is aligned, errors |k/10 - 0.5|
    want = np.mean(np.abs(np.arange(11) / 10 - 0.5)) / 10 * 100
    assert rte(pred, gt) == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(300 / 110 / 10 * 10, rel=1e-12)


def test_rte_against_scipy_alignment():
    rng = np.random.default_rng(7)
    gt = np.cumsum(rng.normal(size=(30, 3)), axis=0)
    pred = gt @ random_rotation(rng).T + 0.05 * rng.normal(size=gt.shape) + 2.0
    pc, gc = pred - pred.mean(0), gt - gt.mean(0)
    rot_, _ = Rotation.align_vectors(gc, pc)
    aligned = rot_.apply(pc) + gt.mean(0)
    path = np.linalg.norm(np.diff(gt, axis=0), axis=1).sum()
    want = np.linalg.norm(aligned - gt, axis=1).mean() / path * 100
    assert rte(pred, gt) == pytest.approx(want, rel=1e-9)


def test_rte_zero_path():
    with pytest.raises(ValidationError):
        rte(np.ones((5, 3)), np.zeros((5, 3)))


def test_evaluate_motion(template):
    rng = np.random.default_rng(8)
    T = np.cumsum(0.02 * rng.normal(size=(120, 3)), axis=0)
    gt = MotionSequence(T, 0.2 * rng.normal(size=(120, 24, 3)))
    res, detail = evaluate(gt, gt, template)
    d = res.to_dict()
    for k, v in d.items():
        if k == "pck03":
            assert v == 1.0
        elif k != "jitter":  # jitter is a property of the prediction alone
            assert v == 0.0, k
    assert [s["stop"] - s["start"] for s in detail["segments"]] == [100, 20]
    pred = gt.replace(T=gt.T + 0.01)
    res2, _ = evaluate(pred, gt, template)
    assert res2.mpjpe == pytest.approx(0, abs=1e-9) and res2.pve == pytest.approx(10.0 * np.sqrt(3), rel=1e-9)
    assert res2.mpjpe == pytest.approx(mpjpe(pred, gt, template))
    assert all(v >= 0 for v in res2.to_dict().values()) and 0 <= res2.pck03 <= 1
    res3, detail3 = evaluate(pred, gt, template, segment_length=50)
    assert len(detail3["segments"]) == 3

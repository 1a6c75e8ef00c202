import dataclasses

import numpy as np
import pytest

from scenefit.body import LIMB_GROUPS, PARENTS, STABLE_JOINTS, TORSO, LIMBS, BodyTemplate, skin_batch
from scenefit.core import CloudLabel, MotionSequence, ValidationError
from scenefit.geometry import NeighborIndex, chamfer, convex_hull_3d, hpr, penetration_depth
from scenefit.losses import LossWeights, Stage, detect_stable_limbs, total_loss
from scenefit.metrics import mpjpe
from scenefit.synth import (SynthConfig, WallType, corrupt, generate, generate_motion, generate_scene,
                            lidar_trajectory, simulate_lidar)


@pytest.fixture(scope="module")
def vertical(template):
    return generate(SynthConfig(seed=7, n_frames=120), template)


def test_scene_bounds_vertical():
    lo, hi = generate_scene(SynthConfig(seed=7)).bounds()
    assert np.abs(lo - [-2, -4, 0]).max() < 1e-9 and np.abs(hi - [2, 0, 3]).max() < 1e-9


@pytest.mark.parametrize("wall", [w.value for w in WallType])
def test_scene_deterministic_unit_normals(wall):
    a, b = generate_scene(SynthConfig(seed=3, wall=wall)), generate_scene(SynthConfig(seed=3, wall=wall))
    assert a == b
    assert np.abs(np.linalg.norm(a.normals, axis=1) - 1).max() < 1e-12
    assert len(a.faces) > 0 and a.faces.max() < len(a.vertices)


def test_motion_deterministic(template):
    cfg = SynthConfig(seed=9, n_frames=50)
    assert generate_motion(cfg, template) == generate_motion(cfg, template)


@pytest.mark.parametrize("wall", [w.value for w in WallType])
def test_ground_truth_contacts_and_no_penetration(template, wall):
    cfg = SynthConfig(seed=7, n_frames=120, wall=wall)
    scene = generate_scene(cfg)
    gt = generate_motion(cfg, template, scene)
    verts, _ = skin_batch(template, gt.theta, gt.T)
    idx = NeighborIndex(scene.vertices)
    assert penetration_depth(verts.reshape(-1, 3), scene, idx).min() > -1e-9
    rec = detect_stable_limbs(template, gt, scene)
    assert rec.stable.any()
    for k, i in zip(*np.nonzero(rec.stable)):
        ids = template.groups[LIMB_GROUPS[i]]
        _, d2 = idx.query(verts[k, ids])
        assert np.sqrt(d2).mean() < 1e-3


def test_ground_truth_losses_vanish(template):
    cfg = SynthConfig(seed=7, n_frames=60, lidar_sigma=0.0, points_per_frame=10_000)
    d = generate(cfg, template)
    for stage in Stage:
        _, br = total_loss(stage, LossWeights(), template, d.motion, d.scene, d.clouds, d.lidar_trajectory)
        assert max(br.values()) < 1e-6, br


def test_static_pose_on_holds(template):
    cfg = SynthConfig(seed=7, n_frames=8, lidar_sigma=0.0, points_per_frame=10_000)
    scene = generate_scene(cfg)
    gt = generate_motion(cfg, template, scene)
    static = gt.replace(T=np.repeat(gt.T[:1], 5, axis=0), theta=np.repeat(gt.theta[:1], 5, axis=0))
    traj = lidar_trajectory(dataclasses.replace(cfg, n_frames=5))
    clouds = simulate_lidar(template, static, scene, traj, cfg)
    for stage in Stage:
        _, br = total_loss(stage, LossWeights(), template, static, scene, clouds, traj)
        assert max(br.values()) < 1e-9
    v, _ = skin_batch(template, static.theta[:1], static.T[:1])
    _, d2 = NeighborIndex(scene.vertices).query(v[0, template.groups["LEFT_FOOT"]])
    assert np.sqrt(d2).min() < 1e-3


def test_lidar_noiseless_points_are_visible_vertices(template, vertical):
    cfg = dataclasses.replace(vertical.config, lidar_sigma=0.0)
    clouds = simulate_lidar(template, vertical.motion, vertical.scene, vertical.lidar_trajectory, cfg)
    verts, _ = skin_batch(template, vertical.motion.theta, vertical.motion.T)
    for k in (0, 50, 119):
        c = clouds[k]
        assert c.label == CloudLabel.HUMAN and len(c) <= cfg.points_per_frame
        vis = hpr(verts[k], vertical.lidar_trajectory[k])
        _, d2 = NeighborIndex(verts[k, vis]).query(c.points)
        assert d2.max() == 0.0


def test_lidar_noise_chamfer_bound(template):
    sigma = 0.01
    for seed in range(3):
        cfg = SynthConfig(seed=seed, n_frames=6, lidar_sigma=sigma, points_per_frame=10_000)
        d = generate(cfg, template)
        verts, _ = skin_batch(template, d.motion.theta, d.motion.T)
        for k in range(6):
            vis = hpr(verts[k], d.lidar_trajectory[k])
            P, V = d.clouds[k].points, verts[k, vis]
            # each one-sided mean is bounded by the noise energy E|n|^2 = 3 sigma^2;
            # the chamfer here is the sum of both sides
            assert NeighborIndex(V).query(P)[1].mean() <= 3 * sigma ** 2
            assert NeighborIndex(P).query(V)[1].mean() <= 3 * sigma ** 2
            assert chamfer(P, V) <= 2 * 3 * sigma ** 2


def _sphere_template(n=500, radius=0.3, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n, 3))
    p = radius * p / np.linalg.norm(p, axis=1, keepdims=True)
    w = np.zeros((n, 24))
    w[:, 0] = 1.0
    groups = {"LEFT_FOOT": [0], "RIGHT_FOOT": [1], "LEFT_HAND": [2], "RIGHT_HAND": [3],
              TORSO: list(range(4, n)), LIMBS: [0, 1, 2, 3], STABLE_JOINTS: [0]}
    return BodyTemplate(p, convex_hull_3d(p).faces, PARENTS, w, np.zeros((n, 3, 10)), np.full((24, n), 1.0 / n), groups)


def test_lidar_never_emits_far_side():
    # convex fixture: points whose outward normal faces away from the sensor must not be emitted
    tpl = _sphere_template()
    motion = MotionSequence(np.zeros((4, 3)), np.zeros((4, 24, 3)))
    sensor = np.array([3.5, 0.0, 0.0])
    cfg = SynthConfig(n_frames=4, lidar_sigma=0.0, points_per_frame=10_000)
    clouds = simulate_lidar(tpl, motion, None, sensor, cfg)
    for c in clouds:
        assert np.all(c.points @ sensor > 0)


def test_sensor_inside_body(template, vertical):
    with pytest.raises(ValidationError):
        simulate_lidar(template, vertical.motion, None, vertical.motion.T[0] + [0, 0, 0.1], vertical.config)


def test_corrupt_identity_and_drift(template, vertical):
    assert corrupt(vertical.motion, dataclasses.replace(vertical.config, drift=[0, 0, 0], pose_sigma=0)) == vertical.motion
    cfg = SynthConfig(seed=7, n_frames=200, drift=[0, 0, 0.3])
    gt = generate_motion(cfg, template)
    bad = corrupt(gt, cfg)
    assert np.array_equal(bad.T[-1] - gt.T[-1], [0, 0, 0.3]) or np.abs(bad.T[-1] - gt.T[-1] - [0, 0, 0.3]).max() < 1e-15
    assert np.array_equal(bad.T[0], gt.T[0])
    noisy = corrupt(gt, dataclasses.replace(cfg, drift=[0, 0, 0], pose_sigma=0.05))
    assert mpjpe(noisy, gt, template) > 0
    assert np.array_equal(noisy.theta[:, 0], gt.theta[:, 0])
    assert corrupt(gt, dataclasses.replace(cfg, pose_sigma=0.05)) == corrupt(gt, dataclasses.replace(cfg, pose_sigma=0.05))


def test_config_validation():
    with pytest.raises(ValidationError):
        SynthConfig(n_frames=3)
    with pytest.raises(ValueError):
        SynthConfig(wall="DIAGONAL")
    with pytest.raises(ValidationError):
        SynthConfig.from_dict({"seed": 1, "colour": "red"})
    cfg = SynthConfig(seed=4, wall="OVERHANG")
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_unreachable_layout(template):
    with pytest.raises(ValidationError, match="unreachable"):
        generate_motion(SynthConfig(start=[0.0, 5.0]), template)

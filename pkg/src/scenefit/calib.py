"""Coarse LiDAR/IMU-to-world calibration and world/camera motion conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    CoordinateFrame,
    MotionSequence,
    RigidTransform,
    ValidationError,
    check_frames,
    log_rotation,
    polar_orthonormalize,
    rodrigues,
    rotation_deviation,
)

# forward offset of the LiDAR start position in the world frame (m)
LIDAR_FORWARD_OFFSET = 0.2


@dataclass(frozen=True)
class CalibrationInput:
    ground_normal: np.ndarray
    plane_normal: np.ndarray
    lidar_height: float

    def __post_init__(self):
        g = np.asarray(self.ground_normal, dtype=float)
        m = np.asarray(self.plane_normal, dtype=float)
        for name, v in (("ground_normal", g), ("plane_normal", m)):
            if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > 1e-6:
                raise ValidationError(f"{name} must be a unit 3-vector")
        if abs(g @ m) >= 0.99:
            raise ValidationError("ground and plane normals are (nearly) parallel")
        if not np.isfinite(self.lidar_height):
            raise ValidationError("lidar_height must be finite")
        object.__setattr__(self, "ground_normal", g)
        object.__setattr__(self, "plane_normal", m)
        object.__setattr__(self, "lidar_height", float(self.lidar_height))


@dataclass(frozen=True)
class Calibration:
    transform: RigidTransform
    deviation: float  # orthonormality deviation of the raw rotation rows before correction


def coarse_calibration_lidar(inp: CalibrationInput, forward_offset: float = LIDAR_FORWARD_OFFSET) -> Calibration:
    """LiDAR->world transform with rotation rows (m x g, m, g) and translation (0, offset, h)."""
    g, m = inp.ground_normal, inp.plane_normal
    e = np.cross(m, g)
    e_raw = e / np.linalg.norm(e)
    raw = np.vstack([e_raw, m, g])
    deviation = rotation_deviation(raw)
    if deviation == 0.0:
        R = raw
    else:
        # remove the ground component from the wall normal, then snap to SO(3)
        m_perp = m - (m @ g) * g
        m_perp /= np.linalg.norm(m_perp)
        e = np.cross(m_perp, g)
        R = polar_orthonormalize(np.vstack([e / np.linalg.norm(e), m_perp, g]))
    tf = RigidTransform.from_rt(R, [0.0, forward_offset, inp.lidar_height], CoordinateFrame.LIDAR, CoordinateFrame.WORLD)
    return Calibration(tf, deviation)


def coarse_calibration_imu() -> RigidTransform:
    """IMU->world transform: entries (1,1)=-1, (2,3)=1, (3,2)=1, (4,4)=1, zeros elsewhere."""
    m = np.zeros((4, 4))
    for (r, c), v in {(1, 1): -1.0, (2, 3): 1.0, (3, 2): 1.0, (4, 4): 1.0}.items():
        m[r - 1, c - 1] = v
    return RigidTransform(m, CoordinateFrame.IMU, CoordinateFrame.WORLD)


def _root_joint(template, beta) -> np.ndarray:
    if template is None:
        return np.zeros(3)
    return template.rest_joints(beta)[0]


def transform_motion(t: RigidTransform, motion: MotionSequence, template=None) -> MotionSequence:
    """Rigidly move a motion: root orientation and translation pre-composed by ``t``.

    The root rotates about the rest pelvis joint, so the translation update accounts for
    its offset when a template is given (the synthetic template has it at the origin).
    """
    check_frames(t.source_frame, motion.frame, "motion")
    A, b = t.rotation, t.translation
    j0 = _root_joint(template, motion.beta)
    root = rodrigues(motion.theta[:, 0])
    theta = motion.theta.copy()
    theta[:, 0] = log_rotation(A @ root)
    T = (motion.T + j0) @ A.T + b - j0
    return motion.replace(T=T, theta=theta, frame=t.target_frame)


def world_from_camera(extrinsic_w2c: RigidTransform, motion_in_camera: MotionSequence, template=None) -> MotionSequence:
    if extrinsic_w2c.source_frame != CoordinateFrame.WORLD or extrinsic_w2c.target_frame != CoordinateFrame.CAMERA:
        raise ValidationError("extrinsic must map WORLD -> CAMERA")
    check_frames(CoordinateFrame.CAMERA, motion_in_camera.frame, "motion")
    return transform_motion(extrinsic_w2c.inverse(), motion_in_camera, template)


def camera_from_world(extrinsic_w2c: RigidTransform, motion_in_world: MotionSequence, template=None) -> MotionSequence:
    if extrinsic_w2c.source_frame != CoordinateFrame.WORLD or extrinsic_w2c.target_frame != CoordinateFrame.CAMERA:
        raise ValidationError("extrinsic must map WORLD -> CAMERA")
    return transform_motion(extrinsic_w2c, motion_in_world, template)


def fit_plane_ransac(points, threshold: float = 0.02, iterations: int = 500, seed: int = 0):
    """RANSAC plane (unit normal n, offset d with n·x + d = 0) and inlier mask, refined by SVD."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise ValidationError("plane fit needs at least 3 points")
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, -1
    for _ in range(iterations):
        a, b, c = pts[rng.choice(len(pts), 3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n /= norm
        mask = np.abs((pts - a) @ n) < threshold
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
    if best_mask is None:
        raise ValidationError("all RANSAC samples were degenerate")
    inl = pts[best_mask]
    centroid = inl.mean(axis=0)
    _, _, vt = np.linalg.svd(inl - centroid)
    n = vt[-1]
    return n, float(-n @ centroid), best_mask


def estimate_calibration_input(points, threshold=0.02, iterations=500, seed=0) -> CalibrationInput:
    """Ground and wall normals plus LiDAR height from a LiDAR-frame scan containing both planes.

    The ground is the plane whose normal is closest to LiDAR up; it is oriented upwards and
    the wall normal is oriented along LiDAR forward.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n1, d1, mask1 = fit_plane_ransac(pts, threshold, iterations, seed)
    rest = pts[~mask1]
    n2, d2, _ = fit_plane_ransac(rest, threshold, iterations, seed + 1)
    up, fwd = np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0])
    if abs(n1 @ up) >= abs(n2 @ up):
        (g, dg), (m, _) = (n1, d1), (n2, d2)
    else:
        (g, dg), (m, _) = (n2, d2), (n1, d1)
    if g @ up < 0:
        g, dg = -g, -dg
    if m @ fwd < 0:
        m = -m
    # LiDAR sits at the origin of its own frame; its height is the signed distance to the ground
    return CalibrationInput(g, m, dg)

"""Shared value types: coordinate frames, rigid transforms, motions, clouds, meshes."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
NUM_JOINTS = 24
NUM_BETAS = 10


class ScenefitError(Exception):
    """Base class for all package errors."""


class FrameMismatchError(ScenefitError):
    pass


class ValidationError(ScenefitError):
    pass


class DegenerateGeometryError(ScenefitError):
    pass


class CoordinateFrame(str, enum.Enum):
    IMU = "IMU"
    LIDAR = "LIDAR"
    CAMERA = "CAMERA"
    WORLD = "WORLD"


class CloudLabel(str, enum.Enum):
    HUMAN = "HUMAN"
    SCENE = "SCENE"
    RAW = "RAW"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def check_frames(expected: CoordinateFrame, got: CoordinateFrame, what: str = "operand") -> None:
    if CoordinateFrame(expected) != CoordinateFrame(got):
        raise FrameMismatchError(f"{what} is in frame {CoordinateFrame(got).value}, expected {CoordinateFrame(expected).value}")


def polar_orthonormalize(r: np.ndarray) -> np.ndarray:
    """Closest rotation to ``r`` in the Frobenius sense (polar factor with det +1)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_deviation(r: np.ndarray) -> float:
    """max(|RᵀR - I|, |det R - 1|)."""
    return float(max(np.abs(r.T @ r - np.eye(3)).max(), abs(np.linalg.det(r) - 1.0)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rigid map ``source_frame -> target_frame``, stored as a 4x4 homogeneous matrix."""

    matrix: np.ndarray
    source_frame: CoordinateFrame
    target_frame: CoordinateFrame

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (4, 4) or not np.all(np.isfinite(m)):
            raise ValidationError("transform matrix must be a finite 4x4 array")
        if np.abs(m[3] - [0, 0, 0, 1]).max() > 0:
            raise ValidationError("last row of a homogeneous transform must be (0, 0, 0, 1)")
        dev = rotation_deviation(m[:3, :3])
        if dev > ORTHO_TOL:
            raise ValidationError(f"rotation block not orthonormal (deviation {dev:.3e})")
        object.__setattr__(self, "matrix", _frozen(m))
        object.__setattr__(self, "source_frame", CoordinateFrame(self.source_frame))
        object.__setattr__(self, "target_frame", CoordinateFrame(self.target_frame))

    @classmethod
    def from_rt(cls, rotation, translation, source_frame, target_frame, reorthonormalize=False):
        r = np.asarray(rotation, dtype=float)
        if reorthonormalize and rotation_deviation(r) > ORTHO_TOL:
            r = polar_orthonormalize(r)
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = np.asarray(translation, dtype=float)
        return cls(m, source_frame, target_frame)

    @classmethod
    def identity(cls, frame=CoordinateFrame.WORLD, target_frame=None):
        return cls(np.eye(4), frame, frame if target_frame is None else target_frame)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        check_frames(self.source_frame, other.target_frame, "inner transform target")
        m = self.matrix @ other.matrix
        r = m[:3, :3]
        if rotation_deviation(r) > ORTHO_TOL:
            r = polar_orthonormalize(r)
        return RigidTransform.from_rt(r, m[:3, 3], other.source_frame, self.target_frame)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform.from_rt(rt, -rt @ self.translation, self.target_frame, self.source_frame)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.T + self.translation

    def apply(self, cloud: "PointCloudFrame") -> "PointCloudFrame":
        check_frames(self.source_frame, cloud.frame, "point cloud")
        return PointCloudFrame(self.apply_points(cloud.points), cloud.timestamp, self.target_frame, cloud.label)

    def allclose(self, other: "RigidTransform", atol=1e-12) -> bool:
        return (
            self.source_frame == other.source_frame
            and self.target_frame == other.target_frame
            and np.allclose(self.matrix, other.matrix, rtol=0, atol=atol)
        )


def apply_transform(t: RigidTransform, cloud: "PointCloudFrame") -> "PointCloudFrame":
    return t.apply(cloud)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """Per-frame root translation ``T`` (N,3), axis-angle pose ``theta`` (N,24,3), shared ``beta`` (10,)."""

    T: np.ndarray
    theta: np.ndarray
    beta: np.ndarray = field(default_factory=lambda: np.zeros(NUM_BETAS))
    frame_rate: float = 30.0
    frame: CoordinateFrame = CoordinateFrame.WORLD

    def __post_init__(self):
        T = np.array(self.T, dtype=float)
        theta = np.array(self.theta, dtype=float)
        beta = np.array(self.beta, dtype=float)
        if T.ndim != 2 or T.shape[1] != 3 or T.shape[0] < 1:
            raise ValidationError(f"T must have shape (N>=1, 3), got {T.shape}")
        n = T.shape[0]
        if theta.shape != (n, NUM_JOINTS, 3):
            raise ValidationError(f"theta must have shape ({n}, {NUM_JOINTS}, 3), got {theta.shape}")
        if beta.shape != (NUM_BETAS,):
            raise ValidationError(f"beta must have shape ({NUM_BETAS},), got {beta.shape}")
        for name, a in (("T", T), ("theta", theta), ("beta", beta)):
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"{name} contains non-finite values")
        if not (np.isfinite(self.frame_rate) and self.frame_rate > 0):
            raise ValidationError("frame_rate must be positive")
        object.__setattr__(self, "T", _frozen(T))
        object.__setattr__(self, "theta", _frozen(theta))
        object.__setattr__(self, "beta", _frozen(beta))
        object.__setattr__(self, "frame_rate", float(self.frame_rate))
        object.__setattr__(self, "frame", CoordinateFrame(self.frame))

    def __len__(self) -> int:
        return self.T.shape[0]

    @property
    def n_frames(self) -> int:
        return self.T.shape[0]

    def replace(self, **kw) -> "MotionSequence":
        args = dict(T=self.T, theta=self.theta, beta=self.beta, frame_rate=self.frame_rate, frame=self.frame)
        args.update(kw)
        return MotionSequence(**args)

    def params(self) -> np.ndarray:
        """Optimizable parameters as an (N, 75) array: translation then flattened pose."""
        return np.concatenate([self.T, self.theta.reshape(len(self), -1)], axis=1)

    def with_params(self, params: np.ndarray) -> "MotionSequence":
        params = np.asarray(params, dtype=float).reshape(len(self), 3 + 3 * NUM_JOINTS)
        return self.replace(T=params[:, :3], theta=params[:, 3:].reshape(-1, NUM_JOINTS, 3))

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return (
            self.frame == other.frame
            and self.frame_rate == other.frame_rate
            and np.array_equal(self.T, other.T)
            and np.array_equal(self.theta, other.theta)
            and np.array_equal(self.beta, other.beta)
        )


@dataclass(frozen=True, eq=False)
class PointCloudFrame:
    points: np.ndarray
    timestamp: float = 0.0
    frame: CoordinateFrame = CoordinateFrame.WORLD
    label: CloudLabel = CloudLabel.RAW

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValidationError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(p))
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "frame", CoordinateFrame(self.frame))
        object.__setattr__(self, "label", CloudLabel(self.label))

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloudFrame):
            return NotImplemented
        return (
            self.frame == other.frame
            and self.label == other.label
            and self.timestamp == other.timestamp
            and np.array_equal(self.points, other.points)
        )


@dataclass(frozen=True, eq=False)
class SceneMesh:
    """Triangle mesh with unit per-vertex normals (outward, i.e. pointing into free space)."""

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        n = np.array(self.normals, dtype=float).reshape(-1, 3)
        if v.shape[0] == 0:
            raise ValidationError("scene mesh has no vertices")
        if n.shape != v.shape:
            raise ValidationError(f"normals shape {n.shape} does not match vertices {v.shape}")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(n))):
            raise ValidationError("scene mesh contains non-finite values")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            bad = int(np.argmax((f < 0).any(axis=1) | (f >= v.shape[0]).any(axis=1)))
            raise ValidationError(f"faces[{bad}] has a vertex index out of range [0, {v.shape[0]})")
        norms = np.linalg.norm(n, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValidationError(f"normals[{int(np.argmax(np.abs(norms - 1.0)))}] is not unit length")
        if f.size:
            tri = v[f]
            area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
            if area2.min() <= 1e-14:
                raise ValidationError(f"faces[{int(np.argmin(area2))}] is degenerate (zero area)")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        object.__setattr__(self, "normals", _frozen(n))

    def __eq__(self, other):
        if not isinstance(other, SceneMesh):
            return NotImplemented
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
            and np.array_equal(self.normals, other.normals)
        )

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Axis-angle (...,3) to rotation matrices (...,3,3)."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta < 1e-12
    safe = np.where(small, 1.0, theta)
    k = aa / safe
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], axis=-1).reshape(aa.shape[:-1] + (3, 3))
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + s * K + (1.0 - c) * (K @ K)
    if np.any(small):
        # first-order expansion keeps the map smooth (and differentiable by FD) at zero
        x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
        Ks = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1).reshape(K.shape)
        R = np.where(small[..., None], eye + Ks + 0.5 * (Ks @ Ks), R)
    return R


def log_rotation(R: np.ndarray) -> np.ndarray:
    """Rotation matrix (...,3,3) to axis-angle (...,3)."""
    from scipy.spatial.transform import Rotation

    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = Rotation.from_matrix(flat).as_rotvec()
    return out.reshape(R.shape[:-2] + (3,))

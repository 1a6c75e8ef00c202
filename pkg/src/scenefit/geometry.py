"""Spatial primitives: nearest neighbours, Procrustes, ICP, hidden point removal, hulls."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .core import CoordinateFrame, DegenerateGeometryError, RigidTransform, SceneMesh, ValidationError

_TIE_K = 8


class NeighborIndex:
    """Exact nearest-neighbour index over a fixed point set (k-d tree backed).

    Ties are broken towards the lowest point index, and returned squared distances
    are recomputed from coordinates so they match a linear scan bit for bit.
    """

    def __init__(self, points):
        pts = np.array(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValidationError("index points must be finite")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts) if len(pts) else None

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest point index and squared distance for each row of ``queries``."""
        if self._tree is None:
            raise ValidationError("nearest-neighbour query on an empty index")
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        if len(q) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        k = min(_TIE_K, len(self.points))
        _, cand = self._tree.query(q, k=k)
        cand = cand.reshape(len(q), k)
        diff = q[:, None, :] - self.points[cand]
        d2 = (diff * diff).sum(axis=2)
        best = d2.min(axis=1)
        # lowest index among exact ties
        masked = np.where(d2 == best[:, None], cand, np.iinfo(np.int64).max)
        idx = masked.min(axis=1)
        # near-ties that may extend past the k candidates: resolve by ball search
        suspect = np.flatnonzero((d2.max(axis=1) <= best * (1 + 1e-12) + 1e-300) & (k < len(self.points)))
        for i in suspect:
            r = np.sqrt(best[i]) * (1 + 1e-9) + 1e-12
            ball = np.array(self._tree.query_ball_point(q[i], r), dtype=np.int64)
            dd = q[i] - self.points[ball]
            dd = (dd * dd).sum(axis=1)
            m = dd.min()
            idx[i] = ball[dd == m].min()
            best[i] = m
        return idx.astype(np.int64), best

    def within(self, p, radius: float) -> np.ndarray:
        """Sorted indices of points within ``radius`` of ``p``."""
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        return np.array(sorted(self._tree.query_ball_point(np.asarray(p, dtype=float), radius)), dtype=np.int64)


def nearest(index: NeighborIndex, p) -> tuple[np.ndarray, float]:
    i, d2 = index.query(np.asarray(p, dtype=float)[None])
    return index.points[i[0]].copy(), float(d2[0])


def linear_scan_nearest(points: np.ndarray, q: np.ndarray) -> tuple[int, float]:
    """Reference O(M) nearest neighbour (lowest index on ties)."""
    diff = np.asarray(points, dtype=float) - np.asarray(q, dtype=float)
    d2 = (diff * diff).sum(axis=1)
    i = int(np.argmin(d2))
    return i, float(d2[i])


@dataclass
class SimilarityFit:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation

    def as_transform(self, source_frame=CoordinateFrame.WORLD, target_frame=CoordinateFrame.WORLD) -> RigidTransform:
        return RigidTransform.from_rt(self.rotation, self.translation, source_frame, target_frame, reorthonormalize=True)


def kabsch(source, target, with_scale: bool = False, weights=None) -> SimilarityFit:
    """Least-squares ``s R x + t ≈ y`` with det(R) = +1 (Umeyama when ``with_scale``)."""
    x = np.asarray(source, dtype=float).reshape(-1, 3)
    y = np.asarray(target, dtype=float).reshape(-1, 3)
    if x.shape != y.shape:
        raise ValidationError(f"kabsch needs equal-size point sets, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise DegenerateGeometryError("kabsch needs at least 3 correspondences")
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mx, my = w @ x, w @ y
    xc, yc = x - mx, y - my
    sx = np.linalg.svd(xc * np.sqrt(w)[:, None], compute_uv=False)
    if sx[1] <= 1e-12 * max(sx[0], 1e-300):
        raise DegenerateGeometryError("degenerate configuration: source points are collinear or coincident")
    cov = (yc * w[:, None]).T @ xc
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    D = np.diag([1.0, 1.0, d])
    R = u @ D @ vt
    scale = 1.0
    if with_scale:
        var_x = (w * (xc * xc).sum(axis=1)).sum()
        scale = float((s * np.diag(D)).sum() / var_x)
    t = my - scale * R @ mx
    return SimilarityFit(R, t, scale)


def alignment_residual(fit: SimilarityFit, source, target) -> float:
    r = fit.apply(source) - np.asarray(target)
    return float((r * r).sum())


@dataclass
class ICPConfig:
    max_iters: int = 50
    tol: float = 1e-6
    trim_fraction: float = 0.1
    center_init: bool = True


@dataclass
class ICPResult:
    transform: RigidTransform
    residual: float  # trimmed RMS distance (m) at the returned transform
    iterations: int
    history: list = field(default_factory=list)

    @property
    def rotation(self):
        return self.transform.rotation

    @property
    def translation(self):
        return self.transform.translation


def _points(c) -> np.ndarray:
    return np.asarray(getattr(c, "points", c), dtype=float).reshape(-1, 3)


def icp(source, target, config: ICPConfig | None = None, target_index: NeighborIndex | None = None) -> ICPResult:
    """Trimmed point-to-point ICP registering ``source`` onto ``target``.

    The trimmed mean squared residual over a fixed number of pairs is non-increasing,
    so the best-so-far transform is the last accepted one.
    """
    cfg = config or ICPConfig()
    src, dst = _points(source), _points(target)
    frame = getattr(source, "frame", CoordinateFrame.WORLD)
    if len(src) < 3 or len(dst) < 3:
        raise DegenerateGeometryError("icp needs at least 3 points in each cloud")
    index = target_index or NeighborIndex(dst)
    keep = max(3, int(np.ceil((1.0 - cfg.trim_fraction) * len(src))))

    R, t = np.eye(3), np.zeros(3)
    if cfg.center_init:
        t = dst.mean(axis=0) - src.mean(axis=0)

    def trimmed(R, t):
        moved = src @ R.T + t
        nn, d2 = index.query(moved)
        order = np.argsort(d2, kind="stable")[:keep]
        return float(d2[order].mean()), order, nn

    err, order, nn = trimmed(R, t)
    history = [float(np.sqrt(err))]
    best = (R, t, err)
    it = 0
    for it in range(1, cfg.max_iters + 1):
        try:
            fit = kabsch(src[order], dst[nn[order]])
        except DegenerateGeometryError:
            break
        new_err, new_order, new_nn = trimmed(fit.rotation, fit.translation)
        if not np.isfinite(new_err) or new_err > err:
            break
        improvement = np.sqrt(err) - np.sqrt(new_err)
        R, t, err, order, nn = fit.rotation, fit.translation, new_err, new_order, new_nn
        best = (R, t, err)
        history.append(float(np.sqrt(err)))
        if improvement < cfg.tol:
            break
    R, t, err = best
    tf = RigidTransform.from_rt(R, t, frame, getattr(target, "frame", frame), reorthonormalize=True)
    return ICPResult(tf, float(np.sqrt(err)), it, history)


@dataclass
class Hull:
    vertices: np.ndarray  # sorted indices of input points that are hull vertices
    faces: np.ndarray  # (F, 3) indices into the input, counter-clockwise seen from outside
    normals: np.ndarray  # (F, 3) outward unit normals
    offsets: np.ndarray  # (F,) with normals @ x + offsets <= 0 inside


def convex_hull_3d(points) -> Hull:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 4:
        raise DegenerateGeometryError("convex hull needs at least 4 points")
    try:
        h = ConvexHull(pts)
    except QhullError as e:
        raise DegenerateGeometryError(f"degenerate hull input (coplanar or coincident points): {str(e).splitlines()[0]}") from None
    faces = h.simplices.copy()
    normals = h.equations[:, :3]
    a, b, c = pts[faces[:, 0]], pts[faces[:, 1]], pts[faces[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), normals) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return Hull(np.sort(h.vertices), faces, normals.copy(), h.equations[:, 3].copy())


def spherical_flip(points, viewpoint, gamma: float = 2.0) -> np.ndarray:
    p = np.asarray(points, dtype=float) - np.asarray(viewpoint, dtype=float)
    norms = np.linalg.norm(p, axis=1, keepdims=True)
    if np.any(norms <= 0):
        raise ValidationError("viewpoint coincides with an input point")
    radius = (10.0 ** gamma) * norms.max()
    return p + 2.0 * (radius - norms) * p / norms


def hpr(points, viewpoint, gamma: float = 2.0) -> np.ndarray:
    """Indices (sorted) of points visible from ``viewpoint`` by spherical flipping."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 4:
        raise DegenerateGeometryError("hidden point removal needs at least 4 points")
    flipped = spherical_flip(pts, viewpoint, gamma)
    hull = convex_hull_3d(np.vstack([flipped, np.zeros((1, 3))]))
    v = hull.vertices
    return v[v < len(pts)]


def chamfer(a, b, index_a: NeighborIndex | None = None, index_b: NeighborIndex | None = None) -> float:
    """Two-sided normalised squared Chamfer distance."""
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValidationError("chamfer distance of an empty cloud")
    _, d_ab = (index_b or NeighborIndex(pb)).query(pa)
    _, d_ba = (index_a or NeighborIndex(pa)).query(pb)
    return float(d_ab.mean() + d_ba.mean())


def chamfer_bruteforce(a, b) -> float:
    pa, pb = _points(a), _points(b)
    diff = pa[:, None, :] - pb[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def penetration_depth(v, mesh: SceneMesh, index: NeighborIndex | None = None):
    """Signed depth ``(v - q) · n_q`` with ``q`` the nearest mesh vertex; negative inside."""
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    idx, _ = (index or NeighborIndex(mesh.vertices)).query(v.reshape(-1, 3))
    d = np.einsum("ij,ij->i", v.reshape(-1, 3) - mesh.vertices[idx], mesh.normals[idx])
    return float(d[0]) if single else d

"""Objective terms for scene-aware motion refinement.

Every term is evaluated against *gates* (stability flags, contact targets, visible
vertex sets, nearest-neighbour correspondences) that are computed once from the current
motion and then frozen, which makes the objective smooth in T and theta between
refreshes. The standalone per-term functions build the gates for the motion they are
given and evaluate immediately.

Sequence terms carry the 1/l factor with l = number of frames; per-frame terms are
averaged over frames when summed into the sequence objective.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from enum import Enum

import numpy as np

from .body import (
    END_EFFECTORS,
    LEFT_FOOT,
    LEFT_HAND,
    LIMB_GROUPS,
    LIMBS,
    RIGHT_FOOT,
    RIGHT_HAND,
    SIBLING,
    STABLE_JOINTS,
    TORSO,
    BodyTemplate,
    skin_batch,
    skin_vjp,
)
from .core import MotionSequence, SceneMesh, ScenefitError, ValidationError
from .geometry import ICPConfig, NeighborIndex, chamfer, hpr, icp

FEET = (LEFT_FOOT, RIGHT_FOOT)
HANDS = (LEFT_HAND, RIGHT_HAND)


class Stage(str, Enum):
    ANNOTATE = "ANNOTATE"
    POSTPROCESS = "POSTPROCESS"


STAGE_TERMS = {
    Stage.ANNOTATE: ("gr", "st", "ct", "sld", "trans", "joints", "m2p"),
    Stage.POSTPROCESS: ("lwd", "sds", "vlr"),
}
ALL_TERMS = STAGE_TERMS[Stage.ANNOTATE] + STAGE_TERMS[Stage.POSTPROCESS]
# terms that need the human point clouds and the LiDAR viewpoint
CLOUD_TERMS = ("m2p", "gr", "lwd", "vlr")


@dataclass
class LossWeights:
    ct: float = 1.0
    sld: float = 1.0
    trans: float = 1.0
    joints: float = 1.0
    m2p: float = 100.0
    gr: float = 100.0
    st: float = 1000.0
    lwd: float = 100.0
    sds: float = 0.1
    vlr: float = 100.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"loss weight {f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)

    def to_dict(self) -> dict:
        return asdict(self)


def _default_part_weights():
    return {TORSO: 1.0, LIMBS: 2.0, "OTHER": 1.0}


@dataclass
class LossConfig:
    stable_threshold: float = 0.03  # m, limb movement below which a limb may be stable
    r_contact: float = 0.10  # m, contact-environment search radius
    d_torso: float = 0.10
    d_limb: float = 0.05
    w_torso: float = 1.0
    w_limb: float = 2.0
    eps_v: float = 0.02  # m/frame, speed gate for velocity directions
    hpr_gamma: float = 2.0
    part_weights: dict = field(default_factory=_default_part_weights)
    m2p_correspondence: str = "icp"  # "icp" or "nearest"
    m2p_post_registration: bool = False
    icp_max_iters: int = 30

    def __post_init__(self):
        if self.d_limb > self.d_torso:
            raise ValidationError("d_limb must not exceed d_torso")
        if self.m2p_correspondence not in ("icp", "nearest"):
            raise ValidationError("m2p_correspondence must be 'icp' or 'nearest'")
        for k, v in self.part_weights.items():
            if v < 0:
                raise ValidationError(f"part weight {k} must be >= 0")


class MissingInputError(ScenefitError):
    pass


# ----------------------------------------------------------------------------------
# gate containers


@dataclass
class PairTerm:
    """Sum over pairs of weight * ||verts[frame, vert] - target|| (squared or not)."""

    frame: np.ndarray
    vert: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    squared: bool = True

    @classmethod
    def empty(cls, squared=True):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0), squared)

    @classmethod
    def concat(cls, parts, squared=True):
        parts = [p for p in parts if p is not None and len(p[0])]
        if not parts:
            return cls.empty(squared)
        fr, vi, tg, wt = zip(*parts)
        return cls(np.concatenate(fr), np.concatenate(vi), np.vstack(tg), np.concatenate(wt), squared)

    def value(self, verts, grad=None) -> float:
        if len(self.frame) == 0:
            return 0.0
        d = verts[self.frame, self.vert] - self.target
        if self.squared:
            if grad is not None:
                np.add.at(grad, (self.frame, self.vert), 2.0 * self.weight[:, None] * d)
            return float(self.weight @ (d * d).sum(axis=1))
        r = np.sqrt((d * d).sum(axis=1))
        if grad is not None:
            u = np.divide(d, r[:, None], out=np.zeros_like(d), where=r[:, None] > 0)
            np.add.at(grad, (self.frame, self.vert), self.weight[:, None] * u)
        return float(self.weight @ r)


@dataclass
class HingeTerm:
    """Sum of weight * max(0, -(v - q) . n)^2 (penetration below a scene vertex)."""

    frame: np.ndarray
    vert: np.ndarray
    anchor: np.ndarray
    normal: np.ndarray
    weight: np.ndarray

    def value(self, verts, grad=None) -> float:
        if len(self.frame) == 0:
            return 0.0
        eta = np.einsum("ij,ij->i", verts[self.frame, self.vert] - self.anchor, self.normal)
        pen = np.maximum(0.0, -eta)
        if grad is not None:
            np.add.at(grad, (self.frame, self.vert), (-2.0 * self.weight * pen)[:, None] * self.normal)
        return float(self.weight @ (pen * pen))


@dataclass
class StabilityRecord:
    stable: np.ndarray  # (N, 4) bool in LIMB_GROUPS order
    movement: np.ndarray  # (N, 4); row 0 is NaN
    environment: dict  # (frame, limb) -> sorted scene-vertex ids within r_contact

    def is_stable(self, k: int, limb: str) -> bool:
        return bool(self.stable[k, LIMB_GROUPS.index(limb)])

    def to_dict(self) -> dict:
        return {
            "stable": self.stable.astype(int).tolist(),
            "environment": {f"{k}:{limb}": v.tolist() for (k, limb), v in sorted(self.environment.items())},
        }


@dataclass
class Gates:
    n_frames: int
    stability: StabilityRecord
    pairs: dict  # term -> PairTerm
    st: HingeTerm | None
    lidar_steps: np.ndarray  # (N-1,)
    sds_gate: np.ndarray  # (N-2,) bool, triple centred on frame j+1
    visible: list | None
    icp_residuals: np.ndarray | None

    def snapshot(self) -> dict:
        d = {
            "n_frames": self.n_frames,
            "stability": self.stability.to_dict(),
            "pair_counts": {k: int(len(v.frame)) for k, v in sorted(self.pairs.items())},
            "sds_active": int(self.sds_gate.sum()),
        }
        if self.visible is not None:
            d["visible_counts"] = [int(len(v)) for v in self.visible]
        if self.icp_residuals is not None:
            d["icp_residuals"] = [float(r) for r in self.icp_residuals]
        return d


# ----------------------------------------------------------------------------------
# scene context


class SceneContext:
    """Scene mesh plus a nearest-vertex index, built once per refinement."""

    def __init__(self, scene: SceneMesh):
        self.scene = scene
        self.index = NeighborIndex(scene.vertices)

    @staticmethod
    def of(scene) -> "SceneContext":
        return scene if isinstance(scene, SceneContext) else SceneContext(scene)


# ----------------------------------------------------------------------------------
# stability


def stability_from_vertices(template: BodyTemplate, verts: np.ndarray, scene, config: LossConfig | None = None) -> StabilityRecord:
    cfg = config or LossConfig()
    ctx = SceneContext.of(scene)
    n = verts.shape[0]
    if n < 2:
        raise ValidationError("stability detection needs at least 2 frames")
    mv = np.full((n, 4), np.nan)
    for i, limb in enumerate(LIMB_GROUPS):
        g = verts[:, template.groups[limb]]
        mv[1:, i] = np.linalg.norm(g[1:] - g[:-1], axis=2).mean(axis=1)
    stable = np.zeros((n, 4), dtype=bool)
    env = {}
    for i, limb in enumerate(LIMB_GROUPS):
        s = LIMB_GROUPS.index(SIBLING[limb])
        stable[1:, i] = (mv[1:, i] < cfg.stable_threshold) & (mv[1:, i] < mv[1:, s])
    for k, i in zip(*np.nonzero(stable)):
        limb = LIMB_GROUPS[i]
        centroid = verts[k, template.groups[limb]].mean(axis=0)
        near = ctx.index.within(centroid, cfg.r_contact)
        if len(near) == 0:
            # nothing to stand on: the limb is not in contact
            stable[k, i] = False
        else:
            env[(int(k), limb)] = near
    return StabilityRecord(stable, mv, env)


def detect_stable_limbs(template: BodyTemplate, motion: MotionSequence, scene, config: LossConfig | None = None) -> StabilityRecord:
    if len(motion) < 2:
        raise ValidationError("stability detection needs at least 2 frames")
    verts, _ = skin_batch(template, motion.theta, motion.T, motion.beta)
    return stability_from_vertices(template, verts, scene, config)


# ----------------------------------------------------------------------------------
# per-frame pair builders (weights exclude the 1/l sequence factor)


def _nearest_targets(points_index: NeighborIndex, q):
    i, d2 = points_index.query(q)
    return points_index.points[i], d2


def _contact_pairs(template, verts, stability, ctx: SceneContext, k: int):
    parts = []
    for limb in LIMB_GROUPS:
        env = stability.environment.get((k, limb))
        if env is None or not stability.is_stable(k, limb):
            continue
        ids = template.groups[limb]
        env_pts = ctx.scene.vertices[env]
        d = verts[k, ids][:, None, :] - env_pts[None]
        nn = np.argmin((d * d).sum(axis=2), axis=1)
        parts.append((np.full(len(ids), k), ids, env_pts[nn], np.full(len(ids), 1.0 / len(ids))))
    return parts


def _gr_pairs(template, vk, vis, P_index, cfg: LossConfig, k: int):
    tgt, d2 = _nearest_targets(P_index, vk[vis])
    d = np.sqrt(d2)
    torso = np.isin(vis, template.groups[TORSO])
    limbs = np.isin(vis, template.groups[LIMBS])
    use_t = torso & (d <= cfg.d_torso)
    use_l = limbs & (d <= cfg.d_limb)
    count = int((use_t | use_l).sum())
    if count == 0:
        return None
    vi = np.concatenate([vis[use_t], vis[use_l]])
    tg = np.vstack([tgt[use_t], tgt[use_l]])
    wt = np.concatenate([np.full(use_t.sum(), cfg.w_torso), np.full(use_l.sum(), cfg.w_limb)]) / count
    return (np.full(len(vi), k), vi, tg, wt)


def part_weight_vector(template: BodyTemplate, part_weights: dict) -> np.ndarray:
    w = np.full(template.n_vertices, float(part_weights.get("OTHER", 1.0)))
    for name in (TORSO, LIMBS, END_EFFECTORS):
        if name in part_weights:
            w[template.groups[name]] = float(part_weights[name])
    return w


def _lwd_pairs(vk, vis, P_index, wvec, k):
    if len(vis) == 0:
        return None
    tgt, _ = _nearest_targets(P_index, vk[vis])
    return (np.full(len(vis), k), vis, tgt, wvec[vis] / len(vis))


def _vlr_pairs(template, vk, vis, P_index, k):
    ids = vis[np.isin(vis, template.groups[END_EFFECTORS])]
    if len(ids) == 0:
        return None
    tgt, _ = _nearest_targets(P_index, vk[ids])
    return (np.full(len(ids), k), ids, tgt, np.full(len(ids), 1.0 / len(ids)))


def _m2p_pairs(vk, vis, points, P_index, cfg: LossConfig, k: int):
    """Two-sided Chamfer pairs between visible vertices and the human points."""
    Vp = vk[vis]
    R, t, res = np.eye(3), np.zeros(3), 0.0
    if cfg.m2p_correspondence == "icp" and len(Vp) >= 3 and len(points) >= 3:
        r = icp(Vp, points, ICPConfig(max_iters=cfg.icp_max_iters), target_index=P_index)
        R, t, res = r.rotation, r.translation, r.residual
    moved = Vp @ R.T + t
    moved_index = NeighborIndex(moved)
    # point -> vertex
    vi_p, _ = moved_index.query(points)
    # vertex -> point
    pi_v, _ = P_index.query(moved)
    tg_p, tg_v = points, points[pi_v]
    if cfg.m2p_post_registration:
        # ||R v + t - p|| = ||v - R^T (p - t)||
        tg_p = (tg_p - t) @ R
        tg_v = (tg_v - t) @ R
    nP, nV = len(points), len(vis)
    part = (
        np.full(nP + nV, k),
        np.concatenate([vis[vi_p], vis]),
        np.vstack([tg_p, tg_v]),
        np.concatenate([np.full(nP, 1.0 / nP), np.full(nV, 1.0 / nV)]),
    )
    return part, res


def _st_pairs(vk, ctx: SceneContext, k: int):
    idx, _ = ctx.index.query(vk)
    V = len(vk)
    return (np.full(V, k), np.arange(V), ctx.scene.vertices[idx], ctx.scene.normals[idx], np.full(V, 1.0 / V))


def visible_vertices(verts_k: np.ndarray, viewpoint, gamma: float = 2.0) -> np.ndarray:
    vis = hpr(verts_k, viewpoint, gamma)
    if len(vis) == 0:
        raise ValidationError("no visible vertices (viewpoint inside the body?)")
    return vis


def _points(c):
    return np.asarray(getattr(c, "points", c), dtype=float).reshape(-1, 3)


# ----------------------------------------------------------------------------------
# temporal terms on features (T, stable joints, limb centroids)


def _trans_value(T, lidar_steps, n, gT=None):
    d = T[1:] - T[:-1]
    s = np.linalg.norm(d, axis=1)
    h = lidar_steps - s
    active = h > 0
    if gT is not None and active.any():
        u = np.divide(d, s[:, None], out=np.zeros_like(d), where=s[:, None] > 0)
        u = u * active[:, None] / n
        gT[1:] -= u
        gT[:-1] += u
    return float(h[active].sum() / n)


def _joints_value(Js, n, gJs=None):
    a = Js[2:] - 2.0 * Js[1:-1] + Js[:-2]  # (N-2, S, 3)
    r = np.linalg.norm(a, axis=2)
    S = Js.shape[1]
    if gJs is not None:
        u = np.divide(a, r[..., None], out=np.zeros_like(a), where=r[..., None] > 0) / (n * S)
        gJs[2:] += u
        gJs[1:-1] -= 2.0 * u
        gJs[:-2] += u
    return float(r.sum() / (n * S))


def _limb_centroids(template, verts):
    return np.stack([verts[:, template.groups[limb]].mean(axis=1) for limb in LIMB_GROUPS], axis=1)


def _sld_value(template, verts, stable, n, gV=None):
    both = stable[1:] & stable[:-1]  # (N-1, 4)
    if not both.any():
        return 0.0
    c = _limb_centroids(template, verts)
    d = c[1:] - c[:-1]
    r = np.linalg.norm(d, axis=2)
    total = float(r[both].sum() / n)
    if gV is not None:
        u = np.divide(d, r[..., None], out=np.zeros_like(d), where=r[..., None] > 0) * both[..., None] / n
        for i, limb in enumerate(LIMB_GROUPS):
            ids = template.groups[limb]
            ui = u[:, i] / len(ids)
            gV[1:, ids] += ui[:, None, :]
            gV[:-1, ids] -= ui[:, None, :]
    return total


def _unit(d):
    s = np.linalg.norm(d, axis=1)
    return np.divide(d, s[:, None], out=np.zeros_like(d), where=s[:, None] > 0), s


def _sds_value(T, gate, n, gT=None):
    if not gate.any():
        return 0.0
    d = T[1:] - T[:-1]
    u, s = _unit(d)
    dots = (u[1:] * u[:-1]).sum(axis=1)
    total = float((1.0 - dots)[gate].sum() / n)
    if gT is not None:
        # d(-u_a . u_b)/d d_a = -(I - u_a u_a^T) u_b / |d_a|
        ua, ub = u[:-1], u[1:]
        sa, sb = s[:-1], s[1:]
        g_a = -(ub - (ua * ub).sum(1, keepdims=True) * ua) / np.where(sa > 0, sa, 1.0)[:, None]
        g_b = -(ua - (ua * ub).sum(1, keepdims=True) * ub) / np.where(sb > 0, sb, 1.0)[:, None]
        g_a *= gate[:, None] / n
        g_b *= gate[:, None] / n
        gd = np.zeros_like(d)
        gd[:-1] += g_a
        gd[1:] += g_b
        gT[1:] += gd
        gT[:-1] -= gd
    return total


def sds_gate(T, eps_v):
    s = np.linalg.norm(np.asarray(T)[1:] - np.asarray(T)[:-1], axis=1)
    return (s[:-1] > eps_v) & (s[1:] > eps_v)


# ----------------------------------------------------------------------------------
# sequence problem, gate construction and frozen evaluation


@dataclass
class Problem:
    template: BodyTemplate
    scene: SceneMesh
    clouds: list | None = None  # per-frame human points (PointCloudFrame or arrays)
    lidar_trajectory: np.ndarray | None = None  # (N, 3) sensor positions, also the HPR viewpoint
    config: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        self.context = SceneContext.of(self.scene)
        self._cloud_pts = None if self.clouds is None else [_points(c) for c in self.clouds]
        self._cloud_idx = None if self._cloud_pts is None else [NeighborIndex(p) if len(p) else None for p in self._cloud_pts]
        if self.lidar_trajectory is not None:
            self.lidar_trajectory = np.asarray(self.lidar_trajectory, dtype=float).reshape(-1, 3)
        self.part_w = part_weight_vector(self.template, self.config.part_weights)

    def check(self, n: int, terms) -> None:
        if self.lidar_trajectory is not None and len(self.lidar_trajectory) != n:
            raise ValidationError(f"lidar trajectory has {len(self.lidar_trajectory)} rows for {n} frames")
        if self._cloud_pts is not None and len(self._cloud_pts) != n:
            raise ValidationError(f"{len(self._cloud_pts)} clouds for {n} frames")
        need_cloud = [t for t in terms if t in CLOUD_TERMS]
        if need_cloud and (self._cloud_pts is None or self.lidar_trajectory is None):
            raise MissingInputError(f"terms {need_cloud} need human point clouds and a LiDAR trajectory")
        if "trans" in terms and self.lidar_trajectory is None:
            raise MissingInputError("trans term needs the LiDAR trajectory")


def build_gates(problem: Problem, motion: MotionSequence, terms=ALL_TERMS, verts=None) -> Gates:
    """Freeze every gate of the active terms at ``motion``."""
    n = len(motion)
    problem.check(n, terms)
    cfg, tpl, ctx = problem.config, problem.template, problem.context
    if verts is None:
        verts, _ = skin_batch(tpl, motion.theta, motion.T, motion.beta)
    stability = stability_from_vertices(tpl, verts, ctx, cfg) if n >= 2 else StabilityRecord(
        np.zeros((n, 4), bool), np.full((n, 4), np.nan), {})
    parts = {t: [] for t in ("ct", "m2p", "gr", "lwd", "vlr")}
    st = None
    visible, icp_res = None, None
    if "ct" in terms:
        for k in range(n):
            parts["ct"] += _contact_pairs(tpl, verts, stability, ctx, k)
    if any(t in terms for t in CLOUD_TERMS):
        visible, icp_res = [], np.zeros(n)
        for k in range(n):
            vis = visible_vertices(verts[k], problem.lidar_trajectory[k], cfg.hpr_gamma)
            visible.append(vis)
            pts, pidx = problem._cloud_pts[k], problem._cloud_idx[k]
            if pidx is None:
                continue
            if "m2p" in terms:
                part, icp_res[k] = _m2p_pairs(verts[k], vis, pts, pidx, cfg, k)
                parts["m2p"].append(part)
            if "gr" in terms:
                parts["gr"].append(_gr_pairs(tpl, verts[k], vis, pidx, cfg, k))
            if "lwd" in terms:
                parts["lwd"].append(_lwd_pairs(verts[k], vis, pidx, problem.part_w, k))
            if "vlr" in terms:
                parts["vlr"].append(_vlr_pairs(tpl, verts[k], vis, pidx, k))
    if "st" in terms:
        cols = list(zip(*[_st_pairs(verts[k], ctx, k) for k in range(n)]))
        st = HingeTerm(*[np.concatenate(c) if c[0].ndim == 1 else np.vstack(c) for c in cols])
    pairs = {}
    for t, p in parts.items():
        pt = PairTerm.concat(p, squared=(t != "ct"))
        pt.weight = pt.weight / n
        pairs[t] = pt
    if st is not None:
        st.weight = st.weight / n
    if problem.lidar_trajectory is not None:
        lidar_steps = np.linalg.norm(np.diff(problem.lidar_trajectory, axis=0), axis=1)
    else:
        lidar_steps = np.zeros(max(n - 1, 0))
    gate = sds_gate(motion.T, cfg.eps_v) if n >= 3 else np.zeros(0, bool)
    return Gates(n, stability, pairs, st, lidar_steps, gate, visible, icp_res)


def evaluate_terms(problem: Problem, gates: Gates, verts, joints, T, terms, grad_weights=None):
    """Frozen-gate values of ``terms``.

    With ``grad_weights`` (term -> multiplier) also returns the weighted gradient
    w.r.t. (verts, joints, T).
    """
    n = gates.n_frames
    tpl = problem.template
    want = grad_weights is not None
    gV = np.zeros_like(verts) if want else None
    gJ = np.zeros_like(joints) if want else None
    gT = np.zeros_like(T) if want else None
    vals = {}
    for t in terms:
        lv, lj, lt = (np.zeros_like(verts), np.zeros_like(joints), np.zeros_like(T)) if want else (None, None, None)
        if t in gates.pairs:
            v = gates.pairs[t].value(verts, lv)
        elif t == "st":
            v = gates.st.value(verts, lv) if gates.st is not None else 0.0
        elif t == "sld":
            v = _sld_value(tpl, verts, gates.stability.stable, n, lv) if n >= 2 else 0.0
        elif t == "trans":
            v = _trans_value(T, gates.lidar_steps, n, lt) if n >= 2 else 0.0
        elif t == "joints":
            v = 0.0
            if n >= 3:
                sj = tpl.groups[STABLE_JOINTS]
                gs = np.zeros((n, len(sj), 3)) if want else None
                v = _joints_value(joints[:, sj], n, gs)
                if want:
                    lj[:, sj] += gs
        elif t == "sds":
            v = _sds_value(T, gates.sds_gate, n, lt) if n >= 3 else 0.0
        else:
            raise ValidationError(f"unknown loss term {t!r}")
        vals[t] = v
        if want:
            lam = grad_weights.get(t, 0.0)
            gV += lam * lv
            gJ += lam * lj
            gT += lam * lt
    return (vals, (gV, gJ, gT)) if want else vals


def stage_terms(stage) -> tuple:
    return STAGE_TERMS[Stage(stage)]


def weighted_total(values: dict, weights: LossWeights) -> tuple[float, dict]:
    breakdown = {t: getattr(weights, t) * v for t, v in values.items()}
    total = 0.0
    for t in sorted(breakdown):
        total += breakdown[t]
    return total, breakdown


class FrozenObjective:
    """Weighted objective of one stage with gates frozen at construction."""

    def __init__(self, problem: Problem, motion: MotionSequence, stage, weights: LossWeights, gates: Gates | None = None):
        self.problem, self.weights = problem, weights
        self.terms = tuple(t for t in stage_terms(stage) if getattr(weights, t) > 0)
        self.motion = motion
        self.gates = gates or build_gates(problem, motion, self.terms)

    def _unpack(self, x):
        n = len(self.motion)
        x = np.asarray(x, dtype=float).reshape(n, 75)
        return x[:, 3:].reshape(n, 24, 3), x[:, :3]

    def terms_at(self, x) -> dict:
        theta, T = self._unpack(x)
        verts, joints = skin_batch(self.problem.template, theta, T, self.motion.beta)
        return evaluate_terms(self.problem, self.gates, verts, joints, T, self.terms)

    def __call__(self, x) -> float:
        return weighted_total(self.terms_at(x), self.weights)[0]

    def value_and_grad(self, x):
        theta, T = self._unpack(x)
        tpl = self.problem.template
        verts, joints = skin_batch(tpl, theta, T, self.motion.beta)
        lam = {t: getattr(self.weights, t) for t in self.terms}
        vals, (gV, gJ, gT) = evaluate_terms(self.problem, self.gates, verts, joints, T, self.terms, lam)
        g_theta, g_T = skin_vjp(tpl, theta, T, self.motion.beta, gV, gJ, gT)
        grad = np.concatenate([g_T, g_theta.reshape(len(T), -1)], axis=1).ravel()
        total, breakdown = weighted_total(vals, self.weights)
        return total, breakdown, grad


# ----------------------------------------------------------------------------------
# standalone operations


def total_loss(stage, weights: LossWeights, template: BodyTemplate, motion: MotionSequence, scene: SceneMesh,
               clouds=None, lidar_trajectory=None, config: LossConfig | None = None) -> tuple[float, dict]:
    """Weighted stage objective at ``motion`` with freshly computed gates.

    Returns the total and a per-term breakdown of weighted values that sums to it.
    """
    problem = Problem(template, scene, clouds, lidar_trajectory, config or LossConfig())
    terms = tuple(t for t in stage_terms(stage) if getattr(weights, t) > 0)
    gates = build_gates(problem, motion, terms)
    verts, joints = skin_batch(template, motion.theta, motion.T, motion.beta)
    vals = evaluate_terms(problem, gates, verts, joints, motion.T, terms)
    total, breakdown = weighted_total(vals, weights)
    for t in stage_terms(stage):
        breakdown.setdefault(t, 0.0)
    return total, breakdown


def contact_loss(template, motion, scene, stability: StabilityRecord) -> float:
    n = len(motion)
    if stability.stable.shape[0] != n:
        raise ValidationError("stability record length does not match the motion")
    ctx = SceneContext.of(scene)
    verts, _ = skin_batch(template, motion.theta, motion.T, motion.beta)
    total = 0.0
    for k in range(n):
        for part in _contact_pairs(template, verts, stability, ctx, k):
            pt = PairTerm(*part, squared=False)
            total += pt.value(verts)
    return total / n


def sliding_loss(template, motion, stability: StabilityRecord) -> float:
    if len(motion) < 2:
        raise ValidationError("sliding loss needs at least 2 frames")
    verts, _ = skin_batch(template, motion.theta, motion.T, motion.beta)
    return _sld_value(template, verts, stability.stable, len(motion))


def trans_smooth_loss(motion, lidar_trajectory) -> float:
    L = np.asarray(lidar_trajectory, dtype=float).reshape(-1, 3)
    if len(L) != len(motion):
        raise ValidationError(f"lidar trajectory has {len(L)} rows for {len(motion)} frames")
    steps = np.linalg.norm(np.diff(L, axis=0), axis=1)
    return _trans_value(motion.T, steps, len(motion))


def joint_smooth_loss(template, motion) -> float:
    if len(motion) < 3:
        raise ValidationError("joint smoothness needs at least 3 frames")
    _, joints = skin_batch(template, motion.theta, motion.T, motion.beta)
    return _joints_value(joints[:, template.groups[STABLE_JOINTS]], len(motion))


def _frame_verts(template, motion, k):
    if not 0 <= k < len(motion):
        raise IndexError(f"frame {k} out of range")
    v, _ = skin_batch(template, motion.theta[k : k + 1], motion.T[k : k + 1], motion.beta)
    return v


def _require_points(P):
    pts = _points(P)
    if len(pts) == 0:
        raise ValidationError("human point cloud is empty")
    return pts


def mesh2point_loss(template, motion, k: int, human_points, lidar_origin, config: LossConfig | None = None) -> float:
    """Two-sided normalised Chamfer between the visible vertices and the human points."""
    cfg = config or LossConfig()
    pts = _require_points(human_points)
    vk = _frame_verts(template, motion, k)[0]
    vis = visible_vertices(vk, lidar_origin, cfg.hpr_gamma)
    return chamfer(vk[vis], pts)


def _vis_or_all(vk, viewpoint, cfg):
    if viewpoint is None:
        return np.arange(len(vk))
    return visible_vertices(vk, viewpoint, cfg.hpr_gamma)


def global_refit_loss(template, motion, k: int, human_points, d_torso: float = 0.10, d_limb: float = 0.05,
                      w_torso: float = 1.0, w_limb: float = 2.0, viewpoint=None) -> float:
    cfg = LossConfig(d_torso=d_torso, d_limb=d_limb, w_torso=w_torso, w_limb=w_limb)
    pts = _require_points(human_points)
    v = _frame_verts(template, motion, k)
    vis = _vis_or_all(v[0], viewpoint, cfg)
    part = _gr_pairs(template, v[0], vis, NeighborIndex(pts), cfg, 0)
    return 0.0 if part is None else PairTerm(*part).value(v)


def scene_touch_loss(template, motion, k: int, scene) -> float:
    v = _frame_verts(template, motion, k)
    return HingeTerm(*_st_pairs(v[0], SceneContext.of(scene), 0)).value(v)


def lwd_loss(template, motion, k: int, human_points, part_weights: dict | None = None, viewpoint=None) -> float:
    cfg = LossConfig(part_weights=dict(part_weights) if part_weights is not None else _default_part_weights())
    pts = _require_points(human_points)
    v = _frame_verts(template, motion, k)
    vis = _vis_or_all(v[0], viewpoint, cfg)
    part = _lwd_pairs(v[0], vis, NeighborIndex(pts), part_weight_vector(template, cfg.part_weights), 0)
    return 0.0 if part is None else PairTerm(*part).value(v)


def sds_loss(template, motion, eps_v: float = 0.02) -> float:
    if len(motion) < 3:
        raise ValidationError("velocity-direction smoothness needs at least 3 frames")
    return _sds_value(motion.T, sds_gate(motion.T, eps_v), len(motion))


def vlr_loss(template, motion, k: int, human_points, viewpoint=None) -> float:
    pts = _require_points(human_points)
    v = _frame_verts(template, motion, k)
    vis = _vis_or_all(v[0], viewpoint, LossConfig())
    part = _vlr_pairs(template, v[0], vis, NeighborIndex(pts), 0)
    return 0.0 if part is None else PairTerm(*part).value(v)

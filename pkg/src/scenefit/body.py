"""Linear-blend-skinned articulated body with a 24-joint SMPL-topology kinematic tree.

Pose blend shapes are not modelled; posed vertices depend only on joint rotations,
root translation and the shape coefficients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import NUM_BETAS, NUM_JOINTS, MotionSequence, ValidationError, rodrigues

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)
PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21])

LEFT_FOOT, RIGHT_FOOT, LEFT_HAND, RIGHT_HAND = "LEFT_FOOT", "RIGHT_FOOT", "LEFT_HAND", "RIGHT_HAND"
TORSO, LIMBS, STABLE_JOINTS = "TORSO", "LIMBS", "STABLE_JOINTS"
END_EFFECTORS = "END_EFFECTORS"
LIMB_GROUPS = (LEFT_FOOT, RIGHT_FOOT, LEFT_HAND, RIGHT_HAND)
SIBLING = {LEFT_FOOT: RIGHT_FOOT, RIGHT_FOOT: LEFT_FOOT, LEFT_HAND: RIGHT_HAND, RIGHT_HAND: LEFT_HAND}

# x = right, y = forward, z = up; pelvis at the origin so root rotation pivots about it
REST_JOINTS = np.array([
    [0.0, 0.0, 0.0],
    [-0.09, 0.0, -0.07], [0.09, 0.0, -0.07],
    [0.0, 0.0, 0.10],
    [-0.09, 0.0, -0.48], [0.09, 0.0, -0.48],
    [0.0, 0.0, 0.22],
    [-0.09, 0.0, -0.88], [0.09, 0.0, -0.88],
    [0.0, 0.0, 0.34],
    [-0.09, 0.13, -0.88], [0.09, 0.13, -0.88],
    [0.0, 0.0, 0.50],
    [-0.07, 0.0, 0.45], [0.07, 0.0, 0.45],
    [0.0, 0.0, 0.66],
    [-0.18, 0.0, 0.45], [0.18, 0.0, 0.45],
    [-0.45, 0.0, 0.45], [0.45, 0.0, 0.45],
    [-0.70, 0.0, 0.45], [0.70, 0.0, 0.45],
    [-0.78, 0.0, 0.45], [0.78, 0.0, 0.45],
])

# (owner joint, child joint, radius across, radius depth, base ring count, base ring size, part)
_SEGMENTS = (
    (0, 3, 0.14, 0.09, 2, 12, "torso"),
    (3, 6, 0.14, 0.09, 2, 12, "torso"),
    (6, 9, 0.15, 0.10, 2, 12, "torso"),
    (9, 12, 0.15, 0.10, 2, 12, "torso"),
    (12, 15, 0.08, 0.09, 3, 10, "head"),
    (13, 16, 0.05, 0.05, 2, 8, "collar"),
    (14, 17, 0.05, 0.05, 2, 8, "collar"),
    (16, 18, 0.05, 0.05, 3, 8, "limb"),
    (17, 19, 0.05, 0.05, 3, 8, "limb"),
    (18, 20, 0.04, 0.04, 3, 8, "limb"),
    (19, 21, 0.04, 0.04, 3, 8, "limb"),
    (20, 22, 0.035, 0.035, 2, 12, LEFT_HAND),
    (21, 23, 0.035, 0.035, 2, 12, RIGHT_HAND),
    (1, 4, 0.07, 0.07, 3, 10, "limb"),
    (2, 5, 0.07, 0.07, 3, 10, "limb"),
    (4, 7, 0.05, 0.05, 3, 8, "limb"),
    (5, 8, 0.05, 0.05, 3, 8, "limb"),
    (7, 10, 0.04, 0.04, 2, 12, LEFT_FOOT),
    (8, 11, 0.04, 0.04, 2, 12, RIGHT_FOOT),
)
PAD_RING = 12
PAD_INNER = 6
STABLE_JOINT_IDS = np.array([0, 3, 6, 9, 12, 13, 14])


def _cross_section_basis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if abs(axis[2]) > 0.9:
        b1 = np.array([1.0, 0.0, 0.0])
    else:
        b1 = np.cross(np.array([0.0, 0.0, 1.0]), axis)
    b1 = b1 - axis * (b1 @ axis)
    b1 /= np.linalg.norm(b1)
    return b1, np.cross(axis, b1)


def _ring(n: int, rx: float, ry: float, b1, b2) -> np.ndarray:
    phi = 2.0 * np.pi * np.arange(n) / n
    return rx * np.cos(phi)[:, None] * b1 + ry * np.sin(phi)[:, None] * b2


def pad_pattern(limb: str) -> np.ndarray:
    """Rest-pose contact-pad vertex offsets relative to the limb's end joint.

    Ordered as in the template group: outer ring, inner ring, center.
    """
    seg = next(s for s in _SEGMENTS if s[6] == limb)
    p, c, rx, ry = seg[0], seg[1], seg[2], seg[3]
    axis = REST_JOINTS[c] - REST_JOINTS[p]
    axis = axis / np.linalg.norm(axis)
    b1, b2 = _cross_section_basis(axis)
    return np.concatenate([_ring(PAD_RING, rx, ry, b1, b2), _ring(PAD_INNER, rx / 2, ry / 2, b1, b2), np.zeros((1, 3))])


def pad_axis(limb: str) -> np.ndarray:
    """Rest-pose unit direction of the limb's end segment (pad normal points along it)."""
    seg = next(s for s in _SEGMENTS if s[6] == limb)
    a = REST_JOINTS[seg[1]] - REST_JOINTS[seg[0]]
    return a / np.linalg.norm(a)


@dataclass(frozen=True, eq=False)
class BodyTemplate:
    rest_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    parents: np.ndarray  # (24,)
    skin_weights: np.ndarray  # (V, 24)
    shape_basis: np.ndarray  # (V, 3, 10)
    joint_regressor: np.ndarray  # (24, V)
    groups: dict  # name -> index array (vertex ids; joint ids for STABLE_JOINTS)

    def __post_init__(self):
        for name in ("rest_vertices", "skin_weights", "shape_basis", "joint_regressor"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        f.setflags(write=False)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "parents", np.array(self.parents, dtype=np.int64))
        object.__setattr__(self, "groups", {k: np.array(v, dtype=np.int64) for k, v in self.groups.items()})
        self.validate()
        # sparse view of the skinning weights for fast blending
        k = int((self.skin_weights > 0).sum(axis=1).max())
        order = np.argsort(-self.skin_weights, axis=1, kind="stable")[:, :k]
        object.__setattr__(self, "_sparse_idx", order)
        object.__setattr__(self, "_sparse_w", np.take_along_axis(self.skin_weights, order, axis=1))

    @property
    def n_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    def validate(self) -> None:
        V = self.rest_vertices.shape[0]
        if self.rest_vertices.shape != (V, 3) or V == 0:
            raise ValidationError("rest_vertices must be (V, 3)")
        if self.parents.shape != (NUM_JOINTS,) or self.parents[0] != -1:
            raise ValidationError("joint 0 must be the root (parent -1) of a 24-joint tree")
        if np.any(self.parents[1:] < 0) or np.any(self.parents[1:] >= np.arange(1, NUM_JOINTS)):
            raise ValidationError("parents must precede children")
        if self.skin_weights.shape != (V, NUM_JOINTS):
            raise ValidationError("skin_weights must be (V, 24)")
        if self.skin_weights.min() < 0 or np.abs(self.skin_weights.sum(1) - 1).max() > 1e-6:
            raise ValidationError("skin_weights rows must be nonnegative and sum to 1")
        if self.shape_basis.shape != (V, 3, NUM_BETAS):
            raise ValidationError("shape_basis must be (V, 3, 10)")
        if self.joint_regressor.shape != (NUM_JOINTS, V):
            raise ValidationError("joint_regressor must be (24, V)")
        if np.abs(self.joint_regressor.sum(1) - 1).max() > 1e-6:
            raise ValidationError("joint_regressor rows must sum to 1")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise ValidationError("face index out of range")
        for name in LIMB_GROUPS + (TORSO, LIMBS):
            if name not in self.groups:
                raise ValidationError(f"missing vertex group {name}")
            g = self.groups[name]
            if g.size and (g.min() < 0 or g.max() >= V):
                raise ValidationError(f"group {name} has out-of-range vertex index")
        feet = np.union1d(self.groups[LEFT_FOOT], self.groups[RIGHT_FOOT])
        hands = np.union1d(self.groups[LEFT_HAND], self.groups[RIGHT_HAND])
        if np.intersect1d(feet, hands).size:
            raise ValidationError("feet and hand groups overlap")
        sj = self.groups.get(STABLE_JOINTS)
        if sj is None or not np.isin(sj, STABLE_JOINT_IDS).all():
            raise ValidationError("STABLE_JOINTS must be torso/neck joints")

    def shaped_rest(self, beta) -> np.ndarray:
        return self.rest_vertices + self.shape_basis @ np.asarray(beta, dtype=float)

    def rest_joints(self, beta=None) -> np.ndarray:
        v = self.rest_vertices if beta is None else self.shaped_rest(beta)
        return self.joint_regressor @ v

    def to_dict(self) -> dict:
        return {
            "rest_vertices": self.rest_vertices.tolist(),
            "faces": self.faces.tolist(),
            "parents": self.parents.tolist(),
            "skin_weights": self.skin_weights.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "joint_regressor": self.joint_regressor.tolist(),
            "groups": {k: v.tolist() for k, v in sorted(self.groups.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodyTemplate":
        from .io import ParseError

        try:
            return cls(**{k: d[k] for k in ("rest_vertices", "faces", "parents", "skin_weights",
                                            "shape_basis", "joint_regressor", "groups")})
        except KeyError as e:
            raise ParseError("missing required field", field=str(e.args[0])) from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "BodyTemplate":
        from .io import load_json

        return cls.from_dict(load_json(path))


@dataclass(frozen=True)
class PosedBody:
    vertices: np.ndarray
    joints: np.ndarray
    frame_index: int


def make_synthetic_template(n_vertices: int = 400, seed: int = 0) -> BodyTemplate:
    """Capsule-limbed stand-in body with the SMPL joint topology.

    Each bone is a tube of elliptical rings rigidly attached to its owning joint; the
    first ring of a tube is blended half-and-half with the parent bone. Hands and feet
    end in flat contact pads. The vertex count lands close to (and never above)
    ``n_vertices``. ``seed`` only drives the shape basis.
    """
    if n_vertices < 200:
        raise ValidationError(f"n_vertices={n_vertices} too small to populate all groups (need >= 200)")

    def build(scale: float):
        verts, weights, faces, owner_tags = [], [], [], []
        start_rings: dict[int, list[int]] = {}
        end_rings: dict[int, list[int]] = {}
        seg_ids: list[int] = []
        for si, (p, c, rx, ry, base_rings, base_n, part) in enumerate(_SEGMENTS):
            is_pad = part in LIMB_GROUPS
            if is_pad:
                n_around, n_rings = PAD_RING, max(1, int(round(base_rings * scale)))
            else:
                n_around = max(4, 2 * int(round(base_n * np.sqrt(scale) / 2)))
                n_rings = max(2, int(round(base_rings * scale)))
            a, b = REST_JOINTS[p], REST_JOINTS[c]
            axis = (b - a) / np.linalg.norm(b - a)
            b1, b2 = _cross_section_basis(axis)
            ring_off = _ring(n_around, rx, ry, b1, b2)
            parent_joint = PARENTS[p]
            ring_starts = []
            for r in range(n_rings):
                s = 1.0 if n_rings == 1 else r / (n_rings - 1)
                start = len(verts)
                ring_starts.append(start)
                center = a + s * (b - a)
                blend = r == 0 and n_rings > 1 and parent_joint >= 0 and not is_pad
                for off in ring_off:
                    verts.append(center + off)
                    w = np.zeros(NUM_JOINTS)
                    if blend:
                        w[p] = 0.5
                        w[parent_joint] += 0.5
                    else:
                        w[p] = 1.0
                    weights.append(w)
                    owner_tags.append(part)
                    seg_ids.append(si)
            for r in range(n_rings - 1):
                s0, s1 = ring_starts[r], ring_starts[r + 1]
                for k in range(n_around):
                    k1 = (k + 1) % n_around
                    faces.append((s0 + k, s0 + k1, s1 + k1))
                    faces.append((s0 + k, s1 + k1, s1 + k))
            if n_rings > 1:
                start_rings[p] = list(range(ring_starts[0], ring_starts[0] + n_around))
            end_ring = list(range(ring_starts[-1], ring_starts[-1] + n_around))
            end_rings.setdefault(c, end_ring)
            if is_pad:
                pad = pad_pattern(part)
                inner_start = len(verts)
                for off in pad[PAD_RING:]:
                    verts.append(b + off)
                    w = np.zeros(NUM_JOINTS)
                    w[p] = 1.0
                    weights.append(w)
                    owner_tags.append(part)
                    seg_ids.append(si)
                center = inner_start + PAD_INNER
                for k in range(PAD_INNER):
                    faces.append((center, inner_start + (k + 1) % PAD_INNER, inner_start + k))
                # stitch inner ring (6) to the outer end ring (12)
                outer = end_ring
                for k in range(PAD_INNER):
                    i0, i1 = inner_start + k, inner_start + (k + 1) % PAD_INNER
                    o0, o1, o2 = outer[2 * k], outer[2 * k + 1], outer[(2 * k + 2) % PAD_RING]
                    faces.append((i0, o1, o0))
                    faces.append((i0, i1, o1))
                    faces.append((i1, o2, o1))
        # every joint is regressed from a ring centered on it
        reg_rings = {j: start_rings.get(j, end_rings.get(j)) for j in range(NUM_JOINTS)}
        return verts, weights, faces, owner_tags, reg_rings, seg_ids

    # largest scale whose vertex count stays within budget
    lo, hi = 0.05, 20.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if len(build(mid)[0]) <= n_vertices:
            lo = mid
        else:
            hi = mid
    verts, weights, faces, tags, reg_rings, seg_ids = build(lo)
    if len(verts) > n_vertices:
        raise ValidationError(f"n_vertices={n_vertices} too small for the minimal template ({len(verts)})")
    V = len(verts)
    rest = np.array(verts)
    W = np.array(weights)
    tags = np.array(tags)
    seg_ids = np.array(seg_ids)

    regressor = np.zeros((NUM_JOINTS, V))
    for j, ring in reg_rings.items():
        regressor[j, ring] = 1.0 / len(ring)

    groups = {
        LEFT_HAND: _pad_indices(tags, LEFT_HAND),
        RIGHT_HAND: _pad_indices(tags, RIGHT_HAND),
        LEFT_FOOT: _pad_indices(tags, LEFT_FOOT),
        RIGHT_FOOT: _pad_indices(tags, RIGHT_FOOT),
        TORSO: np.flatnonzero(tags == "torso"),
        LIMBS: np.flatnonzero((tags == "limb") | np.isin(tags, LIMB_GROUPS)),
        END_EFFECTORS: np.flatnonzero(np.isin(tags, LIMB_GROUPS)),
        STABLE_JOINTS: STABLE_JOINT_IDS,
    }

    # shape basis: per-segment radial thickening plus a global scale component
    rng = np.random.default_rng(seed)
    coef = rng.normal(0.0, 0.15, size=(NUM_BETAS, len(_SEGMENTS)))
    basis = np.zeros((V, 3, NUM_BETAS))
    for si, (p, c, *_rest) in enumerate(_SEGMENTS):
        idx = np.flatnonzero(seg_ids == si)
        a, b = REST_JOINTS[p], REST_JOINTS[c]
        axis = (b - a) / np.linalg.norm(b - a)
        d = rest[idx] - a
        radial = d - (d @ axis)[:, None] * axis
        for i in range(1, NUM_BETAS):
            basis[idx, :, i] = coef[i, si] * radial
    basis[:, :, 0] = 0.05 * rest
    return BodyTemplate(rest, np.array(faces), PARENTS.copy(), W, basis, regressor, groups)


def _pad_indices(tags: np.ndarray, limb: str) -> np.ndarray:
    """Pad = last ring of the limb's end segment plus the inner pad ring and center."""
    idx = np.flatnonzero(tags == limb)
    n_tail = PAD_RING + PAD_INNER + 1
    # layout per end segment: rings..., last ring (PAD_RING), inner ring + center
    return idx[-n_tail:]


def forward_kinematics(template: BodyTemplate, theta: np.ndarray, T: np.ndarray, beta=None):
    """Batched FK. theta (n,24,3), T (n,3). Returns (global rotations (n,24,3,3),
    global joint positions (n,24,3), shaped rest vertices (V,3), rest joints (24,3))."""
    theta = np.asarray(theta, dtype=float)
    T = np.asarray(T, dtype=float)
    beta = np.zeros(NUM_BETAS) if beta is None else np.asarray(beta, dtype=float)
    v_shaped = template.shaped_rest(beta) if np.any(beta) else template.rest_vertices
    J = template.joint_regressor @ v_shaped
    R = rodrigues(theta)
    n = theta.shape[0]
    Grot = np.empty((n, NUM_JOINTS, 3, 3))
    Gpos = np.empty((n, NUM_JOINTS, 3))
    Grot[:, 0] = R[:, 0]
    Gpos[:, 0] = J[0] + T
    parents = template.parents
    for j in range(1, NUM_JOINTS):
        p = parents[j]
        Grot[:, j] = Grot[:, p] @ R[:, j]
        Gpos[:, j] = Gpos[:, p] + Grot[:, p] @ (J[j] - J[p])
    return Grot, Gpos, v_shaped, J


def skin_batch(template: BodyTemplate, theta: np.ndarray, T: np.ndarray, beta=None):
    """Posed vertices (n,V,3) and joints (n,24,3) for a batch of frames."""
    Grot, Gpos, v_shaped, J = forward_kinematics(template, theta, T, beta)
    # translation of the skinning transform: x -> Grot (x - J) + Gpos
    t = Gpos - np.einsum("njab,jb->nja", Grot, J)
    idx, w = template._sparse_idx, template._sparse_w
    Rb = (w[None, :, :, None, None] * Grot[:, idx]).sum(axis=2)
    tb = (w[None, :, :, None] * t[:, idx]).sum(axis=2)
    verts = (Rb @ v_shaped[None, :, :, None])[..., 0] + tb
    return verts, Gpos


def skin(template: BodyTemplate, motion: MotionSequence, k: int) -> PosedBody:
    if not 0 <= k < len(motion):
        raise IndexError(f"frame index {k} out of range for a {len(motion)}-frame motion")
    v, j = skin_batch(template, motion.theta[k : k + 1], motion.T[k : k + 1], motion.beta)
    return PosedBody(v[0], j[0], k)


def skin_sequence(template: BodyTemplate, motion: MotionSequence):
    """Vertices (N,V,3) and joints (N,24,3) for every frame."""
    return skin_batch(template, motion.theta, motion.T, motion.beta)


def movement(template: BodyTemplate, motion: MotionSequence, k: int, group: str) -> float:
    """Mean displacement (m) of a vertex group between frames k-1 and k."""
    if k < 1 or k >= len(motion):
        raise IndexError(f"movement needs 1 <= k < {len(motion)}, got {k}")
    idx = template.groups[group]
    v, _ = skin_batch(template, motion.theta[k - 1 : k + 1], motion.T[k - 1 : k + 1], motion.beta)
    return float(np.linalg.norm(v[1, idx] - v[0, idx], axis=1).mean())


def group_movements(template: BodyTemplate, verts: np.ndarray) -> dict:
    """Per-limb movement arrays of length N (entry 0 is NaN) from posed vertices (N,V,3)."""
    out = {}
    for name in LIMB_GROUPS:
        g = verts[:, template.groups[name]]
        m = np.full(verts.shape[0], np.nan)
        m[1:] = np.linalg.norm(g[1:] - g[:-1], axis=2).mean(axis=1)
        out[name] = m
    return out


def _left_jacobian(theta: np.ndarray) -> np.ndarray:
    """Left Jacobian of the rotation exponential for axis-angle vectors (...,3) -> (...,3,3)."""
    th = np.asarray(theta, dtype=float)
    a2 = (th * th).sum(axis=-1)
    a = np.sqrt(a2)
    small = a < 1e-4
    safe = np.where(small, 1.0, a)
    c1 = np.where(small, 0.5 - a2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    c2 = np.where(small, 1.0 / 6.0 - a2 / 120.0, (safe - np.sin(safe)) / (safe ** 3))
    K = np.zeros(th.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -th[..., 2], th[..., 1]
    K[..., 1, 0], K[..., 1, 2] = th[..., 2], -th[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -th[..., 1], th[..., 0]
    return np.eye(3) + c1[..., None, None] * K + c2[..., None, None] * (K @ K)


def skin_vjp(template: BodyTemplate, theta, T, beta, grad_verts, grad_joints=None, grad_T=None):
    """Pull gradients w.r.t. posed vertices (n,V,3), joints (n,24,3) and the raw root
    translation back to (theta (n,24,3), T (n,3)).

    A change of joint j's local rotation moves its whole subtree rigidly about the joint,
    so its gradient is the torque of the subtree's point gradients mapped through the
    exponential-map Jacobian.
    """
    theta = np.asarray(theta, dtype=float)
    Grot, Gpos, v_shaped, J = forward_kinematics(template, theta, T, beta)
    n = theta.shape[0]
    idx, w = template._sparse_idx, template._sparse_w
    t = Gpos - np.einsum("njab,jb->nja", Grot, J)
    # per-slot blended contributions w * (R_b v + t_b)
    P = w[None, :, :, None] * ((Grot[:, idx] @ v_shaped[None, :, None, :, None])[..., 0] + t[:, idx])
    gv = np.asarray(grad_verts, dtype=float)[:, :, None, :]
    # scatter per-slot sums onto their bones
    onehot_t = np.zeros((NUM_JOINTS, idx.size))
    onehot_t[idx.ravel(), np.arange(idx.size)] = 1.0
    C = onehot_t @ np.cross(P, gv).reshape(n, -1, 3)
    q = onehot_t @ (w[None, :, :, None] * gv).reshape(n, -1, 3)
    if grad_joints is not None:
        gj = np.asarray(grad_joints, dtype=float)
        C += np.cross(Gpos, gj)
        q += gj
    parents = template.parents
    for j in range(NUM_JOINTS - 1, 0, -1):
        C[:, parents[j]] += C[:, j]
        q[:, parents[j]] += q[:, j]
    tau = C - np.cross(Gpos, q)
    Rpar = np.empty_like(Grot)
    Rpar[:, 0] = np.eye(3)
    Rpar[:, 1:] = Grot[:, parents[1:]]
    local = np.einsum("njba,njb->nja", Rpar, tau)
    g_theta = np.einsum("njba,njb->nja", _left_jacobian(theta), local)
    g_T = q[:, 0].copy()
    if grad_T is not None:
        g_T += grad_T
    return g_theta, g_T

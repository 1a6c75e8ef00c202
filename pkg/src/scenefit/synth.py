"""Deterministic synthetic climbing data: wall scenes with holds, ground-truth motions,
simulated LiDAR sweeps and corrupted initialisations.

World axes: x lateral, z up, the wall surface passes through the origin line y = 0 at
ground level. The climber faces the wall from the -y side.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import Delaunay

from .body import (
    LEFT_FOOT,
    LEFT_HAND,
    LIMB_GROUPS,
    RIGHT_FOOT,
    RIGHT_HAND,
    BodyTemplate,
    pad_axis,
    pad_pattern,
    skin_batch,
)
from .core import (
    CloudLabel,
    CoordinateFrame,
    MotionSequence,
    PointCloudFrame,
    SceneMesh,
    ValidationError,
    log_rotation,
    rodrigues,
)
from .geometry import convex_hull_3d, hpr


class WallType(str, Enum):
    VERTICAL = "VERTICAL"
    HORIZONTAL = "HORIZONTAL"  # lateral traverse on an upright wall
    OVERHANG = "OVERHANG"


# limb -> (upper joint, middle joint, end joint, contact joint)
LIMB_CHAINS = {
    LEFT_HAND: (16, 18, 20, 22),
    RIGHT_HAND: (17, 19, 21, 23),
    LEFT_FOOT: (1, 4, 7, 10),
    RIGHT_FOOT: (2, 5, 8, 11),
}
# reach windows inside each motion cycle (start frame offset)
REACH_OFFSET = {LEFT_HAND: 0, RIGHT_HAND: 25, LEFT_FOOT: 50, RIGHT_FOOT: 75}


def _default_hold_offsets():
    # (lateral, along-wall up) of each limb's hold relative to the root path
    return {LEFT_HAND: [-0.30, 0.55], RIGHT_HAND: [0.30, 0.55], LEFT_FOOT: [-0.20, -0.57], RIGHT_FOOT: [0.20, -0.57]}


@dataclass
class SynthConfig:
    seed: int = 0
    wall: str = "VERTICAL"
    wall_width: float = 4.0
    wall_height: float = 3.0
    ground_depth: float = 4.0
    overhang_deg: float = 15.0
    grid_step: float = 0.25
    n_frames: int = 200
    frame_rate: float = 30.0
    cycle: int = 100  # frames per full four-limb climbing cycle
    reach_frames: int = 20
    cycle_advance: float = 0.4  # m the root travels per cycle
    reach_lift: float = 0.08  # m the moving limb clears the wall mid-reach
    root_offset: float = 0.35  # m from the wall surface to the pelvis
    start: list = field(default_factory=lambda: [0.0, 1.1])  # (lateral, up) of the pelvis at frame 0
    hold_offsets: dict = field(default_factory=_default_hold_offsets)
    hold_size: float = 0.14
    hold_depth: float = 0.05
    sensor_distance: float = 3.5
    sensor_height: float = 0.3  # m above the pelvis at mid-route
    lidar_sigma: float = 0.005
    pose_sigma: float = 0.0
    drift: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    points_per_frame: int = 256

    def __post_init__(self):
        WallType(self.wall)
        if self.n_frames < 4:
            raise ValidationError("n_frames must be >= 4")
        if self.reach_frames < 2 or self.reach_frames * 4 > self.cycle:
            raise ValidationError("reach windows must fit in the cycle")
        if self.lidar_sigma < 0 or self.pose_sigma < 0:
            raise ValidationError("noise levels must be >= 0")
        if len(self.drift) != 3 or len(self.start) != 2:
            raise ValidationError("drift must be a 3-vector and start a 2-vector")
        for limb in LIMB_GROUPS:
            if limb not in self.hold_offsets:
                raise ValidationError(f"hold_offsets missing {limb}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------------------
# wall frame


@dataclass(frozen=True)
class WallFrame:
    lateral: np.ndarray  # unit, along the wall
    up: np.ndarray  # unit, up along the wall surface
    into: np.ndarray  # unit, from the climber into the wall

    @property
    def outward(self):
        return -self.into

    @property
    def rotation(self):
        # body x (right), y (forward), z (up) -> world
        return np.column_stack([self.lateral, self.into, self.up])

    def point(self, lat, up, depth=0.0):
        """World point at wall coordinates; depth > 0 is in front of the surface."""
        return lat * self.lateral + up * self.up - depth * self.into


def wall_frame(config: SynthConfig) -> WallFrame:
    if WallType(config.wall) == WallType.OVERHANG:
        a = np.deg2rad(config.overhang_deg)
        up = np.array([0.0, -np.sin(a), np.cos(a)])
        into = np.array([0.0, np.cos(a), np.sin(a)])
    else:
        up = np.array([0.0, 0.0, 1.0])
        into = np.array([0.0, 1.0, 0.0])
    return WallFrame(np.array([1.0, 0.0, 0.0]), up, into)


def _progress(config: SynthConfig) -> np.ndarray:
    """Unit (lateral, up) direction of travel."""
    return np.array([1.0, 0.0]) if WallType(config.wall) == WallType.HORIZONTAL else np.array([0.0, 1.0])


def root_path(config: SynthConfig) -> np.ndarray:
    """(N, 2) pelvis wall coordinates: constant velocity along the route."""
    t = np.arange(config.n_frames, dtype=float)
    speed = config.cycle_advance / config.cycle
    return np.asarray(config.start, dtype=float) + speed * t[:, None] * _progress(config)


# ----------------------------------------------------------------------------------
# holds


def limb_target_rotation(config: SynthConfig, limb: str) -> np.ndarray:
    """World rotation of a limb's end segment while it grips: the segment points into the wall."""
    ax = pad_axis(limb)
    # rotate about body up so the rest end-segment direction becomes body forward
    ang = np.arctan2(ax[0], ax[1])
    c, s = np.cos(ang), np.sin(ang)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return wall_frame(config).rotation @ Rz


@dataclass(frozen=True)
class Hold:
    limb: str
    index: int  # -1 is the starting hold
    center: np.ndarray  # world position of the contact joint on the hold face
    lat: float
    up: float


def hold_layout(config: SynthConfig) -> list:
    """Holds per limb in reach order; hold k is grabbed at the k-th reach of that limb."""
    speed = config.cycle_advance / config.cycle
    fr = wall_frame(config)
    prog = _progress(config)
    holds = []
    for limb in LIMB_GROUPS:
        off = np.asarray(config.hold_offsets[limb], dtype=float)
        r0 = REACH_OFFSET[limb]
        k = -1
        while r0 + config.cycle * k < config.n_frames:
            # centre the hold on the pelvis position halfway through the following stance
            mid = r0 + config.cycle * k + config.reach_frames + (config.cycle - config.reach_frames) / 2.0
            lat, up = np.asarray(config.start, dtype=float) + speed * mid * prog + off
            centre = fr.point(lat, up, config.hold_depth)
            holds.append(Hold(limb, k, centre, float(lat), float(up)))
            k += 1
    half = config.hold_size / 2
    for h in holds:
        if not (-config.wall_width / 2 + half <= h.lat <= config.wall_width / 2 - half
                and half <= h.up <= config.wall_height - half):
            raise ValidationError(f"unreachable hold layout: {h.limb} hold {h.index} at ({h.lat:.2f}, {h.up:.2f}) is off the wall")
    return holds


# ----------------------------------------------------------------------------------
# scene


def _grid(origin, ax_u, ax_v, len_u, len_v, step):
    nu = max(1, int(np.ceil(len_u / step - 1e-9)))
    nv = max(1, int(np.ceil(len_v / step - 1e-9)))
    us = np.linspace(0.0, len_u, nu + 1)
    vs = np.linspace(0.0, len_v, nv + 1)
    pts = origin + us[:, None, None] * ax_u + vs[None, :, None] * ax_v
    pts = pts.reshape(-1, 3)
    faces = []
    for i in range(nu):
        for j in range(nv):
            a = i * (nv + 1) + j
            b, c, d = a + (nv + 1), a + (nv + 1) + 1, a + 1
            faces += [(a, b, c), (a, c, d)]
    return pts, np.array(faces)


def _orient(pts, faces, normal):
    a, b, c = pts[faces[:, 0]], pts[faces[:, 1]], pts[faces[:, 2]]
    flip = np.cross(b - a, c - a) @ normal < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _hold_box(config: SynthConfig, hold: Hold):
    """Front face (pad pattern embedded) then side faces; each face has its own vertices."""
    fr = wall_frame(config)
    R = limb_target_rotation(config, hold.limb)
    pad = hold.center + pad_pattern(hold.limb) @ R.T
    half = config.hold_size / 2
    lat, up = fr.lateral, fr.up
    corners2 = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    mids2 = np.array([[0, -half], [half, 0], [0, half], [-half, 0]])
    rim2 = np.vstack([corners2, mids2])
    front = np.vstack([pad, hold.center + rim2[:, :1] * lat + rim2[:, 1:] * up])
    uv = np.column_stack([(front - hold.center) @ lat, (front - hold.center) @ up])
    tri = Delaunay(uv).simplices
    verts = [front]
    normals = [np.tile(fr.outward, (len(front), 1))]
    faces = [_orient(front, tri, fr.outward)]
    base = len(front)
    back_c = hold.center + config.hold_depth * fr.into
    ring = [hold.center + c[0] * lat + c[1] * up for c in corners2]
    ring_b = [back_c + c[0] * lat + c[1] * up for c in corners2]
    for i in range(4):
        j = (i + 1) % 4
        quad = np.array([ring[i], ring[j], ring_b[j], ring_b[i]])
        mid_edge = 0.5 * (ring[i] + ring[j])
        n = mid_edge - hold.center
        n = n - (n @ fr.into) * fr.into
        n /= np.linalg.norm(n)
        f = _orient(quad, np.array([[0, 1, 2], [0, 2, 3]]), n)
        verts.append(quad)
        normals.append(np.tile(n, (4, 1)))
        faces.append(f + base)
        base += 4
    return np.vstack(verts), np.vstack(faces), np.vstack(normals)


def generate_scene(config: SynthConfig) -> SceneMesh:
    """Wall and ground grids plus one protruding box per hold."""
    fr = wall_frame(config)
    parts = []
    for h in hold_layout(config):
        parts.append(_hold_box(config, h))
    wall_origin = -config.wall_width / 2 * fr.lateral
    wp, wf = _grid(wall_origin, fr.lateral, fr.up, config.wall_width, config.wall_height, config.grid_step)
    parts.append((wp, _orient(wp, wf, fr.outward), np.tile(fr.outward, (len(wp), 1))))
    g_origin = np.array([-config.wall_width / 2, -config.ground_depth, 0.0])
    gp, gf = _grid(g_origin, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), config.wall_width, config.ground_depth, config.grid_step)
    up = np.array([0.0, 0.0, 1.0])
    parts.append((gp, _orient(gp, gf, up), np.tile(up, (len(gp), 1))))
    verts, faces, normals, base = [], [], [], 0
    for v, f, n in parts:
        verts.append(v)
        faces.append(f + base)
        normals.append(n)
        base += len(v)
    return SceneMesh(np.vstack(verts), np.vstack(faces), np.vstack(normals))


# ----------------------------------------------------------------------------------
# ground-truth motion


def _min_rotation(a, b):
    """Smallest rotation taking unit vector a onto unit vector b."""
    v = np.cross(a, b)
    c = float(a @ b)
    s = np.linalg.norm(v)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: half turn about any axis orthogonal to a
        p = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(p) < 1e-6:
            p = np.cross(a, [0.0, 1.0, 0.0])
        p /= np.linalg.norm(p)
        return 2.0 * np.outer(p, p) - np.eye(3)
    return rodrigues(v / s * np.arctan2(s, c))


def _smoothstep(s):
    return s * s * (3.0 - 2.0 * s)


def _contact_track(config: SynthConfig, holds: list, limb: str) -> np.ndarray:
    """(N, 3) world position of the limb's contact joint."""
    fr = wall_frame(config)
    mine = sorted((h for h in holds if h.limb == limb), key=lambda h: h.index)
    by_index = {h.index: h for h in mine}
    r0 = REACH_OFFSET[limb]
    out = np.empty((config.n_frames, 3))
    for f in range(config.n_frames):
        k = int(np.floor((f - r0) / config.cycle))  # reach number whose window started last
        start = r0 + config.cycle * k
        s = (f - start) / config.reach_frames
        if s >= 1.0:
            out[f] = by_index[k].center
        else:
            a, b = by_index[k - 1].center, by_index[k].center
            out[f] = a + _smoothstep(s) * (b - a) - config.reach_lift * np.sin(np.pi * s) * fr.into
    return out


def _two_bone(S, W, a, b, pole):
    """Middle joint position for a two-bone chain S -> M -> W with bone lengths a, b."""
    d_vec = W - S
    d = np.linalg.norm(d_vec)
    if d > a + b - 1e-9 or d < abs(a - b) + 1e-9:
        raise ValidationError(f"unreachable hold layout: limb span {d:.3f} m outside [{abs(a - b):.3f}, {a + b:.3f}]")
    w = d_vec / d
    x = (a * a - b * b + d * d) / (2.0 * d)
    r = np.sqrt(max(a * a - x * x, 0.0))
    p = pole - (pole @ w) * w
    p /= np.linalg.norm(p)
    return S + x * w + r * p


def _limb_poles(fr: WallFrame):
    down, out = -fr.up, fr.outward
    return {
        LEFT_HAND: 0.8 * down + 0.6 * out,
        RIGHT_HAND: 0.8 * down + 0.6 * out,
        LEFT_FOOT: -0.9 * fr.lateral + 0.3 * out,
        RIGHT_FOOT: 0.9 * fr.lateral + 0.3 * out,
    }


def generate_motion(config: SynthConfig, template: BodyTemplate, scene: SceneMesh | None = None) -> MotionSequence:
    """Ground-truth climb: constant-velocity pelvis, limbs alternately reaching hold to hold.

    Gripping limbs sit exactly on their hold faces, so contact-style losses vanish.
    ``scene`` is accepted for interface symmetry; the holds are recomputed from the config.
    """
    del scene
    fr = wall_frame(config)
    holds = hold_layout(config)
    n = config.n_frames
    J = template.rest_joints()
    R_root = fr.rotation
    path = root_path(config)
    T = np.array([fr.point(lat, up, config.root_offset) for lat, up in path]) - J[0]
    theta = np.zeros((n, 24, 3))
    theta[:, 0] = log_rotation(R_root)
    poles = _limb_poles(fr)
    for limb in LIMB_GROUPS:
        up_j, mid_j, end_j, con_j = LIMB_CHAINS[limb]
        R_end = limb_target_rotation(config, limb)
        track = _contact_track(config, holds, limb)
        a = np.linalg.norm(J[mid_j] - J[up_j])
        b = np.linalg.norm(J[end_j] - J[mid_j])
        for f in range(n):
            # upper joint world position: the torso is rigid with the root
            S = T[f] + J[0] + R_root @ (J[up_j] - J[0])
            W = track[f] - R_end @ (J[con_j] - J[end_j])
            M = _two_bone(S, W, a, b, poles[limb])
            G_par = R_root  # parents of the chain are unrotated relative to the root
            rest_up = G_par @ (J[mid_j] - J[up_j])
            G_up = _min_rotation(rest_up / a, (M - S) / a) @ G_par
            rest_mid = G_up @ (J[end_j] - J[mid_j])
            G_mid = _min_rotation(rest_mid / b, (W - M) / b) @ G_up
            theta[f, up_j] = log_rotation(G_par.T @ G_up)
            theta[f, mid_j] = log_rotation(G_up.T @ G_mid)
            theta[f, end_j] = log_rotation(G_mid.T @ R_end)
    return MotionSequence(T, theta, np.zeros(10), config.frame_rate, CoordinateFrame.WORLD)


# ----------------------------------------------------------------------------------
# LiDAR and corruption


def sensor_position(config: SynthConfig) -> np.ndarray:
    """Static sensor behind the climber, facing the middle of the route."""
    lat, up = root_path(config)[config.n_frames // 2]
    fr = wall_frame(config)
    pelvis = fr.point(lat, up, config.root_offset)
    return pelvis + config.sensor_distance * fr.outward * np.array([1.0, 1.0, 0.0]) + [0.0, 0.0, config.sensor_height]


def lidar_trajectory(config: SynthConfig) -> np.ndarray:
    return np.tile(sensor_position(config), (config.n_frames, 1))


def simulate_lidar(template: BodyTemplate, motion: MotionSequence, scene, sensor_pose, config: SynthConfig) -> list:
    """Per-frame HUMAN clouds of HPR-visible vertices, subsampled and jittered."""
    del scene
    verts, _ = skin_batch(template, motion.theta, motion.T, motion.beta)
    n = len(motion)
    sp = np.asarray(sensor_pose, dtype=float)
    sp = np.tile(sp, (n, 1)) if sp.shape == (3,) else sp.reshape(n, 3)
    rng = np.random.default_rng([config.seed, 1])
    clouds = []
    for k in range(n):
        hull = convex_hull_3d(verts[k])
        if np.all(hull.normals @ sp[k] + hull.offsets <= 0):
            raise ValidationError(f"sensor inside the body hull at frame {k}")
        vis = hpr(verts[k], sp[k])
        if len(vis) > config.points_per_frame:
            vis = np.sort(rng.choice(vis, config.points_per_frame, replace=False))
        pts = verts[k, vis]
        if config.lidar_sigma > 0:
            pts = pts + rng.normal(0.0, config.lidar_sigma, pts.shape)
        clouds.append(PointCloudFrame(pts, k / motion.frame_rate, CoordinateFrame.WORLD, CloudLabel.HUMAN))
    return clouds


def corrupt(motion: MotionSequence, config: SynthConfig) -> MotionSequence:
    """Linear root drift (0 -> config.drift over the clip) plus axis-angle noise on joints 1..23."""
    n = len(motion)
    drift = np.asarray(config.drift, dtype=float)
    ramp = np.arange(n, dtype=float) / max(n - 1, 1)
    T = motion.T + ramp[:, None] * drift
    theta = motion.theta.copy()
    if config.pose_sigma > 0:
        rng = np.random.default_rng([config.seed, 2])
        theta[:, 1:] += rng.normal(0.0, config.pose_sigma, theta[:, 1:].shape)
    return motion.replace(T=T, theta=theta)


@dataclass
class SynthData:
    config: SynthConfig
    scene: SceneMesh
    motion: MotionSequence
    clouds: list
    lidar_trajectory: np.ndarray
    initial: MotionSequence


def generate(config: SynthConfig, template: BodyTemplate) -> SynthData:
    scene = generate_scene(config)
    gt = generate_motion(config, template, scene)
    traj = lidar_trajectory(config)
    clouds = simulate_lidar(template, gt, scene, traj, config)
    return SynthData(config, scene, gt, clouds, traj, corrupt(gt, config))


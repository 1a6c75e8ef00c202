"""Camera-space and world-space motion accuracy metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .body import BodyTemplate, skin_batch
from .core import MotionSequence, ValidationError
from .geometry import kabsch

SEGMENT_LENGTH = 100
PCK_THRESHOLD = 0.3  # m, on root-aligned joints
CONVENTIONS = {
    "mpjpe": "per-frame pelvis (joint 0) alignment",
    "pa_mpjpe": "per-frame similarity Procrustes",
    "pve": "raw, no alignment",
    "accel": "world joints, mean norm of second-difference error times fps^2",
    "jitter": "world joints of the prediction, mean norm of third difference times fps^3",
    "pck03": "fraction of root-aligned joints within 0.3 m",
    "wa_mpjpe": "rigid (no scale) alignment over each 100-frame segment",
    "w_mpjpe": "rigid (no scale) alignment fit on the first two frames of each segment",
    "rte": "rigid alignment of the whole root trajectory; mean error over gt path length, percent",
    "t_error": "mean root translation error after removing the first-frame offset",
}


def _check(pred, gt):
    p, g = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise ValidationError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def _rigid_apply(src, dst, with_scale=False, fit_on=None):
    """``src`` moved by the best rigid (or similarity) fit of ``fit_on`` (default all) onto ``dst``.

    Identical inputs are returned as-is: the identity is the exact optimum there.
    """
    s = src.reshape(-1, 3)
    d = dst.reshape(-1, 3)
    fs, fd = (s, d) if fit_on is None else (src[fit_on].reshape(-1, 3), dst[fit_on].reshape(-1, 3))
    if np.array_equal(fs, fd):
        return src
    fit = kabsch(fs, fd, with_scale=with_scale)
    return fit.apply(s).reshape(src.shape)


def _joint_err(p, g):
    return np.linalg.norm(p - g, axis=-1)


def joints_of(motion: MotionSequence, template: BodyTemplate):
    verts, joints = skin_batch(template, motion.theta, motion.T, motion.beta)
    return verts, joints


def mpjpe_joints(pj, gj) -> float:
    p, g = _check(pj, gj)
    return float(_joint_err(p - p[:, :1], g - g[:, :1]).mean() * 1000.0)


def pa_mpjpe_joints(pj, gj) -> float:
    p, g = _check(pj, gj)
    aligned = np.stack([_rigid_apply(p[k], g[k], with_scale=True) for k in range(len(p))])
    return float(_joint_err(aligned, g).mean() * 1000.0)


def pve_vertices(pv, gv) -> float:
    p, g = _check(pv, gv)
    return float(_joint_err(p, g).mean() * 1000.0)


def accel_error_joints(pj, gj, frame_rate: float) -> float:
    p, g = _check(pj, gj)
    if len(p) < 3:
        raise ValidationError("acceleration error needs at least 3 frames")
    ap = p[2:] - 2 * p[1:-1] + p[:-2]
    ag = g[2:] - 2 * g[1:-1] + g[:-2]
    return float(_joint_err(ap, ag).mean() * frame_rate ** 2)


def jitter_joints(pj, frame_rate: float) -> float:
    p = np.asarray(pj, dtype=float)
    if len(p) < 4:
        raise ValidationError("jitter needs at least 4 frames")
    j = p[3:] - 3 * p[2:-1] + 3 * p[1:-2] - p[:-3]
    return float(np.linalg.norm(j, axis=-1).mean() * frame_rate ** 3)


def pck_joints(pj, gj, threshold: float = PCK_THRESHOLD) -> float:
    p, g = _check(pj, gj)
    err = _joint_err(p - p[:, :1], g - g[:, :1])
    return float((err < threshold).mean())


def segments(n: int, length: int = SEGMENT_LENGTH) -> list:
    """Consecutive (start, stop) windows; the final partial window is kept."""
    return [(s, min(s + length, n)) for s in range(0, n, length)]


def world_mpjpe_segments(pj, gj, mode: str, length: int = SEGMENT_LENGTH) -> list:
    """Per-segment world MPJPE (mm); mode 'wa' aligns whole segments, 'w' the first two frames."""
    p, g = _check(pj, gj)
    out = []
    for a, b in segments(len(p), length):
        ps, gs = p[a:b], g[a:b]
        fit_on = None if mode == "wa" else slice(0, min(2, b - a))
        if mode not in ("wa", "w"):
            raise ValidationError(f"unknown world alignment mode {mode!r}")
        aligned = _rigid_apply(ps, gs, fit_on=fit_on)
        out.append(float(_joint_err(aligned, gs).mean() * 1000.0))
    return out


def wa_mpjpe_joints(pj, gj) -> float:
    return float(np.mean(world_mpjpe_segments(pj, gj, "wa")))


def w_mpjpe_joints(pj, gj) -> float:
    return float(np.mean(world_mpjpe_segments(pj, gj, "w")))


def rte(pred_T, gt_T) -> float:
    p, g = _check(pred_T, gt_T)
    if len(p) < 2:
        raise ValidationError("RTE needs at least 2 frames")
    path = np.linalg.norm(np.diff(g, axis=0), axis=1).sum()
    if path <= 0:
        raise ValidationError("RTE undefined: ground-truth path has zero length")
    if len(p) >= 3 and np.linalg.matrix_rank(g - g.mean(0), tol=1e-9) >= 2:
        aligned = _rigid_apply(p, g)
    else:
        # collinear trajectory: rotation is not identifiable, align the centroid only
        aligned = p - p.mean(0) + g.mean(0)
    return float(_joint_err(aligned, g).mean() / path * 100.0)


def t_error(pred_T, gt_T) -> float:
    p, g = _check(pred_T, gt_T)
    if len(p) < 2:
        raise ValidationError("T-Error needs at least 2 frames")
    return float(_joint_err(p - p[0], g - g[0]).mean())


# -- motion-level wrappers ------------------------------------------------------------


def _check_motions(pred: MotionSequence, gt: MotionSequence):
    if len(pred) != len(gt):
        raise ValidationError(f"prediction has {len(pred)} frames, ground truth {len(gt)}")


def mpjpe(pred, gt, template) -> float:
    _check_motions(pred, gt)
    return mpjpe_joints(joints_of(pred, template)[1], joints_of(gt, template)[1])


def pa_mpjpe(pred, gt, template) -> float:
    _check_motions(pred, gt)
    return pa_mpjpe_joints(joints_of(pred, template)[1], joints_of(gt, template)[1])


def pve(pred, gt, template) -> float:
    _check_motions(pred, gt)
    return pve_vertices(joints_of(pred, template)[0], joints_of(gt, template)[0])


def accel_error(pred, gt, template) -> float:
    _check_motions(pred, gt)
    return accel_error_joints(joints_of(pred, template)[1], joints_of(gt, template)[1], gt.frame_rate)


def jitter(pred, template) -> float:
    return jitter_joints(joints_of(pred, template)[1], pred.frame_rate)


def pck(pred, gt, template, threshold: float = PCK_THRESHOLD) -> float:
    _check_motions(pred, gt)
    return pck_joints(joints_of(pred, template)[1], joints_of(gt, template)[1], threshold)


def wa_mpjpe(pred, gt, template) -> float:
    _check_motions(pred, gt)
    return wa_mpjpe_joints(joints_of(pred, template)[1], joints_of(gt, template)[1])


def w_mpjpe(pred, gt, template) -> float:
    _check_motions(pred, gt)
    return w_mpjpe_joints(joints_of(pred, template)[1], joints_of(gt, template)[1])


@dataclass
class EvalResult:
    mpjpe: float
    pa_mpjpe: float
    pve: float
    accel: float
    pck03: float
    wa_mpjpe: float
    w_mpjpe: float
    rte: float
    jitter: float
    t_error: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(pred: MotionSequence, gt: MotionSequence, template: BodyTemplate,
             segment_length: int = SEGMENT_LENGTH, pck_threshold: float = PCK_THRESHOLD) -> tuple[EvalResult, dict]:
    """All metrics plus per-segment detail and the alignment conventions used."""
    _check_motions(pred, gt)
    pv, pj = joints_of(pred, template)
    gv, gj = joints_of(gt, template)
    fps = gt.frame_rate
    n = len(gt)
    wa_seg = world_mpjpe_segments(pj, gj, "wa", segment_length)
    w_seg = world_mpjpe_segments(pj, gj, "w", segment_length)
    try:
        rte_v = rte(pred.T, gt.T)
    except ValidationError:
        rte_v = float("nan")
    res = EvalResult(
        mpjpe=mpjpe_joints(pj, gj),
        pa_mpjpe=pa_mpjpe_joints(pj, gj),
        pve=pve_vertices(pv, gv),
        accel=accel_error_joints(pj, gj, fps) if n >= 3 else float("nan"),
        pck03=pck_joints(pj, gj, pck_threshold),
        wa_mpjpe=float(np.mean(wa_seg)),
        w_mpjpe=float(np.mean(w_seg)),
        rte=rte_v,
        jitter=jitter_joints(pj, fps) if n >= 4 else float("nan"),
        t_error=t_error(pred.T, gt.T),
    )
    detail = {
        "segments": [{"start": a, "stop": b, "wa_mpjpe": wa, "w_mpjpe": w}
                     for (a, b), wa, w in zip(segments(n, segment_length), wa_seg, w_seg)],
        "conventions": CONVENTIONS,
        "units": {"mpjpe": "mm", "pa_mpjpe": "mm", "pve": "mm", "accel": "m/s^2", "pck03": "fraction",
                  "wa_mpjpe": "mm", "w_mpjpe": "mm", "rte": "%", "jitter": "m/s^3", "t_error": "m"},
    }
    return res, detail

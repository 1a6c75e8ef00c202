import numpy as np
import pytest

from scenefit.body import make_synthetic_template
from scenefit.core import rodrigues


@pytest.fixture(scope="session")
def template():
    return make_synthetic_template(400, 0)


def rot(axis, deg):
    a = np.asarray(axis, dtype=float)
    return rodrigues(a / np.linalg.norm(a) * np.deg2rad(deg))


def random_rotation(rng, max_deg=180.0):
    axis = rng.normal(size=3)
    return rot(axis, rng.uniform(0, max_deg))


def sample_surface(vertices, faces, n, rng):
    """Area-weighted uniform samples on a triangle mesh."""
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    f = rng.choice(len(faces), size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return a[f] + u[:, None] * (b[f] - a[f]) + v[:, None] * (c[f] - a[f])


def icp_trial(src, rng, icp_fn):
    R = random_rotation(rng, 30.0)
    t = rng.normal(size=3)
    t *= rng.uniform(0, 0.5) / np.linalg.norm(t)
    res = icp_fn(src, src @ R.T + t)
    ang = np.degrees(np.arccos(np.clip((np.trace(res.rotation.T @ R) - 1) / 2, -1, 1)))
    return ang, float(np.linalg.norm(res.translation - t))

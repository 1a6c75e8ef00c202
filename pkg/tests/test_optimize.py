import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenefit.body import skin_batch
from scenefit.core import ValidationError
from scenefit.losses import FrozenObjective, LossWeights, Problem, Stage
from scenefit.metrics import mpjpe
from scenefit.optimize import (AdamState, NonFiniteObjective, OptimizationAborted, OptimizerConfig, StageSpec,
                               adam_step, gradient, refine_sequence)
from scenefit.synth import SynthConfig, generate


def test_gradient_quadratic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=6)
    h = 1e-6
    g = gradient(lambda y: float(y @ y), x, h)
    assert np.abs(g - 2 * x).max() < 10 * h
    gc = gradient(lambda y: float(y @ y), x, h, mode="central")
    assert np.abs(gc - 2 * x).max() < 1e-8


def test_gradient_constant():
    assert np.array_equal(gradient(lambda y: 3.0, np.ones(4)), np.zeros(4))


def test_gradient_non_finite():
    with pytest.raises(NonFiniteObjective):
        gradient(lambda y: float("nan"), np.ones(2))
    with pytest.raises(ValidationError):
        gradient(lambda y: 0.0, np.ones(2), mode="backward")


def test_adam_zero_gradient():
    cfg = OptimizerConfig()
    x = np.array([1.0, -2.0, 3.0])
    state = AdamState.zeros(3)
    for _ in range(5):
        x2, state = adam_step(x, np.zeros(3), state, cfg)
        assert np.array_equal(x2, x)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.integers(1, 50), st.floats(1e-4, 1e-1))
def test_adam_matches_scalar_recurrence(g, steps, lr):
    cfg = OptimizerConfig(learning_rate=lr)
    x, state = np.array([0.5]), AdamState.zeros(1)
    xs, m, v = 0.5, 0.0, 0.0
    for t in range(1, steps + 1):
        x, state = adam_step(x, np.array([g]), state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        xs -= lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(x[0] - xs) <= 1e-12
    assert state.t == steps


def test_adam_descends_quadratic():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(5, 5))
    A = A @ A.T + np.eye(5)
    f = lambda x: 0.5 * x @ A @ x
    x = rng.normal(size=5)
    f0 = f(x)
    state = AdamState.zeros(5)
    for _ in range(500):
        x, state = adam_step(x, A @ x, state, OptimizerConfig())
    assert f(x) < f0


def test_adam_dimension_mismatch():
    with pytest.raises(ValidationError):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros(3), OptimizerConfig())


def test_config_validation():
    with pytest.raises(ValidationError):
        OptimizerConfig(beta1=1.0)
    with pytest.raises(ValidationError):
        OptimizerConfig(learning_rate=0)
    with pytest.raises(ValidationError):
        OptimizerConfig(gradient_mode="magic")
    cfg = OptimizerConfig(schedule=[{"stage": "POSTPROCESS", "max_iters": 3}])
    assert cfg.schedule[0].stage == "POSTPROCESS" and cfg.to_dict()["schedule"][0]["max_iters"] == 3


@pytest.fixture(scope="module")
def noisy(template):
    return generate(SynthConfig(seed=5, n_frames=40, pose_sigma=0.05), template)


def _problem(template, d):
    return Problem(template, d.scene, d.clouds, d.lidar_trajectory)


def test_analytic_gradient_matches_central_fd(template):
    d = generate(SynthConfig(seed=6, n_frames=6, points_per_frame=96, drift=[0, 0, 0.1], pose_sigma=0.05), template)
    rng = np.random.default_rng(2)
    for stage in Stage:
        obj = FrozenObjective(_problem(template, d), d.initial, stage, LossWeights())
        x = d.initial.params().ravel()
        f, br, g = obj.value_and_grad(x)
        assert f == pytest.approx(obj(x), rel=1e-13)
        assert sum(br.values()) == pytest.approx(f, rel=1e-12)
        idx = rng.choice(x.size, 40, replace=False)
        h = 1e-6
        for i in idx:
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (obj(xp) - obj(xm)) / (2 * h)
            assert abs(fd - g[i]) <= 1e-4 * max(1.0, abs(fd)), (stage, i)


def test_gradient_sparsity(template):
    d = generate(SynthConfig(seed=6, n_frames=10, points_per_frame=96, drift=[0, 0, 0.1], pose_sigma=0.05), template)
    obj = FrozenObjective(_problem(template, d), d.initial, Stage.ANNOTATE, LossWeights())
    x = d.initial.params()
    rng = np.random.default_rng(3)
    _, _, g = obj.value_and_grad(x.ravel())
    k = 5
    y = x.copy()
    far = [j for j in range(10) if abs(j - k) > 2]
    y[far] += 0.01 * rng.normal(size=(len(far), 75))
    _, _, g2 = obj.value_and_grad(y.ravel())
    g, g2 = g.reshape(10, 75), g2.reshape(10, 75)
    assert np.abs(g[k] - g2[k]).max() <= 1e-12 * max(1.0, np.abs(g[k]).max())
    # and frames inside the stencil do matter
    y = x.copy()
    y[k + 2, :3] += 0.05
    _, _, g3 = obj.value_and_grad(y.ravel())
    assert np.abs(g3.reshape(10, 75)[k] - g[k]).max() > 0


def test_fixed_point(template):
    d = generate(SynthConfig(seed=5, n_frames=30, lidar_sigma=0.0, points_per_frame=4000), template)
    m, rep = refine_sequence(d.motion, d.clouds, d.scene, d.lidar_trajectory, template)
    assert m == d.motion
    for s in rep.stages:
        assert s["total"][0] < 1e-12


def test_pose_noise_improves(template, noisy):
    cfg = OptimizerConfig(schedule=[StageSpec("ANNOTATE", 60)])
    m, rep = refine_sequence(noisy.initial, noisy.clouds, noisy.scene, noisy.lidar_trajectory, template, cfg)
    assert mpjpe(m, noisy.motion, template) < mpjpe(noisy.initial, noisy.motion, template)
    assert len(rep.total_history) <= 60


def test_drift_halved(template):
    d = generate(SynthConfig(seed=5, n_frames=40, drift=[0, 0, 0.3]), template)
    cfg = OptimizerConfig(schedule=[StageSpec("ANNOTATE", 100)])
    m, _ = refine_sequence(d.initial, d.clouds, d.scene, d.lidar_trajectory, template, cfg)

    def world(a):
        return np.linalg.norm(skin_batch(template, a.theta, a.T)[1] - skin_batch(template, d.motion.theta, d.motion.T)[1], axis=2).mean()

    assert world(m) <= 0.5 * world(d.initial)


def test_best_so_far_monotone_between_refreshes(template, noisy):
    cfg = OptimizerConfig(schedule=[StageSpec("ANNOTATE", 60), StageSpec("POSTPROCESS", 30)], gate_refresh_period=20)
    _, rep = refine_sequence(noisy.initial, noisy.clouds, noisy.scene, noisy.lidar_trajectory, template, cfg)
    for s in rep.stages:
        bounds = [0] + s["refresh"] + [len(s["best"])]
        assert s["refresh"] == ([20, 40] if s["stage"] == "ANNOTATE" else [20])
        for a, b in zip(bounds[:-1], bounds[1:]):
            seg = s["best"][a:b]
            assert all(y <= x for x, y in zip(seg, seg[1:]))
        assert all(b <= t for b, t in zip(s["best"], s["total"]))


def test_determinism(template, noisy):
    cfg = OptimizerConfig(schedule=[StageSpec("ANNOTATE", 15), StageSpec("POSTPROCESS", 10)], gate_refresh_period=5)
    m1, r1 = refine_sequence(noisy.initial, noisy.clouds, noisy.scene, noisy.lidar_trajectory, template, cfg)
    m2, r2 = refine_sequence(noisy.initial, noisy.clouds, noisy.scene, noisy.lidar_trajectory, template, cfg)
    assert m1 == m2 and r1.to_dict() == r2.to_dict()
    assert "wall_time" not in r1.to_dict() and r1.to_dict(include_timing=True)["wall_time"] > 0


def test_fd_mode_runs(template):
    d = generate(SynthConfig(seed=6, n_frames=4, points_per_frame=64, drift=[0, 0, 0.05]), template)
    cfg = OptimizerConfig(gradient_mode="fd", schedule=[StageSpec("ANNOTATE", 2)])
    cfg_a = OptimizerConfig(schedule=[StageSpec("ANNOTATE", 2)])
    m_fd, r_fd = refine_sequence(d.initial, d.clouds, d.scene, d.lidar_trajectory, template, cfg)
    m_an, r_an = refine_sequence(d.initial, d.clouds, d.scene, d.lidar_trajectory, template, cfg_a)
    assert r_fd.stages[0]["total"][0] == r_an.stages[0]["total"][0]
    assert np.abs(m_fd.T - m_an.T).max() < 1e-3


def test_divergence_aborts_with_partial_report(template, noisy):
    cfg = OptimizerConfig(learning_rate=5.0, divergence_factor=1.5, schedule=[StageSpec("ANNOTATE", 20)])
    with pytest.raises(OptimizationAborted) as e:
        refine_sequence(noisy.initial, noisy.clouds, noisy.scene, noisy.lidar_trajectory, template, cfg)
    assert e.value.report.aborted.startswith("ANNOTATE")
    assert e.value.motion is not None and len(e.value.report.stages[0]["total"]) >= 1

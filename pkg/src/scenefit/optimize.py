"""Gradient engine and staged refinement driver (Adam over root translation and pose)."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import MotionSequence, ScenefitError, ValidationError
from .losses import FrozenObjective, LossConfig, LossWeights, Problem, Stage, build_gates


class OptimizationAborted(ScenefitError):
    """Raised when a stage diverges or produces NaN; carries the partial result."""

    def __init__(self, message, motion=None, report=None):
        super().__init__(message)
        self.motion = motion
        self.report = report


class NonFiniteObjective(ValidationError):
    pass


def gradient(objective, params, h: float = 1e-6, mode: str = "forward") -> np.ndarray:
    """Finite-difference gradient of a scalar objective, one coordinate at a time."""
    x = np.array(params, dtype=float).ravel()
    f0 = float(objective(x))
    if not np.isfinite(f0):
        raise NonFiniteObjective("objective is not finite at the evaluation point")
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        fp = float(objective(xp))
        if mode == "forward":
            g[i] = (fp - f0) / h
        elif mode == "central":
            xm = x.copy()
            xm[i] -= h
            g[i] = (fp - float(objective(xm))) / (2.0 * h)
        else:
            raise ValidationError(f"unknown finite-difference mode {mode!r}")
        if not np.isfinite(g[i]):
            raise NonFiniteObjective(f"objective not finite near coordinate {i}")
    return g


@dataclass
class StageSpec:
    stage: str
    max_iters: int
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.stage = Stage(self.stage).value
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.max_iters < 0:
            raise ValidationError("max_iters must be >= 0")

    def to_dict(self):
        return {"stage": self.stage, "max_iters": self.max_iters, "weights": self.weights.to_dict()}


def _default_schedule():
    return [StageSpec("ANNOTATE", 300), StageSpec("POSTPROCESS", 200)]


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    gradient_step: float = 1e-6  # finite-difference step for the "fd" gradient mode
    gradient_mode: str = "analytic"  # "analytic" or "fd"
    gate_refresh_period: int = 25
    schedule: list = field(default_factory=_default_schedule)
    tol: float = 0.0  # stop a stage when the relative loss decrease per iteration falls below this
    abs_tol: float = 1e-12  # stop a stage once the loss is this small
    divergence_factor: float = 10.0

    def __post_init__(self):
        self.schedule = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.schedule]
        for name in ("learning_rate", "epsilon", "gradient_step", "divergence_factor"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("beta1 and beta2 must lie in (0, 1)")
        if self.gate_refresh_period < 1:
            raise ValidationError("gate_refresh_period must be >= 1")
        if self.gradient_mode not in ("analytic", "fd"):
            raise ValidationError("gradient_mode must be 'analytic' or 'fd'")
        if self.tol < 0 or self.abs_tol < 0:
            raise ValidationError("tolerances must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = [s.to_dict() for s in self.schedule]
        return d


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grad, state: AdamState, config: OptimizerConfig):
    """One bias-corrected Adam update. Returns (new params, new state)."""
    x = np.asarray(params, dtype=float)
    g = np.asarray(grad, dtype=float)
    if x.shape != g.shape or state.m.shape != x.shape:
        raise ValidationError(f"Adam dimension mismatch: params {x.shape}, grad {g.shape}, state {state.m.shape}")
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    return x - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon), AdamState(m, v, t)


@dataclass
class OptimizationReport:
    stages: list = field(default_factory=list)  # per-stage dicts with loss curves
    wall_time: float = 0.0
    final_gates: dict | None = None
    parameter_delta: dict | None = None
    aborted: str | None = None

    @property
    def total_history(self):
        return [v for s in self.stages for v in s["total"]]

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "stages": self.stages,
            "final_gates": self.final_gates,
            "parameter_delta": self.parameter_delta,
            "aborted": self.aborted,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


def _params(motion: MotionSequence) -> np.ndarray:
    return motion.params().ravel()


def _with_params(motion: MotionSequence, x) -> MotionSequence:
    return motion.with_params(np.asarray(x).reshape(len(motion), 75))


def _run_stage(problem, motion, spec: StageSpec, cfg: OptimizerConfig, record: dict):
    x = _params(motion)
    obj = FrozenObjective(problem, motion, spec.stage, spec.weights)
    if not obj.terms or spec.max_iters == 0:
        return motion, obj.gates

    def evaluate(o, x):
        if cfg.gradient_mode == "analytic":
            return o.value_and_grad(x)
        f = o(x)
        return f, None, gradient(o, x, cfg.gradient_step)

    state = AdamState.zeros(x.size)
    best_x, best_f = x.copy(), np.inf
    f_init = None
    prev = None
    for it in range(spec.max_iters):
        if it > 0 and it % cfg.gate_refresh_period == 0:
            obj = FrozenObjective(problem, _with_params(motion, x), spec.stage, spec.weights)
            # best-so-far is re-scored on the refreshed objective
            best_f = float(obj(best_x))
            record["refresh"].append(it)
        f, breakdown, g = evaluate(obj, x)
        if breakdown is None:
            breakdown = {t: getattr(obj.weights, t) * v for t, v in obj.terms_at(x).items()}
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            record["aborted"] = f"non-finite loss or gradient at iteration {it}"
            return _with_params(motion, best_x), obj.gates
        if f_init is None:
            f_init = f
        if f > cfg.divergence_factor * max(f_init, 1e-300) and f_init > 0:
            record["aborted"] = f"diverged at iteration {it}: loss {f:.6g} > {cfg.divergence_factor:g} x initial {f_init:.6g}"
            return _with_params(motion, best_x), obj.gates
        if f < best_f:
            best_f, best_x = f, x.copy()
        record["total"].append(f)
        record["best"].append(best_f)
        for t in obj.terms:
            record["terms"].setdefault(t, []).append(breakdown.get(t, 0.0))
        if f <= cfg.abs_tol:
            break
        if prev is not None and cfg.tol > 0 and prev > 0 and (prev - f) / prev < cfg.tol and f <= prev:
            break
        prev = f
        x, state = adam_step(x, g, state, cfg)
    return _with_params(motion, best_x), obj.gates


def refine_sequence(motion_init: MotionSequence, clouds, scene, lidar_trajectory, template,
                    config: OptimizerConfig | None = None, loss_config: LossConfig | None = None):
    """Run the stage schedule from ``motion_init``; returns (best motion, report).

    Raises OptimizationAborted (carrying the partial motion and report) when a stage
    diverges or hits NaN.
    """
    cfg = config or OptimizerConfig()
    t0 = time.perf_counter()
    problem = Problem(template, scene, clouds, lidar_trajectory, loss_config or LossConfig())
    report = OptimizationReport()
    motion = motion_init
    gates = None
    for spec in cfg.schedule:
        record = {"stage": spec.stage, "max_iters": spec.max_iters, "total": [], "best": [], "terms": {},
                  "refresh": [], "aborted": None}
        report.stages.append(record)
        motion, gates = _run_stage(problem, motion, spec, cfg, record)
        if record["aborted"]:
            report.aborted = f"{spec.stage}: {record['aborted']}"
            break
    if gates is None:
        gates = build_gates(problem, motion, ())
    report.final_gates = gates.snapshot()
    dT = motion.T - motion_init.T
    dth = motion.theta - motion_init.theta
    report.parameter_delta = {
        "T_max": float(np.abs(dT).max()),
        "T_mean_norm": float(np.linalg.norm(dT, axis=1).mean()),
        "theta_max": float(np.abs(dth).max()),
        "theta_mean_norm": float(np.linalg.norm(dth, axis=2).mean()),
    }
    report.wall_time = time.perf_counter() - t0
    if report.aborted:
        raise OptimizationAborted(report.aborted, motion, report)
    return motion, report

"""Single pipeline configuration merging the loss, optimizer, synth and metric settings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from . import __version__
from .core import ValidationError
from .io import ParseError
from .losses import LossConfig
from .metrics import PCK_THRESHOLD, SEGMENT_LENGTH
from .optimize import OptimizerConfig
from .synth import SynthConfig


@dataclass
class BodyConfig:
    n_vertices: int = 400
    seed: int = 0


@dataclass
class MetricsConfig:
    segment_length: int = SEGMENT_LENGTH
    pck_threshold: float = PCK_THRESHOLD

    def __post_init__(self):
        if self.segment_length < 1 or self.pck_threshold <= 0:
            raise ValidationError("segment_length must be >= 1 and pck_threshold > 0")


@dataclass
class CalibConfig:
    forward_offset: float = 0.2
    ransac_threshold: float = 0.02
    ransac_iterations: int = 500


@dataclass
class PipelineConfig:
    version: str = __version__
    seed: int = 0
    body: BodyConfig = field(default_factory=BodyConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    calib: CalibConfig = field(default_factory=CalibConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.to_dict()
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ParseError("config must be a JSON object", field="<root>")
        _reject_unknown(d, cls, "")
        kw = {}
        sections = {"body": BodyConfig, "losses": LossConfig, "optimizer": OptimizerConfig,
                    "synth": SynthConfig, "metrics": MetricsConfig, "calib": CalibConfig}
        for key, value in d.items():
            if key in sections:
                sec = sections[key]
                if not isinstance(value, dict):
                    raise ParseError(f"config section {key!r} must be an object", field=key)
                _reject_unknown(value, sec, key + ".")
                if key == "optimizer" and "schedule" in value:
                    for i, s in enumerate(value["schedule"]):
                        allowed = {"stage", "max_iters", "weights"}
                        extra = set(s) - allowed
                        if extra:
                            raise ParseError(f"unknown config keys {sorted(extra)}", field=f"optimizer.schedule[{i}]")
                        if "weights" in s:
                            from .losses import LossWeights
                            _reject_unknown(s["weights"], LossWeights, f"optimizer.schedule[{i}].weights.")
                try:
                    kw[key] = sec(**value)
                except ParseError:
                    raise
                except (TypeError, ValueError, ValidationError) as e:
                    raise ParseError(f"invalid config section {key!r}: {e}", field=key) from None
            else:
                kw[key] = value
        return cls(**kw)

    @classmethod
    def loads(cls, text: str) -> "PipelineConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"config is not valid JSON: {e.msg}", offset=e.pos) from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _reject_unknown(d: dict, cls, prefix: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ParseError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}", field=prefix + unknown[0])

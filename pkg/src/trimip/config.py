"""Declarative run configuration: training settings plus rendering/meshing knobs."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from .train import TrainConfig

_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


@dataclass
class RunConfig:
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    delta_t: float | None = None       # hybrid half-band; None -> surface.default_delta_t
    hybrid_n: int = 8
    mesh_resolution: int = 128
    iso: float | None = None           # None -> density giving 5% opacity per step
    early_stop: float = 1e-4
    eval_every: int = 1000
    threads: int | None = None

    def __post_init__(self):
        if self.delta_t is not None and not self.delta_t > 0:
            raise ValueError("delta_t must be positive")
        if self.hybrid_n < 1:
            raise ValueError("hybrid_n must be >= 1")
        if self.mesh_resolution < 8:
            raise ValueError("mesh_resolution must be >= 8")
        if self.iso is not None and not self.iso > 0:
            raise ValueError("iso must be positive")
        if not 0 <= self.early_stop < 1:
            raise ValueError("early_stop must lie in [0, 1)")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        own = {f.name for f in dataclasses.fields(cls)} - {"train"}
        unknown = set(d) - own - _TRAIN_KEYS
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        train = TrainConfig.from_dict({k: v for k, v in d.items() if k in _TRAIN_KEYS})
        return cls(train=train, **{k: v for k, v in d.items() if k in own})

    def to_dict(self) -> dict:
        out = self.train.to_dict()
        out.update({f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                    if f.name != "train"})
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def resolved_threads(self) -> int:
        if os.environ.get("TRIMIP_THREADS"):
            return max(1, int(os.environ["TRIMIP_THREADS"]))
        return self.threads or os.cpu_count() or 1


def desk_config(**overrides) -> RunConfig:
    """The small-machine recipe: 5K steps with the decay milestones scaled to match."""
    d = {
        "total_steps": 5000,
        "lr_decay_steps": [2400, 3600, 4000, 4400],
        "width": 64,
        "mip_size": 64,
        "channels": 8,
        "target_spheres": 16384,
    }
    d.update(overrides)
    return RunConfig.from_dict(d)

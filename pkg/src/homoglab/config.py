"""Declarative experiment configuration.

A config is a plain dataclass that round-trips losslessly through JSON.
The config hash covers every field that influences numeric output (i.e.
everything except the output directory and the worker count), so
hash + seed fully determine the produced numbers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

EXPERIMENTS = (
    "homogenize",
    "sigma-check",
    "excess-decay",
    "caccioppoli",
    "sublinearity",
    "error-residual",
    "cz-scan",
)

MODELS = ("lognormal", "laminate", "checkerboard", "pareto", "constant")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    model: str = "lognormal"
    model_params: dict = field(default_factory=dict)
    n: int = 64
    d: int = 2
    p: float = 4.0
    q: float = 4.0
    base_seed: int = 0
    num_seeds: int = 1
    tol: float = 1e-10
    out: str | None = None
    workers: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"unknown experiment {self.experiment!r}; valid: {', '.join(EXPERIMENTS)}"
            )
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; valid: {', '.join(MODELS)}")
        if self.d not in (2, 3):
            raise ConfigError(f"d must be 2 or 3, got {self.d}")
        if self.n < 4 or self.n % 2:
            raise ConfigError(f"n must be even and >= 4, got {self.n}")
        if self.p <= 1 or self.q <= 1:
            raise ConfigError(f"exponents must satisfy p, q > 1, got p={self.p}, q={self.q}")
        if self.num_seeds < 1:
            raise ConfigError("num_seeds must be >= 1")
        if not (0 < self.tol <= 1e-2):
            raise ConfigError(f"tol must lie in (0, 1e-2], got {self.tol}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def seeds(self) -> list[int]:
        """Seed expansion rule: base_seed + index, index = 0..num_seeds-1."""
        return [self.base_seed + i for i in range(self.num_seeds)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "experiment" not in data:
            raise ConfigError("config is missing the 'experiment' key")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        """Hex digest over the numerically relevant fields."""
        payload = self.to_dict()
        payload.pop("out", None)
        payload.pop("workers", None)
        canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

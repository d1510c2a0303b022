"""Flat ``key = value`` pipeline configuration with command-line overrides."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .exceptions import InvalidConfigError
from .localization import ESTIMATORS
from .metrics import LossWeights
from .signal import StftConfig

EMBEDDERS = ("oracle", "fixture", "external-container")


@dataclass(frozen=True)
class PipelineConfig:
    geometry: str = ""  # empty: 6-mic circular array, 92.6 mm diameter
    num_directions: int = 100
    fft_size: int = 1024
    hop: int = 256
    window: str = "sqrt-hann"
    t_a: int = 100
    block_len: float = 5.0
    threshold: float = 0.7
    lambda1: float = 1e-2
    lambda2: float = 1e-4
    beta: float = 0.2
    estimator: str = "analytic-fd"
    embedder: str = "oracle"
    embedder_path: str = ""
    adaption_weights: str = ""  # (D, K, M*M) container for statistic-fd
    kernels: str = ""  # kernel prefix for statistic-td
    distortionless: bool = False
    max_iter: int = 8
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if self.num_directions < 2:
            raise InvalidConfigError("num_directions must be >= 2")
        if self.estimator not in ESTIMATORS:
            raise InvalidConfigError(f"estimator must be one of {ESTIMATORS}")
        if self.embedder not in EMBEDDERS:
            raise InvalidConfigError(f"embedder must be one of {EMBEDDERS}")
        if self.t_a < 1 or self.t_a > self.fft_size:
            raise InvalidConfigError(f"t_a must be in [1, {self.fft_size}]")
        if self.block_len <= 0 or self.threshold <= 0 or self.beta <= 0:
            raise InvalidConfigError("block_len, threshold and beta must be positive")
        if self.embedder != "oracle" and not self.embedder_path:
            raise InvalidConfigError(f"embedder {self.embedder!r} needs embedder_path")
        if self.estimator == "statistic-td" and not self.kernels:
            raise InvalidConfigError("statistic-td needs a kernels prefix")
        for key in ("geometry", "embedder_path", "adaption_weights"):
            path = getattr(self, key)
            if path and not Path(path).exists():
                raise InvalidConfigError(f"{key}: {path} does not exist")
        if self.kernels and not Path(self.kernels + ".bin").exists():
            raise InvalidConfigError(f"kernels: {self.kernels}.bin does not exist")
        try:
            self.stft()
        except ValueError as exc:
            raise InvalidConfigError(str(exc)) from exc
        return self

    def stft(self) -> StftConfig:
        return StftConfig(self.fft_size, self.hop, self.window)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.beta, self.lambda1, self.lambda2)

    def with_overrides(self, pairs: dict) -> "PipelineConfig":
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, raw in pairs.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise InvalidConfigError(f"unknown config key {key!r}")
            parsed[key] = _coerce(key, types[key], raw)
        return replace(self, **parsed)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls().with_overrides(parse_text(Path(path).read_text()))


def _coerce(key: str, kind: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise InvalidConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise InvalidConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key] = value
    return out

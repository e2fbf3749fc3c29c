"""Pipeline configuration: one JSON file, strict key checking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .losses import LossWeights
from .optim import DEFAULT_RATES
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class BoundaryConfig:
    tau: float = 0.5
    k: int = 8


@dataclass
class BakeConfig:
    resolution: int = 256
    iterations: int = 1000


@dataclass
class OcclusionConfig:
    samples: int = 64
    refresh: int = 500


@dataclass
class BatchConfig:
    """Capture batches: per-view batch ids select a view-dependent color bank
    when per_batch_color is on; sampling weights bias view selection."""

    per_batch_color: bool = False
    view_batch: list = None
    view_weights: list = None


@dataclass
class PipelineConfig:
    scene_dir: str = "scene"
    out_dir: str = "out"
    seed: int = 0
    schedule_scale: float = 1.0
    sh_degree: int = 3
    p_drop: float = 0.9
    uv_normal_drop_deg: float = 60.0
    visibility_refresh: int = 500
    texture_mask_group: str = "scalp"
    highpass_sigma: float = 4.0
    feather_band: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    rates: dict = field(default_factory=lambda: dict(DEFAULT_RATES))
    boundary: BoundaryConfig = field(default_factory=BoundaryConfig)
    bake: BakeConfig = field(default_factory=BakeConfig)
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)
    batches: BatchConfig = field(default_factory=BatchConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @staticmethod
    def from_json(d: dict) -> "PipelineConfig":
        d = dict(d)
        allowed = set(PipelineConfig().__dict__)
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sub = {}
        if "weights" in d:
            try:
                sub["weights"] = LossWeights.from_json(d.pop("weights"))
            except ValueError as e:
                raise ConfigError(str(e)) from e
        if "rates" in d:
            rates = dict(DEFAULT_RATES)
            extra = set(d["rates"]) - set(rates)
            if extra:
                raise ConfigError(f"unknown rate groups: {sorted(extra)}")
            rates.update(d.pop("rates"))
            sub["rates"] = rates
        for name, cls in (("boundary", BoundaryConfig), ("bake", BakeConfig),
                          ("occlusion", OcclusionConfig), ("batches", BatchConfig)):
            if name in d:
                block = d.pop(name)
                extra = set(block) - set(cls().__dict__)
                if extra:
                    raise ConfigError(f"unknown {name} config keys: {sorted(extra)}")
                sub[name] = cls(**block)
        if "synth" in d:
            try:
                sub["synth"] = SynthConfig.from_json(d.pop("synth"))
            except ValueError as e:
                raise ConfigError(str(e)) from e
        return PipelineConfig(**d, **sub)

    @staticmethod
    def load(path) -> "PipelineConfig":
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid JSON in {path}: {e}") from e
        return PipelineConfig.from_json(data)

    def dump(self, path) -> None:
        d = dict(self.__dict__)
        d["weights"] = self.weights.to_json()
        for name in ("boundary", "bake", "occlusion", "batches", "synth"):
            d[name] = dict(getattr(self, name).__dict__)
        d["synth"]["eyeball_dir"] = list(d["synth"]["eyeball_dir"])
        with open(path, "w") as f:
            json.dump(d, f, indent=1)

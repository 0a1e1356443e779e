"""Single-file YAML configuration covering every pipeline default."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .pipeline import BuildConfig
from .relocalizer import LocalizeConfig, RansacConfig
from .synthetic import SceneSpec
from .trainer import TrainConfig
from .triangulation import TriangulationConfig
from .voxel import VoxelInit


class ConfigError(ValueError):
    """Malformed configuration file or override."""


@dataclass
class TrackingSection:
    match_radius: float = 20.0
    match_min_sim: float = 0.8
    min_track_length: int = 5


@dataclass
class TriangulationSection:
    gm_scale: float = 2.0
    max_iters: int = 100


@dataclass
class VoxelSection:
    patch_size: int = 7
    resolution: int = 3
    noise_sigma: float = 1e-3
    target_alpha: float = 1e-2
    density_shift: float = 0.0


@dataclass
class TrainingSection:
    epochs: int = 2000
    rays_per_epoch: int = 1024
    lr_desc: float = 0.1
    lr_density: float = 0.1
    w_mse: float = 1.0
    w_cos: float = 1.0
    w_tv: float = 1e-2
    w_ent: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


@dataclass
class RenderingSection:
    samples_per_ray: int = 8
    opacity_min: float = 0.1


@dataclass
class MatchingSection:
    tau: float = 0.7


@dataclass
class RansacSection:
    threshold_px: float = 3.0
    confidence: float = 0.999
    max_iters: int = 1000


@dataclass
class LocalizeSection:
    iterations: int = 3


@dataclass
class EvalSection:
    success_translation: float = 0.05  # meters
    success_rotation_deg: float = 5.0
    max_failures: int = 0


@dataclass
class Config:
    seed: int = 0
    workers: int = 1
    scene: SceneSpec = field(default_factory=SceneSpec)
    tracking: TrackingSection = field(default_factory=TrackingSection)
    triangulation: TriangulationSection = field(default_factory=TriangulationSection)
    voxel: VoxelSection = field(default_factory=VoxelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    rendering: RenderingSection = field(default_factory=RenderingSection)
    matching: MatchingSection = field(default_factory=MatchingSection)
    ransac: RansacSection = field(default_factory=RansacSection)
    localize: LocalizeSection = field(default_factory=LocalizeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        # The master seed drives the scene unless the scene overrides it.
        if self.scene.seed == 0 and self.seed != 0:
            self.scene.seed = self.seed

    # Adapters to the pipeline dataclasses.
    def build_config(self) -> BuildConfig:
        return BuildConfig(patch_size=self.voxel.patch_size,
                           resolution=self.voxel.resolution,
                           match_radius=self.tracking.match_radius,
                           match_min_sim=self.tracking.match_min_sim,
                           min_track_length=self.tracking.min_track_length,
                           noise_sigma=self.voxel.noise_sigma,
                           target_alpha=self.voxel.target_alpha,
                           seed=self.seed)

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(epochs=t.epochs, rays_per_epoch=t.rays_per_epoch,
                           lr_desc=t.lr_desc, lr_density=t.lr_density,
                           w_mse=t.w_mse, w_cos=t.w_cos, w_tv=t.w_tv,
                           w_ent=t.w_ent, beta1=t.beta1, beta2=t.beta2,
                           eps=t.eps, seed=self.seed,
                           n_samples=self.rendering.samples_per_ray,
                           density_shift=self.voxel.density_shift)

    def triangulation_config(self) -> TriangulationConfig:
        return TriangulationConfig(gm_scale=self.triangulation.gm_scale,
                                   max_iters=self.triangulation.max_iters)

    def voxel_init(self, seed: int) -> VoxelInit:
        return VoxelInit(noise_sigma=self.voxel.noise_sigma,
                         target_alpha=self.voxel.target_alpha,
                         samples_per_ray=self.rendering.samples_per_ray,
                         density_shift=self.voxel.density_shift, seed=seed)

    def localize_config(self) -> LocalizeConfig:
        return LocalizeConfig(tau=self.matching.tau,
                              n_samples=self.rendering.samples_per_ray,
                              opacity_min=self.rendering.opacity_min,
                              density_shift=self.voxel.density_shift,
                              seed=self.seed,
                              ransac=RansacConfig(
                                  threshold_px=self.ransac.threshold_px,
                                  max_iters=self.ransac.max_iters,
                                  confidence=self.ransac.confidence))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)


def _fill_dataclass(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{context}: unknown key '{key}'")
        if cls is Config and key in _SECTION_TYPES:
            kwargs[key] = _fill_dataclass(_SECTION_TYPES[key], value,
                                          f"{context}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{context}: {e}") from e


_SECTION_TYPES = {
    "scene": SceneSpec,
    "tracking": TrackingSection,
    "triangulation": TriangulationSection,
    "voxel": VoxelSection,
    "training": TrainingSection,
    "rendering": RenderingSection,
    "matching": MatchingSection,
    "ransac": RansacSection,
    "localize": LocalizeSection,
    "eval": EvalSection,
}


def config_from_dict(data: dict) -> Config:
    return _fill_dataclass(Config, data or {}, "config")


def load_config(path=None) -> Config:
    """Load a YAML config; None yields all defaults."""
    if path is None:
        return Config()
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from e
    return config_from_dict(data)


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply 'section.key=value' (or 'key=value') CLI overrides in place."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        target = cfg
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ConfigError(f"unknown config section '{p}'")
            target = getattr(target, p)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise ConfigError(f"unknown config key '{dotted}'")
        current = getattr(target, leaf)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse value for '{dotted}': {e}") from e
        if current is not None and not isinstance(value, type(current)):
            # YAML may parse 1 as int where a float is wanted, etc.
            try:
                value = type(current)(value)
            except (TypeError, ValueError) as e:
                raise ConfigError(
                    f"value for '{dotted}' has wrong type: {e}") from e
        setattr(target, leaf, value)
    return cfg

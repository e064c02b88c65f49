"""Run configuration: model dimensions, ablation toggles, data sources, and
optimizer settings, with validation and YAML round-tripping."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .decoder import AGGREGATION_MODES


@dataclass
class ModelConfig:
    dim: int = 64
    num_heads: int = 8
    num_points: int = 4
    strides: tuple[int, ...] = (4, 8)
    backbone_channels: int = 16
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 20
    ffn_dim: int | None = None
    num_classes: int = 3
    aggregation: str = "weighted"
    decompose: bool = True
    flatten: bool = False
    dropout: float = 0.0
    detach_references: bool = True


@dataclass
class SyntheticConfig:
    """Generate the training data on the fly under the run directory."""

    num_videos: int = 20
    width: int = 96
    height: int = 96
    num_frames: int = 5
    min_objects: int = 2
    max_objects: int = 3
    size_min: float = 10.0
    size_max: float = 18.0
    speed_min: float = 1.0
    speed_max: float = 4.0
    exit_probability: float = 0.15
    seed: int = 0


@dataclass
class SourceConfig:
    """One dataset source; either file paths or a synthetic recipe.

    ``pseudo_video_frames`` turns a still-image source (length-1 videos) into
    clips of that many frames via small random rotations at sampling time.
    """

    annotations: str | None = None
    frames_dir: str | None = None
    synthetic: SyntheticConfig | None = None
    weight: float = 1.0
    pseudo_video_frames: int | None = None
    pseudo_video_max_rotation: float = 10.0


@dataclass
class DataConfig:
    sources: list[SourceConfig] = field(default_factory=list)
    train_frames: int = 5  # clip length T sampled per video; 1 = still-image mode
    batch_size: int = 2


@dataclass
class OptimConfig:
    lr: float = 2e-4
    backbone_lr_factor: float = 0.1
    offset_lr_factor: float = 0.1
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    clip_max_norm: float = 0.1
    lr_drop_steps: tuple[int, ...] = ()
    lr_drop_factor: float = 0.1


@dataclass
class LossConfig:
    class_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    focal_weight: float = 2.0
    dice_weight: float = 5.0
    no_object_weight: float = 0.1
    # classification formulation; only softmax over K+1 classes (with an
    # explicit no-object class) is implemented
    classification: str = "softmax"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    steps: int = 500
    checkpoint_every: int = 250
    log_every: int = 25
    seed: int = 0
    out_dir: str = "runs/default"
    eval_mask_frames: int | None = None  # k evenly sampled frames for mask heads

    def validate(self) -> "RunConfig":
        m = self.model
        if m.dim <= 0 or m.dim % m.num_heads != 0:
            raise ValueError(f"model dim {m.dim} must be positive and divisible "
                             f"by num_heads {m.num_heads}")
        if m.dim % 4 != 0:
            raise ValueError("model dim must be divisible by 4 (sine encoding pairs)")
        if list(m.strides) != sorted(set(m.strides)):
            raise ValueError("strides must be strictly increasing")
        if not any(s >= 8 for s in m.strides):
            raise ValueError("need a pyramid level with stride >= 8 for the mask branch")
        if m.aggregation not in AGGREGATION_MODES:
            raise ValueError(f"aggregation must be one of {AGGREGATION_MODES}")
        if m.num_queries < 1 or m.enc_layers < 1 or m.dec_layers < 1:
            raise ValueError("layer and query counts must be >= 1")
        if self.data.train_frames < 1 or self.data.batch_size < 1:
            raise ValueError("train_frames and batch_size must be >= 1")
        if m.flatten and self.data.train_frames < 1:
            raise ValueError("flatten mode needs a fixed clip length")
        if not self.data.sources:
            raise ValueError("at least one data source is required")
        for i, src in enumerate(self.data.sources):
            has_files = src.annotations is not None
            if has_files == (src.synthetic is not None):
                raise ValueError(
                    f"data source {i} must set exactly one of annotations/synthetic")
            if src.weight <= 0:
                raise ValueError(f"data source {i} weight must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.loss.classification != "softmax":
            raise ValueError(
                f"classification {self.loss.classification!r} is not implemented "
                "(only 'softmax' is)")
        return self

    def to_dict(self) -> dict:
        def plain(value):
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [plain(v) for v in value]
            return value

        return plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        def build(dc_type, payload, where):
            if payload is None:
                return None
            field_types = {f.name: f for f in dataclasses.fields(dc_type)}
            unknown = set(payload) - set(field_types)
            if unknown:
                raise ValueError(f"unknown config keys at {where}: {sorted(unknown)}")
            kwargs = {}
            for name, value in payload.items():
                if name == "sources":
                    value = [build(SourceConfig, v, f"{where}.sources[{i}]")
                             for i, v in enumerate(value)]
                elif name == "synthetic":
                    value = build(SyntheticConfig, value, f"{where}.synthetic")
                elif isinstance(value, list) and name in ("strides", "betas",
                                                          "lr_drop_steps"):
                    value = tuple(value)
                kwargs[name] = value
            return dc_type(**kwargs)

        data = dict(data)
        sections = {"model": ModelConfig, "data": DataConfig,
                    "optim": OptimConfig, "loss": LossConfig}
        kwargs = {}
        for key, dc_type in sections.items():
            if key in data:
                kwargs[key] = build(dc_type, data.pop(key), key)
        top = build(RunConfig, data, "<root>")
        for key, value in kwargs.items():
            setattr(top, key, value)
        return top.validate()

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        return cls.from_dict(data)

    def resolved_out_dir(self) -> Path:
        """Output directory, overridable via the QUERYVIS_OUT_DIR env var."""
        return Path(os.environ.get("QUERYVIS_OUT_DIR", self.out_dir))

    @staticmethod
    def resolve_data_path(path: str) -> Path:
        """Data paths may be relocated with the QUERYVIS_DATA_ROOT env var."""
        p = Path(path)
        root = os.environ.get("QUERYVIS_DATA_ROOT")
        if root and not p.is_absolute():
            return Path(root) / p
        return p


def tiny_config(**overrides) -> RunConfig:
    """Smallest end-to-end preset: completes train+infer+eval in minutes on CPU."""
    cfg = RunConfig(
        model=ModelConfig(dim=32, num_heads=4, enc_layers=2, dec_layers=2,
                          num_queries=10, strides=(8, 16), backbone_channels=8),
        data=DataConfig(sources=[SourceConfig(synthetic=SyntheticConfig(
            num_videos=3, width=64, height=64, num_frames=3))],
            train_frames=3, batch_size=1),
        steps=20,
        checkpoint_every=20,
    )
    return _apply_overrides(cfg, overrides)


def desk_config(**overrides) -> RunConfig:
    """Default desk-scale preset used by the synthetic benchmark."""
    cfg = RunConfig(
        model=ModelConfig(dim=64, num_heads=8, enc_layers=2, dec_layers=3,
                          num_queries=20, strides=(8, 16), backbone_channels=16),
        data=DataConfig(sources=[SourceConfig(synthetic=SyntheticConfig())],
                        train_frames=5, batch_size=2),
        steps=1000,
        checkpoint_every=500,
    )
    return _apply_overrides(cfg, overrides)


def paper_scale_config(**overrides) -> RunConfig:
    """The published training scale, kept as a named config for completeness
    (not runnable in reasonable time on a desk CPU)."""
    cfg = RunConfig(
        model=ModelConfig(dim=256, num_heads=8, enc_layers=6, dec_layers=6,
                          num_queries=300, strides=(8, 16, 32, 64),
                          backbone_channels=64, num_classes=40),
        data=DataConfig(sources=[SourceConfig(annotations="train/annotations.json",
                                              frames_dir="train/frames")],
                        train_frames=5, batch_size=2),
        optim=OptimConfig(lr_drop_steps=(60000, 100000)),
        steps=120000,
    )
    return _apply_overrides(cfg, overrides)


def overfit_benchmark_config(**overrides) -> RunConfig:
    """The pinned synthetic overfit benchmark: 20 videos of 2-3 moving shapes,
    5 frames at 96x96, with the training budget the acceptance suite uses."""
    cfg = desk_config()
    cfg.data.sources = [SourceConfig(synthetic=SyntheticConfig(
        num_videos=20, width=96, height=96, num_frames=5,
        min_objects=2, max_objects=3, size_min=11.0, size_max=19.0,
        speed_min=1.0, speed_max=3.5, exit_probability=0.1, seed=0))]
    cfg.steps = 1600
    cfg.optim.lr_drop_steps = (1200,)
    cfg.seed = 0
    cfg.checkpoint_every = 0
    return _apply_overrides(cfg, overrides)


def ablation_benchmark_config(**overrides) -> RunConfig:
    """The pinned ablation benchmark: smaller and faster than the overfit run,
    with enough motion that per-frame attention matters."""
    cfg = desk_config()
    cfg.model.dec_layers = 3
    cfg.data.sources = [SourceConfig(synthetic=SyntheticConfig(
        num_videos=12, width=64, height=64, num_frames=5,
        min_objects=2, max_objects=2, size_min=8.0, size_max=13.0,
        speed_min=2.0, speed_max=5.0, exit_probability=0.15, seed=7))]
    cfg.steps = 700
    cfg.seed = 0
    cfg.checkpoint_every = 0
    return _apply_overrides(cfg, overrides)


def _apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    for key, value in overrides.items():
        obj = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            obj = getattr(obj, part)
        if not hasattr(obj, parts[-1]):
            raise ValueError(f"unknown config override {key!r}")
        setattr(obj, parts[-1], value)
    return cfg.validate()

"""Hyperparameter containers and the YAML run-config loader."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Bad config key or value. ``key`` names the offending dotted path."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.001
    delta_v: float = 0.5
    delta_d: float = 1.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name}", "weight must be >= 0")
        if self.delta_d <= 2 * self.delta_v:
            log.warning(
                "delta_d=%g <= 2*delta_v=%g: zero loss no longer implies separable embeddings",
                self.delta_d,
                2 * self.delta_v,
            )


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_decay: float = 0.5
    decay_every: int = 50
    epochs: int = 200
    batch_size: int = 4
    momentum: float = 0.9
    seed: int = 0
    embed_dim: int = 8
    trunk_widths: tuple[int, ...] = (32, 64, 128)
    head_width: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("train.lr", "learning rate must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("train.lr_decay", "decay must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)


@dataclass
class CrfConfig:
    theta: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 0.5
    lambda3: float = 0.2
    mf_iters: int = 10
    mf_tol: float = 1e-3
    cov_epsilon: float = 1e-4
    cov_scale: float = 0.25
    use_normals: bool = True
    # term switches; the ablation modes set these
    semantic_pairwise: bool = True
    instance_pairwise: bool = True
    consistency: bool = True
    # "sum" is the literal energy; "mean" divides every pairwise sum by N - 1
    pairwise_norm: str = "mean"
    message_passing: str = "dense"
    grid_cell: float = 0.5

    def __post_init__(self):
        for name in ("theta", "lambda1", "lambda2", "lambda3", "cov_epsilon", "cov_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"crf.{name}", "must be > 0")
        if self.pairwise_norm not in ("sum", "mean"):
            raise ConfigError("crf.pairwise_norm", "expected 'sum' or 'mean'")
        if self.message_passing not in ("dense", "grid"):
            raise ConfigError("crf.message_passing", "expected 'dense' or 'grid'")

    def with_ablation(self, mode: str) -> "CrfConfig":
        """Copy with the term switches turned off for one row of the ablation table.

        Modes only ever disable terms, so a term already switched off in the
        config stays off.
        """
        if mode == "unary":
            flags = dict(semantic_pairwise=False, instance_pairwise=False, consistency=False)
        elif mode == "pairwise":
            flags = dict(consistency=False)
        elif mode == "full":
            flags = {}
        else:
            raise ConfigError("ablation", f"unknown mode {mode!r}")
        return dataclasses.replace(self, **flags)


@dataclass
class WindowConfig:
    size: tuple[float, float, float] = (1.0, 1.0, float("inf"))
    stride: tuple[float, float, float] = (0.5, 0.5, float("inf"))
    point_count: int = 4096

    def __post_init__(self):
        self.size = tuple(float(v) for v in self.size)
        self.stride = tuple(float(v) for v in self.stride)
        if self.point_count < 1:
            raise ConfigError("window.point_count", "must be >= 1")


@dataclass
class MeanShiftConfig:
    bandwidth: float = 1.5
    max_iters: int = 300
    tol: float = 1e-4
    merge_radius: float | None = None
    bin_seeding: bool = False


@dataclass
class MergeConfig:
    voxel_size: float = 0.05
    overlap_ratio: float = 0.5
    nms_iou: float = 0.5
    min_instance_points: int = 0


@dataclass
class SynthConfig:
    n_scenes: int = 10
    n_train: int = 8
    classes: tuple[str, ...] = ("floor", "chair", "table")
    room_size: tuple[float, float] = (2.5, 2.5)
    min_objects: int = 1
    max_objects: int = 4
    density: float = 300.0
    position_noise: float = 0.003
    color_noise: float = 0.03
    min_gap: float = 0.5

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.room_size = tuple(float(v) for v in self.room_size)


@dataclass
class RunConfig:
    seed: int = 0
    ablation: str = "full"
    jobs: int = 1
    dump_intermediate: bool = False
    data_dir: str = "data"
    model_path: str = "model.bin"
    output_dir: str = "results"
    split: str = "test"
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    crf: CrfConfig = field(default_factory=CrfConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    meanshift: MeanShiftConfig = field(default_factory=MeanShiftConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


_SECTIONS = {
    "loss": LossConfig,
    "train": TrainConfig,
    "crf": CrfConfig,
    "window": WindowConfig,
    "meanshift": MeanShiftConfig,
    "merge": MergeConfig,
    "synth": SynthConfig,
}


def _build(cls, data: dict[str, Any], prefix: str):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown key")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(prefix or "config", str(exc)) from exc


def config_from_dict(data: dict[str, Any] | None) -> RunConfig:
    data = dict(data or {})
    sections = {}
    for name, cls in _SECTIONS.items():
        section = data.pop(name, None) or {}
        if not isinstance(section, dict):
            raise ConfigError(name, "expected a mapping")
        sections[name] = _build(cls, section, name)
    return _build(RunConfig, {**data, **sections}, "")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config", f"{path} does not hold a mapping")
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    def clean(value):
        if isinstance(value, tuple):
            return [clean(v) for v in value]
        return value

    out = dataclasses.asdict(cfg)

    def walk(node):
        if isinstance(node, dict):
            return {k: walk(v) for k, v in node.items()}
        return clean(node)

    return walk(out)

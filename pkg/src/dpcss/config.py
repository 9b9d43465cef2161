"""Separator architecture/training configuration and YAML config loading."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

ARCHS = ("blstm-baseline", "dp-blstm", "transformer-baseline", "dp-transformer", "dp-transformer-boosted")
RNN_ARCHS = ("blstm-baseline", "dp-blstm")
DP_ARCHS = ("dp-blstm", "dp-transformer", "dp-transformer-boosted")
WINDOW_CHOICES = (50, 100, 150, 200)

# default stack depth: sequence layers for baselines, DP blocks for dual-path models
DEFAULT_REPEATS = {
    "blstm-baseline": 4,
    "dp-blstm": 2,
    "transformer-baseline": 10,
    "dp-transformer": 5,
    "dp-transformer-boosted": 5,
}


class ConfigError(ValueError):
    pass


@dataclass
class SeparatorConfig:
    arch: str = "dp-blstm"
    window_frames: int = 150
    hop_frames: int | None = None  # None -> window_frames // 2
    feature_dim: int = 256
    repeats: int | None = None
    rnn_hidden: int = 512
    n_heads: int = 4
    ff_dim: int = 1024
    online: bool = False
    sampling_factor: int = 2
    conv_kernel: int = 3
    n_outputs: int = 2
    fft_size: int = 512
    hop: int = 256
    stitch_on: str = "mask"  # or "magnitude"
    seed: int = 0

    def __post_init__(self):
        if self.hop_frames is None:
            self.hop_frames = max(self.window_frames // 2, 1)
        if self.repeats is None and self.arch in DEFAULT_REPEATS:
            self.repeats = DEFAULT_REPEATS[self.arch]
        self.validate()

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def is_rnn(self) -> bool:
        return self.arch in RNN_ARCHS

    @property
    def is_dual_path(self) -> bool:
        return self.arch in DP_ARCHS

    @property
    def is_boosted(self) -> bool:
        return self.arch == "dp-transformer-boosted" and self.sampling_factor > 1

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; choose from {', '.join(ARCHS)}")
        if self.window_frames <= 0:
            raise ConfigError(f"window_frames must be positive, got {self.window_frames}")
        if not 0 < self.hop_frames <= self.window_frames:
            raise ConfigError(f"hop_frames must lie in (0, window_frames={self.window_frames}], got {self.hop_frames}")
        if self.repeats is None or self.repeats < 0:
            raise ConfigError(f"repeats must be a non-negative integer, got {self.repeats}")
        if self.n_outputs != 2:
            raise ConfigError("only two output streams are supported")
        if self.arch == "dp-transformer-boosted":
            if self.repeats < 3:
                raise ConfigError(f"boosted model needs at least 3 DP blocks, got {self.repeats}")
            if self.sampling_factor < 1:
                raise ConfigError(f"sampling_factor must be >= 1, got {self.sampling_factor}")
        if self.online and self.arch != "dp-blstm":
            raise ConfigError("online mode is only available for dp-blstm (uni-directional LSTM global layer)")
        if not self.is_rnn and self.feature_dim % self.n_heads:
            raise ConfigError(f"feature_dim {self.feature_dim} not divisible by {self.n_heads} heads")
        if self.stitch_on not in ("mask", "magnitude"):
            raise ConfigError(f"stitch_on must be 'mask' or 'magnitude', got {self.stitch_on!r}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SeparatorConfig":
        return build_dataclass(cls, data, "model")


def build_dataclass(cls, data: dict[str, Any] | None, section: str):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


@dataclass
class TrainConfig:
    steps: int = 2000
    epochs: int | None = None
    batch_size: int = 2  # chunks per step
    chunk_windows: int = 8  # consecutive windows of one recording per chunk (the global-path context)
    learning_rate: float | None = None  # None -> 1e-3 for RNNs, 2e-3 for transformers
    warmup_steps: int = 25000
    plateau_decay: float = 0.9
    grad_clip: float = 5.0
    val_fraction: float = 0.25
    epoch_steps: int | None = None  # steps per validation epoch; None -> one pass over the data
    schedule: str | None = None  # "warmup" | "plateau"; None -> by architecture
    snr_floor: float = 1e-4
    average_best: int = 0  # >0: average the N best validation checkpoints after training
    seed: int = 0

    def __post_init__(self):
        if self.steps is not None and self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.chunk_windows <= 0:
            raise ConfigError(f"chunk_windows must be positive, got {self.chunk_windows}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.schedule not in (None, "warmup", "plateau"):
            raise ConfigError(f"schedule must be 'warmup' or 'plateau', got {self.schedule!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.warmup_steps <= 0:
            raise ConfigError(f"warmup_steps must be positive, got {self.warmup_steps}")


@dataclass
class SimulateConfig:
    n_meetings: int = 10
    duration: float = 12.0
    n_speakers: int = 2
    overlap_min: float = 0.5
    overlap_max: float = 0.8
    noise_snr_min: float | None = 0.0  # null -> no additive noise
    noise_snr_max: float = 20.0
    max_order: int = 2
    utterance_min: float = 1.5
    utterance_max: float = 4.0
    source_dir: str | None = None
    seed: int = 0


@dataclass
class ProfileConfig:
    duration: float = 60.0


@dataclass
class RunConfig:
    model: SeparatorConfig = field(default_factory=SeparatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


SECTIONS = {"model": SeparatorConfig, "train": TrainConfig, "simulate": SimulateConfig, "profile": ProfileConfig}


def load_run_config(path: str | Path | None = None, overrides: dict[str, dict[str, Any]] | None = None) -> RunConfig:
    """Merge defaults < YAML file < overrides into a validated :class:`RunConfig`."""
    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    for section, values in (overrides or {}).items():
        merged = dict(raw.get(section) or {})
        merged.update({k: v for k, v in values.items() if v is not None})
        raw[section] = merged
    return RunConfig(**{name: build_dataclass(cls, raw.get(name), name) for name, cls in SECTIONS.items()})


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))

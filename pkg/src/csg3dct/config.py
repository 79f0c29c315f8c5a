"""Model and run configuration, and the plain-text ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Union

STAGES = ("c1", "c2", "c3", "c4", "c5")
FUSION_MODES = ("swa", "ca", "none")
INIT_MODES = ("scratch", "inflated")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: str
    blocks: int
    channels: int
    stride: int
    temporal_kernel: int

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"{self.stage}: temporal kernel must be odd and >= 1, got {self.temporal_kernel}")
        if self.temporal_kernel > 1 and self.stage not in ("c3", "c4", "c5"):
            raise ConfigError(f"{self.stage}: temporal kernels > 1 are only allowed in c3-c5")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    frames: int = 8
    image_size: int = 64
    channels: tuple = (16, 32, 64, 128, 256)
    blocks: tuple = (1, 1, 1, 1)
    stage_strides: tuple = (1, 2, 2, 2)
    bottleneck_ratio: int = 4
    stem_kernel: int = 5
    temporal_kernel: int = 3
    temporal_stages: tuple = ("c3", "c4", "c5")
    embed_dim: int = 32
    heads: int = 4
    patch_size: int = 4
    mlp_ratio: int = 2
    max_frames: int = 16
    fusion: str = "ca"
    num_classes: int = 2

    STEM_STRIDE = 4

    def __post_init__(self):
        if len(self.channels) != 5:
            raise ConfigError("channels needs one width per stage c1..c5")
        if len(self.blocks) != 4 or len(self.stage_strides) != 4:
            raise ConfigError("blocks and stage_strides need one entry per stage c2..c5")
        if any(b < 1 for b in self.blocks):
            raise ConfigError("every stage c2..c5 needs at least one conv block")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})")
        if self.image_size % self.STEM_STRIDE:
            raise ConfigError(f"image_size {self.image_size} not divisible by the stem stride {self.STEM_STRIDE}")
        if self.stem_size % self.patch_size:
            raise ConfigError(f"stem output {self.stem_size} not divisible by patch_size {self.patch_size}")
        if not 1 <= self.frames <= self.max_frames:
            raise ConfigError(f"frames must be in [1, max_frames={self.max_frames}], got {self.frames}")
        if self.num_classes != 2:
            raise ConfigError("only two classes (mild/severe) are supported")
        bad = [s for s in self.temporal_stages if s not in ("c3", "c4", "c5")]
        if bad:
            raise ConfigError(f"temporal_stages may only name c3-c5, got {bad}")
        self.stages()  # validates per-stage settings
        size = self.stem_size
        for stage, s in zip(STAGES[1:], self.stage_strides):
            size = (size + 2 - 3) // s + 1
            if size < 1:
                raise ConfigError(f"{stage}: spatial size collapses below 1")
            big, small = max(size, self.grid), min(size, self.grid)
            if big % small:
                raise ConfigError(f"{stage}: feature grid {size} and token grid {self.grid} are not integer multiples")

    @property
    def stem_size(self) -> int:
        return self.image_size // self.STEM_STRIDE

    @property
    def grid(self) -> int:
        """Token grid side n."""
        return self.stem_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.frames * self.grid ** 2 + 1

    @property
    def num_amdf_blocks(self) -> int:
        return sum(self.blocks) + 1

    def stages(self) -> list:
        out = [StageConfig("c1", 0, self.channels[0], 4, 1)]
        for i, stage in enumerate(STAGES[1:]):
            t = self.temporal_kernel if stage in self.temporal_stages else 1
            out.append(StageConfig(stage, self.blocks[i], self.channels[i + 1], self.stage_strides[i], t))
        return out

    def stage_sizes(self) -> list:
        """Spatial side of each stage output, c1..c5."""
        sizes = [self.stem_size]
        for s in self.stage_strides:
            sizes.append((sizes[-1] + 2 - 3) // s + 1)
        return sizes

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def as_2d(self) -> "ModelConfig":
        """Per-frame restriction: one frame, all temporal kernels 1."""
        return self.replace(frames=1, temporal_kernel=1)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    init: str = "scratch"
    pretrain_epochs: int = 3
    pretrain_lr: float = 1e-3
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    allowed_frames: tuple = (8, 16)

    def __post_init__(self):
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.model.frames not in self.allowed_frames:
            raise ConfigError(f"frames {self.model.frames} not in allowed_frames {self.allowed_frames}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0 < self.train_fraction < 1 or not 0 <= self.val_fraction < 1 \
                or self.train_fraction + self.val_fraction >= 1:
            raise ConfigError("split fractions must leave a nonempty test split")

    @property
    def fusion(self) -> str:
        return self.model.fusion

    def replace(self, **changes) -> "RunConfig":
        model_changes = {k: changes.pop(k) for k in list(changes) if k in _MODEL_KEYS}
        model = self.model.replace(**model_changes) if model_changes else self.model
        return dataclasses.replace(self, model=model, **changes)


_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_RUN_KEYS = {f.name: f for f in fields(RunConfig) if f.name != "model"}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            return tuple(int(x) for x in items)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments) into a RunConfig.

    Model keys and run keys share one namespace; unknown keys are errors.
    """
    model_kw, run_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _MODEL_KEYS:
            model_kw[key] = _parse_value(key, raw, ModelConfig.__dataclass_fields__[key].default)
        elif key in _RUN_KEYS:
            f = _RUN_KEYS[key]
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            run_kw[key] = _parse_value(key, raw, default)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return RunConfig(model=ModelConfig(**model_kw), **run_kw)


def format_config(run: Union[RunConfig, ModelConfig]) -> str:
    lines = []
    model = run if isinstance(run, ModelConfig) else run.model
    for name in _MODEL_KEYS:
        lines.append(f"{name} = {_format_value(getattr(model, name))}")
    if isinstance(run, RunConfig):
        for name in _RUN_KEYS:
            lines.append(f"{name} = {_format_value(getattr(run, name))}")
    return "\n".join(lines) + "\n"


def load_config(path: Union[str, Path]) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(run: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(format_config(run), encoding="utf-8")


def model_config_from_items(items: dict) -> ModelConfig:
    kw = {k: _parse_value(k, v, ModelConfig.__dataclass_fields__[k].default)
          for k, v in items.items() if k in _MODEL_KEYS}
    return ModelConfig(**kw)

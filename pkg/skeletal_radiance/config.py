"""
Configuration dataclasses and YAML config files

Top-level mappings: field -> FieldConfig, train -> TrainConfig, data -> DataConfig,
eval -> EvalConfig. Unknown sections and keys are errors. See docs/config.md.
"""

import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from dataclasses import field as dataclass_field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, get_type_hints

import yaml

from .errors import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV = "NHP_THREADS"

VARIANTS = ("Sk", "Px", "Sk+Px", "Sk+Px+T", "Sk+Px+MV", "Sk+Px+T+MV")
PROTOCOLS = ("pose", "identity", "seen")


@dataclass(frozen=True)
class FieldConfig:
    """Architecture of the radiance field, including the ablation switches"""

    d_img: int = 32
    encoder_channels: Tuple[int, ...] = (16, 32)
    d_temporal: int = 64
    d_vox: int = 32
    d_mv: int = 128
    density_hidden: int = 128
    color_hidden: int = 64
    direction_frequencies: int = 4
    voxel_divisions: int = 32
    bbox_margin: float = 0.025
    memory_offset: int = 5
    enable_skeletal: bool = True
    enable_pixel_aligned: bool = True
    enable_temporal_transformer: bool = True
    enable_multiview_transformer: bool = True
    separate_mv_query: bool = False
    zero_init_heads: bool = False

    def __post_init__(self):
        for name in ("d_img", "d_temporal", "d_vox", "d_mv", "density_hidden", "color_hidden",
                     "direction_frequencies", "voxel_divisions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"field.{name} must be >= 1, got {getattr(self, name)}")
        if len(self.encoder_channels) != 2 or min(self.encoder_channels) < 1:
            raise ConfigError(f"field.encoder_channels needs two positive widths, got {self.encoder_channels}")
        if self.memory_offset < 0:
            raise ConfigError(f"field.memory_offset must be >= 0, got {self.memory_offset}")
        if self.bbox_margin < 0:
            raise ConfigError(f"field.bbox_margin must be >= 0, got {self.bbox_margin}")
        if not (self.enable_skeletal or self.enable_pixel_aligned):
            raise ConfigError("at least one of enable_skeletal and enable_pixel_aligned must be set")
        if self.enable_temporal_transformer and not self.enable_skeletal:
            raise ConfigError("the temporal transformer needs skeletal features")
        if self.enable_multiview_transformer and not (self.enable_skeletal and self.enable_pixel_aligned):
            raise ConfigError("the multi-view transformer needs skeletal and pixel-aligned features")

    @property
    def memory_offsets(self) -> Tuple[int, ...]:
        return () if self.memory_offset == 0 else (-self.memory_offset, self.memory_offset)

    @property
    def variant(self) -> str:
        parts = []
        if self.enable_skeletal:
            parts.append("Sk")
        if self.enable_pixel_aligned:
            parts.append("Px")
        if self.enable_temporal_transformer:
            parts.append("T")
        if self.enable_multiview_transformer:
            parts.append("MV")
        return "+".join(parts)

    def with_variant(self, variant: str) -> "FieldConfig":
        parts = set(variant.split("+"))
        unknown = parts - {"Sk", "Px", "T", "MV"}
        if unknown or variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
        return replace(
            self,
            enable_skeletal="Sk" in parts,
            enable_pixel_aligned="Px" in parts,
            enable_temporal_transformer="T" in parts,
            enable_multiview_transformer="MV" in parts,
        )


@dataclass(frozen=True)
class TrainConfig:
    rays_per_step: int = 1024
    samples_per_ray: int = 64
    learning_rate: float = 5e-4
    steps: int = 2000
    seed: int = 0
    precision: str = "float32"
    foreground_fraction: float = 0.8
    mask_dilation: int = 2
    stratified: bool = True
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("rays_per_step", "samples_per_ray", "steps", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"train.learning_rate must be positive, got {self.learning_rate}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"train.precision must be float32 or float64, got {self.precision!r}")
        if not 0.0 <= self.foreground_fraction <= 1.0:
            raise ConfigError(f"train.foreground_fraction must lie in [0, 1], got {self.foreground_fraction}")
        if self.mask_dilation < 0 or self.checkpoint_every < 0:
            raise ConfigError("train.mask_dilation and train.checkpoint_every must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    data_dir: str = "data"
    train_subjects: Tuple[str, ...] = ()
    test_subjects: Tuple[str, ...] = ()
    train_frames: str = "0-19"
    test_frames: str = "20-29"


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "pose"
    samples_per_ray: int = 64
    tile_size: int = 256
    threads: int = 1
    save_images: bool = False

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"eval.protocol must be one of {', '.join(PROTOCOLS)}, got {self.protocol!r}")
        if self.samples_per_ray < 1 or self.tile_size < 1 or self.threads < 1:
            raise ConfigError("eval.samples_per_ray, eval.tile_size and eval.threads must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    field: FieldConfig = dataclass_field(default_factory=FieldConfig)
    train: TrainConfig = dataclass_field(default_factory=TrainConfig)
    data: DataConfig = dataclass_field(default_factory=DataConfig)
    eval: EvalConfig = dataclass_field(default_factory=EvalConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: _plain(asdict(getattr(self, name))) for name in _SECTIONS}

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, Any]]) -> "RunConfig":
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
        parts = {}
        for name, klass in _SECTIONS.items():
            values = dict(data.get(name, {}))
            parts[name] = _build(klass, name, {k: _coerce(klass, name, k, v) for k, v in values.items()})
        return cls(**parts)


_SECTIONS = {"field": FieldConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}


def _plain(values: Dict[str, Any]) -> Dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}


def _build(klass, section: str, values: Dict[str, Any]):
    known = {f.name for f in fields(klass)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {', '.join(sorted(unknown))}")
    return klass(**values)


def _split(value: Any):
    if value is None:
        return []
    return value.split(",") if isinstance(value, str) else value


def _coerce(klass, section: str, key: str, value: Any) -> Any:
    hints = get_type_hints(klass)
    if key not in hints:
        raise ConfigError(f"unknown key {key!r} in section {section!r}")
    kind = hints[key]
    try:
        if kind is str:
            return "" if value is None else str(value).strip()
        if isinstance(value, str) and kind in (bool, int, float):
            # command-line overrides arrive as text; read them as YAML scalars
            value = yaml.safe_load(value)
        if kind is bool:
            if not isinstance(value, bool):
                raise ValueError(f"not a boolean: {value!r}")
            return value
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError(f"not a number: {value!r}")
            return float(value)
        if kind == Tuple[int, ...]:
            return tuple(int(x) for x in _split(value) if str(x).strip())
        if kind == Tuple[str, ...]:
            return tuple(str(x).strip() for x in _split(value) if str(x).strip())
    except (TypeError, ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"invalid value for {section}.{key}: {value!r} ({exc})") from exc
    raise ConfigError(f"unsupported config type for {section}.{key}")


def load_config(path: Optional[os.PathLike] = None, overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> RunConfig:
    """Read a YAML file (or defaults) and apply per-section overrides"""
    data: Dict[str, Dict[str, Any]] = {}
    if path is not None:
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
        loaded = loaded or {}
        if not isinstance(loaded, dict) or not all(v is None or isinstance(v, dict) for v in loaded.values()):
            raise ConfigError(f"malformed config file {path}: expected a mapping of sections to mappings")
        data = {str(section): dict(values or {}) for section, values in loaded.items()}
        logger.debug("loaded config sections %s from %s", ", ".join(data), path)
    for section, values in (overrides or {}).items():
        data.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    return RunConfig.from_dict(data)


def write_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False, default_flow_style=None)
    return path


def parse_frame_range(text: str) -> range:
    """'0-19' -> frames 0..19 inclusive; '5' -> frame 5"""
    try:
        if "-" in text:
            lo, hi = (int(part) for part in text.split("-", 1))
        else:
            lo = hi = int(text)
    except ValueError as exc:
        raise ConfigError(f"invalid frame range {text!r}, expected 'first-last'") from exc
    if lo < 0 or hi < lo:
        raise ConfigError(f"invalid frame range {text!r}")
    return range(lo, hi + 1)


def resolve_threads(flag: Optional[int] = None, configured: Optional[int] = None) -> int:
    """--threads, then NHP_THREADS, then the config value, then 1"""
    if flag is not None:
        threads = flag
    elif os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}") from exc
    elif configured is not None:
        threads = configured
    else:
        threads = 1
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    return threads

"""
Run configuration: a tree of frozen dataclasses plus the flat config format.

Config files hold one ``key = value`` per line with ``#`` comments. Section
keys are dotted (``lps.kappa = 2.5``); run-level keys are bare
(``epochs = 30``). Values go through ``yaml.safe_load`` so booleans, numbers
and ``[1, 1, 1]`` lists type naturally.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

import yaml

from mtcp_errors import ConfigurationError

TASK_NAMES = ("seg", "depth", "normals")
SCHEME_NAMES = ("lps", "ew", "ma", "log-smoothing", "prioritization-only")


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 32
    num_queries: int = 8


@dataclass(frozen=True)
class DecoderConfig:
    num_stages: int = 3
    blocks_per_stage: Tuple[int, ...] = (1, 1, 1)
    window: int = 4
    heads: int = 2
    # Empty means every stage uses the backbone channel count.
    stage_widths: Tuple[int, ...] = ()
    mlp_ratio: int = 2


@dataclass(frozen=True)
class CfmConfig:
    enabled: bool = True
    residual: bool = True
    lambda_cos: float = 1.0
    reduction: int = 4


@dataclass(frozen=True)
class SrmConfig:
    enabled: bool = True


@dataclass(frozen=True)
class LpsConfig:
    scheme: str = "lps"
    kappa: float = 2.5
    history: int = 3
    clamp_min: float = 0.0
    clamp_max: float = 10.0
    manual_weights: Tuple[float, ...] = ()


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 64
    train_count: int = 200
    val_count: int = 50
    # None means "use the run seed".
    seed: Optional[int] = None
    min_shapes: int = 2
    max_shapes: int = 5


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 30
    batch_size: int = 2
    seed: int = 0
    output_dir: str = "runs/default"
    tasks: Tuple[str, ...] = TASK_NAMES
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    cfm: CfmConfig = field(default_factory=CfmConfig)
    srm: SrmConfig = field(default_factory=SrmConfig)
    lps: LpsConfig = field(default_factory=LpsConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DatasetConfig = field(default_factory=DatasetConfig)

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    def stage_widths(self) -> Tuple[int, ...]:
        widths = self.decoder.stage_widths
        return tuple(widths) if widths else (self.backbone.channels,) * self.decoder.num_stages

    def blocks_per_stage(self) -> Tuple[int, ...]:
        blocks = tuple(self.decoder.blocks_per_stage)
        if len(blocks) == 1:
            return blocks * self.decoder.num_stages
        return blocks


SECTIONS = {
    f.name
    for f in dataclasses.fields(RunConfig)
    if dataclasses.is_dataclass(f.default_factory)  # type: ignore[arg-type]
}


# ---------------------------------------------------------------------------
# Overrides
# ---------------------------------------------------------------------------


def _coerce(value: Any, current: Any, key: str) -> Any:
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [parse_value(part.strip()) for part in value.split(",") if part.strip()]
        if value is None:
            value = []
        if not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if current is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigurationError(f"{key}: expected an integer or null, got {value!r}")
        return value
    return str(value)


def parse_value(text: str) -> Any:
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    if isinstance(value, str):
        # PyYAML reads exponent floats without a dot (1e-3) as strings.
        try:
            return float(value)
        except ValueError:
            return value
    return value


def apply_override(config: RunConfig, key: str, value: Any) -> RunConfig:
    """Return a copy of ``config`` with one dotted key replaced."""
    if isinstance(value, str):
        value = parse_value(value)
    parts = key.strip().split(".")
    if len(parts) == 1:
        name = parts[0]
        if name in SECTIONS or name not in {f.name for f in dataclasses.fields(RunConfig)}:
            raise ConfigurationError(f"unknown config key: {key}")
        return dataclasses.replace(config, **{name: _coerce(value, getattr(config, name), key)})
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigurationError(f"unknown config key: {key}")
    section_name, name = parts
    section = getattr(config, section_name)
    if name not in {f.name for f in dataclasses.fields(section)}:
        raise ConfigurationError(f"unknown config key: {key}")
    updated = dataclasses.replace(section, **{name: _coerce(value, getattr(section, name), key)})
    return dataclasses.replace(config, **{section_name: updated})


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    for key, value in overrides.items():
        config = apply_override(config, key, value)
    return config


def parse_config_text(text: str) -> Dict[str, Any]:
    """Parse flat ``key = value`` lines into an ordered mapping."""
    entries: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {number}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {number}: empty key")
        entries[key] = parse_value(value)
    return entries


def load_config(path: Optional[Path] = None, overrides: Iterable[Tuple[str, Any]] = ()) -> RunConfig:
    """Defaults, then the config file, then explicit overrides; validated."""
    config = RunConfig()
    if path is not None:
        config = apply_overrides(config, parse_config_text(Path(path).read_text()))
    for key, value in overrides:
        config = apply_override(config, key, value)
    validate(config)
    return config


# ---------------------------------------------------------------------------
# Validation and serialisation
# ---------------------------------------------------------------------------


def validate(config: RunConfig, allow_tiny: bool = False) -> None:
    """Raise ConfigurationError on the first broken invariant."""
    errors = []
    unknown = any(t not in TASK_NAMES for t in config.tasks)
    if not config.tasks or unknown or len(set(config.tasks)) != len(config.tasks):
        errors.append(f"tasks must be distinct names from {TASK_NAMES}, got {config.tasks}")
    if config.epochs < 1 or config.batch_size < 1:
        errors.append("epochs and batch_size must be >= 1")
    min_channels = 2 if allow_tiny else 8
    if config.backbone.channels < min_channels:
        errors.append(f"backbone.channels must be >= {min_channels}")
    if config.backbone.num_queries < 1:
        errors.append("backbone.num_queries must be >= 1")
    if config.cfm.enabled and len(config.tasks) < 2:
        errors.append("cfm.enabled needs at least two tasks")
    if config.cfm.lambda_cos < 0:
        errors.append("cfm.lambda_cos must be >= 0")

    dec = config.decoder
    if dec.num_stages < 1:
        errors.append("decoder.num_stages must be >= 1")
    widths = config.stage_widths()
    blocks = config.blocks_per_stage()
    if len(widths) != dec.num_stages or len(blocks) != dec.num_stages:
        errors.append("decoder.stage_widths and decoder.blocks_per_stage need one entry per stage")
    if any(w % dec.heads for w in widths):
        errors.append("every stage width must be divisible by decoder.heads")
    if any(w % config.cfm.reduction for w in widths + (config.backbone.channels,)):
        errors.append("every feature width must be divisible by cfm.reduction")

    size = config.data.image_size
    if size % 4:
        errors.append("data.image_size must be divisible by 4")
    else:
        res = size // 4
        for stage in range(dec.num_stages):
            if res < dec.window or res % dec.window:
                errors.append(f"decoder.window {dec.window} does not divide stage {stage + 1} resolution {res}")
                break
            res //= 2

    data = config.data
    if data.train_count < 1 or data.val_count < 1:
        errors.append("data.train_count and data.val_count must be >= 1")
    if not 1 <= data.min_shapes <= data.max_shapes:
        errors.append("data shape range must satisfy 1 <= min_shapes <= max_shapes")

    lps = config.lps
    if lps.scheme not in SCHEME_NAMES:
        errors.append(f"lps.scheme must be one of {SCHEME_NAMES}, got {lps.scheme!r}")
    if lps.kappa < 0 or lps.history < 1:
        errors.append("lps.kappa must be >= 0 and lps.history >= 1")
    if lps.clamp_min > lps.clamp_max:
        errors.append("lps.clamp_min must not exceed lps.clamp_max")
    if lps.scheme == "ma":
        if len(lps.manual_weights) != len(config.tasks) or any(w < 0 for w in lps.manual_weights):
            errors.append("lps.manual_weights needs one non-negative weight per task for scheme 'ma'")
    if errors:
        raise ConfigurationError("; ".join(errors))


def to_dict(config: RunConfig) -> Dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(config)))


def from_dict(payload: Mapping[str, Any]) -> RunConfig:
    config = RunConfig()
    for key, value in payload.items():
        if isinstance(value, Mapping):
            for sub_key, sub_value in value.items():
                config = apply_override(config, f"{key}.{sub_key}", sub_value)
        else:
            config = apply_override(config, key, value)
    return config

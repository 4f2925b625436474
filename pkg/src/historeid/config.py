"""Run configuration: a flat, sectioned, human-editable INI file.

Defaults follow the pipeline's standard operating point (512 px
patches at 0.88 mpp, 70% tissue coverage, perturbation envelope 0.2,
bags of 40, Adam at 1e-4). Command-line flags override file values;
the effective config serializes back to INI and fingerprints to a
stable short hash so runs can be replayed exactly.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields
from typing import Any, get_args, get_origin, get_type_hints

from .models.training import TrainingConfig


class ConfigError(ValueError):
    """Raised for unknown keys/sections or unparseable values."""


@dataclass
class DatasetConfig:
    manifest: str = ""  # path to an existing manifest; empty means synthetic
    synthetic_patients: int = 10
    synthetic_slides_per_patient: int = 4
    synthetic_resections: int = 1
    synthetic_image_size: int = 256
    synthetic_seed: int = 0
    synthetic_drift: float = 0.0
    synthetic_native_mpp: float = 0.88


@dataclass
class TilingSection:
    size_px: int = 512
    target_mpp: float = 0.88
    min_coverage: float = 0.7
    downscale_factor: int = 32
    stride_px: int = 0  # 0 means "equal to size_px"


@dataclass
class StainSection:
    stain_lambda: float = 0.2
    epsilon: float = 1.0 / 255.0
    od_floor: float = 0.15
    angle_percentile: float = 1.0


@dataclass
class ModelSection:
    kind: str = "patch"  # patch | mil
    encoder_variant: str = "tiny_synthetic"
    embedding_dim: int = 64
    encoder_width: int = 16
    encoder_depth: int = 4
    encoder_weights: str = ""
    bag_size: int = 40
    attention_hidden: int = 64
    inference_patch_cap: int = 500
    aggregation: str = "mean_prob"  # mean_prob | majority
    mil_encoder_source: str = "task_trained"


@dataclass
class ExperimentSection:
    n_folds: int = 10
    n_repeats: int = 10
    base_seed: int = 0
    ks: tuple[int, ...] = (1, 5)
    train_ratio: float = 0.7
    val_ratio: float = 0.1
    test_ratio: float = 0.2
    temporal_val_fraction: float = 0.2
    mpp_list: tuple[float, ...] = (0.22, 0.44, 0.88, 1.76, 3.52, 7.04)


@dataclass
class RunSection:
    output_dir: str = "runs"
    workers: int = 1


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    tiling: TilingSection = field(default_factory=TilingSection)
    stain: StainSection = field(default_factory=StainSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self) -> None:
        # one owner for the augmentation envelope: the stain section
        self.training.stain_lambda = self.stain.stain_lambda


_SECTIONS: dict[str, type] = {
    "dataset": DatasetConfig,
    "tiling": TilingSection,
    "stain": StainSection,
    "model": ModelSection,
    "training": TrainingConfig,
    "experiment": ExperimentSection,
    "run": RunSection,
}

# keys managed elsewhere and not accepted in their INI section
_EXCLUDED_KEYS = {("training", "stain_lambda")}


def _section_keys(section: str) -> list[str]:
    return [
        f.name
        for f in fields(_SECTIONS[section])
        if (section, f.name) not in _EXCLUDED_KEYS
    ]


def _coerce(section: str, key: str, raw: str, annotation: Any) -> Any:
    raw = raw.strip()
    origin = get_origin(annotation)
    try:
        if origin is tuple:
            item_type = get_args(annotation)[0]
            return tuple(item_type(part.strip()) for part in raw.split(",") if part.strip())
        if annotation is bool or annotation == "bool":
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if annotation is int or annotation == "int":
            return int(raw)
        if annotation is float or annotation == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _field_annotations(cls: type) -> dict[str, Any]:
    return get_type_hints(cls)


def load_config(path: str | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Load an INI config file and apply 'section.key=value' overrides.

    Unknown sections or keys are hard errors that list what is valid.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)

    values: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(
                f"unknown section [{section}]; valid sections: {sorted(_SECTIONS)}"
            )
        annotations = _field_annotations(_SECTIONS[section])
        valid = _section_keys(section)
        for key, raw in parser.items(section):
            if key not in valid:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; valid keys: {valid}"
                )
            values[section][key] = _coerce(section, key, raw, annotations[key])

    for spec, raw in (overrides or {}).items():
        if "." not in spec:
            raise ConfigError(f"override {spec!r} must look like section.key")
        section, key = spec.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(
                f"unknown section {section!r} in override; valid sections: {sorted(_SECTIONS)}"
            )
        valid = _section_keys(section)
        if key not in valid:
            raise ConfigError(f"unknown key {key!r} in [{section}]; valid keys: {valid}")
        annotations = _field_annotations(_SECTIONS[section])
        values[section][key] = _coerce(section, key, raw, annotations[key])

    sections = {name: cls(**values[name]) for name, cls in _SECTIONS.items()}
    return RunConfig(**sections)


def _format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def to_ini_text(config: RunConfig) -> str:
    """Serialize the effective configuration; loading it back is identity."""
    out = io.StringIO()
    for section, cls in _SECTIONS.items():
        out.write(f"[{section}]\n")
        obj = getattr(config, section)
        for key in _section_keys(section):
            out.write(f"{key} = {_format_value(getattr(obj, key))}\n")
        out.write("\n")
    return out.getvalue()


def config_fingerprint(config: RunConfig) -> str:
    """Stable short hash of every effective key=value pair."""
    lines = []
    for section in sorted(_SECTIONS):
        obj = getattr(config, section)
        for key in sorted(_section_keys(section)):
            lines.append(f"{section}.{key}={_format_value(getattr(obj, key))}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

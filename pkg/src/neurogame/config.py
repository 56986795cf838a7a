"""Run configuration: YAML in, validated dataclasses out. Unknown keys are errors."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .layer import NeurogameLayerConfig
from .models import BUILDERS
from .statmech import EnergyParams

CONFIG_VERSION = 1
MODEL_NAMES = tuple(BUILDERS)
DATASET_KINDS = ("synth-bars", "utkface", "csv-manifest")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synth-bars"
    path: str | None = None
    n_samples: int = 2000
    image_size: int = 16
    noise: float = 0.3
    seed: int = 7
    channels: int = 1
    with_age: bool = False
    augment: bool = False
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    input_shape: list | None = None


@dataclass
class NeurogameSection:
    block: list = field(default_factory=lambda: [2, 2])
    top_p: float = 0.85
    neighborhood: str = "plus4"
    alpha: float = 0.0
    beta: float = 1.0
    c: float = 1.0
    k1: float = 1.0
    shapley_method: str = "exact"
    shapley_samples: int = 200
    rescale_kept: bool = False
    infer_identity: bool = False
    partition_scope: str = "map"

    def layer_config(self, seed: int = 0) -> NeurogameLayerConfig:
        return NeurogameLayerConfig(
            block=tuple(self.block),
            top_p=self.top_p,
            neighborhood=self.neighborhood,
            energy=EnergyParams(self.alpha, self.beta, self.c, self.k1),
            shapley_method=self.shapley_method,
            shapley_samples=self.shapley_samples,
            rescale_kept=self.rescale_kept,
            infer_identity=self.infer_identity,
            partition_scope=self.partition_scope,
            seed=seed,
        )


@dataclass
class ModelOptions:
    hidden: list | None = None  # MLP widths of the gender models
    dense: list | None = None  # dense widths of the age/gender models
    filters: Any = None  # int for neurogame-gender, list for the CNNs
    kernel: int | None = None
    dropout: float | None = None


@dataclass
class RunConfig:
    model: str = "neurogame-gender"
    config_version: int = CONFIG_VERSION
    seed: int = 0
    batch_size: int | None = None
    epochs: int | None = None
    learning_rate: float = 1e-3
    dtype: str = "float32"
    output_dir: str = "runs/default"
    iteration_unit: str = "step"
    age_loss_weight: float = 1.0
    record_seconds: bool = False
    diagnostics_every: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    neurogame: NeurogameSection = field(default_factory=NeurogameSection)
    model_options: ModelOptions = field(default_factory=ModelOptions)

    @property
    def has_age(self) -> bool:
        return self.model.endswith("agegender")

    def input_shape(self) -> tuple[int, int, int]:
        d = self.dataset
        if d.kind == "synth-bars":
            return (d.image_size, d.image_size, d.channels)
        if d.input_shape is not None:
            return tuple(d.input_shape)
        return (128, 128, 1) if self.has_age else (64, 64, 3)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"dataset": DatasetConfig, "neurogame": NeurogameSection, "model_options": ModelOptions}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"field '{where or 'root'}': expected a mapping")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"field '{where + '.' if where else ''}{key}': unknown key")
    kwargs = {}
    for key, value in data.items():
        if where == "" and key in _SECTIONS:
            value = _build(_SECTIONS[key], value or {}, key)
        kwargs[key] = value
    return cls(**kwargs)


def _check(cond: bool, field_name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"field '{field_name}': {msg}")


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def validate(cfg: RunConfig) -> RunConfig:
    _check(cfg.config_version == CONFIG_VERSION, "config_version", f"unsupported version (expected {CONFIG_VERSION})")
    _check(cfg.model in MODEL_NAMES, "model", f"must be one of {', '.join(MODEL_NAMES)}")
    _check(_is_int(cfg.seed), "seed", "must be an integer")
    if cfg.batch_size is None:
        cfg.batch_size = 32 if cfg.has_age else 64
    if cfg.epochs is None:
        cfg.epochs = 100 if cfg.has_age else 50
    _check(_is_int(cfg.batch_size) and cfg.batch_size >= 1, "batch_size", "must be an integer >= 1")
    _check(_is_int(cfg.epochs) and cfg.epochs >= 1, "epochs", "must be an integer >= 1")
    _check(_is_num(cfg.learning_rate) and cfg.learning_rate > 0, "learning_rate", "must be a positive number")
    _check(cfg.dtype in ("float32", "float64"), "dtype", "must be float32 or float64")
    _check(cfg.iteration_unit in ("step", "epoch"), "iteration_unit", "must be 'step' or 'epoch'")
    _check(_is_num(cfg.age_loss_weight) and cfg.age_loss_weight >= 0, "age_loss_weight", "must be >= 0")
    _check(isinstance(cfg.record_seconds, bool), "record_seconds", "must be true or false")
    _check(_is_int(cfg.diagnostics_every) and cfg.diagnostics_every >= 0, "diagnostics_every", "must be an integer >= 0")

    d = cfg.dataset
    _check(d.kind in DATASET_KINDS, "dataset.kind", f"must be one of {', '.join(DATASET_KINDS)}")
    if d.kind == "synth-bars":
        _check(_is_int(d.n_samples) and d.n_samples >= 10, "dataset.n_samples", "must be an integer >= 10")
        _check(_is_int(d.image_size) and d.image_size >= 8, "dataset.image_size", "must be an integer >= 8")
        _check(_is_num(d.noise) and d.noise >= 0, "dataset.noise", "must be >= 0")
        _check(d.channels in (1, 3), "dataset.channels", "must be 1 or 3")
        if cfg.has_age:
            d.with_age = True
    else:
        _check(isinstance(d.path, str) and d.path != "", "dataset.path", "required for image datasets")
    _check(
        isinstance(d.split, list) and len(d.split) == 3 and all(_is_num(x) and x >= 0 for x in d.split)
        and abs(sum(d.split) - 1) < 1e-9,
        "dataset.split",
        "must be three non-negative fractions summing to 1",
    )
    if d.input_shape is not None:
        _check(
            isinstance(d.input_shape, list) and len(d.input_shape) == 3 and all(_is_int(x) and x > 0 for x in d.input_shape),
            "dataset.input_shape",
            "must be [height, width, channels]",
        )

    ng = cfg.neurogame
    try:
        ng.layer_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"field 'neurogame': {exc}") from None

    mo = cfg.model_options
    if mo.dropout is not None:
        _check(_is_num(mo.dropout) and 0 <= mo.dropout < 1, "model_options.dropout", "must be in [0, 1)")
    for name in ("hidden", "dense"):
        val = getattr(mo, name)
        if val is not None:
            _check(isinstance(val, list) and all(_is_int(x) and x > 0 for x in val), f"model_options.{name}", "must be a list of positive integers")
    return cfg


def builder_kwargs(cfg: RunConfig) -> dict:
    """Keyword arguments for the model builder named by ``cfg.model``."""
    mo = cfg.model_options
    kw: dict[str, Any] = {"input_shape": cfg.input_shape()}
    if mo.dropout is not None:
        kw["dropout"] = mo.dropout
    if mo.kernel is not None:
        kw["kernel"] = mo.kernel
    if cfg.model in ("mlp-gender", "neurogame-gender"):
        if mo.hidden is not None:
            kw["hidden"] = tuple(mo.hidden)
        if mo.dense is not None:
            raise ConfigError(f"field 'model_options.dense': not used by {cfg.model}")
    else:
        if mo.dense is not None:
            kw["dense"] = tuple(mo.dense)
        if mo.hidden is not None:
            raise ConfigError(f"field 'model_options.hidden': not used by {cfg.model}")
    if mo.filters is not None:
        if cfg.model == "mlp-gender":
            raise ConfigError("field 'model_options.filters': not used by mlp-gender")
        kw["filters"] = mo.filters if cfg.model == "neurogame-gender" else tuple(mo.filters)
    if mo.kernel is not None and cfg.model == "mlp-gender":
        raise ConfigError("field 'model_options.kernel': not used by mlp-gender")
    if cfg.model.startswith("neurogame"):
        kw["neurogame"] = cfg.neurogame.layer_config(seed=cfg.seed)
    return kw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        problem = getattr(exc, "problem", None) or str(exc).splitlines()[0]
        raise ConfigError(f"{where}: {problem}") from None
    if data is None:
        data = {}
    try:
        cfg = _build(RunConfig, data, "")
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return validate(cfg)


def load_config(path, apply_env: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    cfg = parse_config(text, str(path))
    if apply_env and os.environ.get("NEUROGAME_SEED"):
        try:
            cfg.seed = int(os.environ["NEUROGAME_SEED"])
        except ValueError:
            raise ConfigError("environment NEUROGAME_SEED: must be an integer") from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)

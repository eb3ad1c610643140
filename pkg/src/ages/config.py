"""Experiment configuration: YAML in, validated dataclasses out.

Validation errors carry the line of the offending key so the CLI can print
``path:line: message``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .data import MoGSpec
from .models import build_model
from .trainers import METHODS, TrainConfig

SWEEP_AXES = ("divergence", "r0", "method")
DTYPES = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    """Invalid experiment configuration; ``line`` is 1-based or None."""

    def __init__(self, message: str, key: tuple = (), line: int | None = None, source: str = "<config>"):
        super().__init__(message)
        self.message = message
        self.key = tuple(key)
        self.line = line
        self.source = source

    def __str__(self) -> str:
        where = self.source if self.line is None else f"{self.source}:{self.line}"
        dotted = ".".join(str(k) for k in self.key)
        return f"{where}: {dotted + ': ' if dotted else ''}{self.message}"


@dataclass
class EvalConfig:
    every: int = 0
    n_test: int = 10_000
    n_generated: int = 10_000
    mc_samples: int = 1
    is_proposals: int = 0
    mode_threshold: float = 4.0


@dataclass
class ExperimentConfig:
    name: str
    dataset: MoGSpec
    model: dict
    train: TrainConfig
    eval: EvalConfig = field(default_factory=EvalConfig)
    trials: int = 1
    base_seed: int = 0
    out: str = "results"
    dtype: str = "float64"
    record_wall_time: bool = False
    save_models: bool = False
    # per sweep value: nested mapping merged over the base config
    overrides: dict = field(default_factory=dict)
    # the mapping this config was parsed from; sweeps re-parse edited copies
    raw: dict = field(default_factory=dict, repr=False, compare=False)
    source: str = field(default="<config>", repr=False, compare=False)

    def seed_for(self, trial: int) -> int:
        return self.base_seed + trial

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def canonical(self) -> dict:
        """Everything that determines results; the output location is excluded."""
        d = {
            "name": self.name,
            "dataset": self.dataset.to_dict(),
            "model": self.model,
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "trials": self.trials,
            "base_seed": self.base_seed,
            "dtype": self.dtype,
            "record_wall_time": self.record_wall_time,
        }
        d["train"].pop("seed", None)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), default=_json_default)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_value(self, axis: str, value) -> "ExperimentConfig":
        """Copy with one sweep axis set, then any matching override applied."""
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
        raw = copy.deepcopy(self.raw)
        raw.setdefault("train", {})[axis] = value
        raw["overrides"] = {}
        over = self.overrides.get(str(value))
        if over:
            _deep_merge(raw, over)
        return from_dict(raw, source=self.source)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def _deep_merge(base: dict, over: dict) -> dict:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_merge(base[k], v)
        else:
            base[k] = copy.deepcopy(v)
    return base


# -- loading ---------------------------------------------------------------


def _line_index(node, prefix=(), out=None) -> dict:
    """Map key paths to 1-based source lines from a composed YAML node."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for knode, vnode in node.value:
            key = prefix + (knode.value,)
            out[key] = knode.start_mark.line + 1
            _line_index(vnode, key, out)
    return out


TOP_KEYS = {f.name for f in fields(ExperimentConfig)} - {"raw", "source"}
# cadence and seed come from the eval section and the trial index
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"eval_every", "seed"}
EVAL_KEYS = {f.name for f in fields(EvalConfig)}
DATASET_KEYS = {f.name for f in fields(MoGSpec)}


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    return loads_config(text, source=str(path))


def loads_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", line=line, source=source) from None
    lines = _line_index(node) if node is not None else {}
    try:
        return from_dict(raw if raw is not None else {}, source=source)
    except ConfigError as exc:
        # anchor to the deepest key path we know a line for
        key = exc.key
        while key and key not in lines:
            key = key[:-1]
        exc.line = lines.get(key, exc.line)
        exc.source = source
        raise


def _require_mapping(value, key) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError("expected a mapping", key)
    return value


def _check_keys(d: dict, allowed: set, prefix: tuple) -> None:
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(allowed))})", prefix + (k,))


def from_dict(raw: dict, source: str = "<config>") -> ExperimentConfig:
    raw = _require_mapping(raw, ())
    _check_keys(raw, TOP_KEYS, ())

    ds_raw = _require_mapping(raw.get("dataset"), ("dataset",))
    _check_keys(ds_raw, DATASET_KEYS, ("dataset",))
    try:
        dataset = MoGSpec(**ds_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), ("dataset",)) from None

    model = copy.deepcopy(_require_mapping(raw.get("model"), ("model",)))
    if "generator" not in model:
        raise ConfigError("model needs a generator section", ("model",))
    model.setdefault("data_dim", 2)
    model.setdefault("latent_dim", 2)
    if model["data_dim"] != 2:
        raise ConfigError("mixture data is 2-dimensional", ("model", "data_dim"))
    if not isinstance(model["latent_dim"], int) or model["latent_dim"] < 1:
        raise ConfigError("latent_dim must be a positive integer", ("model", "latent_dim"))

    try:
        build_model(model, np.random.default_rng(0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model: {exc}", ("model",)) from None

    tr_raw = _require_mapping(raw.get("train"), ("train",))
    _check_keys(tr_raw, TRAIN_KEYS, ("train",))
    method = tr_raw.get("method", "ages")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}", ("train", "method"))
    try:
        train = TrainConfig(**tr_raw)
    except (TypeError, ValueError) as exc:
        key = next((("train", k) for k in tr_raw if k in str(exc)), ("train",))
        raise ConfigError(str(exc), key) from None
    if train.steps is None and train.epochs is None:
        raise ConfigError("set train.steps or train.epochs", ("train",))
    if method == "ages_uni" and model.get("encoder"):
        raise ConfigError("ages_uni needs model.encoder: null", ("model", "encoder"))
    if method != "ages_uni" and not model.get("encoder"):
        raise ConfigError(f"method {method!r} needs an encoder", ("model",))

    ev_raw = _require_mapping(raw.get("eval"), ("eval",))
    _check_keys(ev_raw, EVAL_KEYS, ("eval",))
    ev = EvalConfig(**ev_raw)
    for k in ("every", "is_proposals"):
        if getattr(ev, k) < 0:
            raise ConfigError("must be non-negative", ("eval", k))
    for k in ("n_test", "n_generated", "mc_samples"):
        if getattr(ev, k) < 1:
            raise ConfigError("must be positive", ("eval", k))

    trials = raw.get("trials", 1)
    if not isinstance(trials, int) or trials < 1:
        raise ConfigError("trials must be a positive integer", ("trials",))
    base_seed = raw.get("base_seed", 0)
    if not isinstance(base_seed, int) or base_seed < 0:
        raise ConfigError("base_seed must be a non-negative integer", ("base_seed",))
    dtype = raw.get("dtype", "float64")
    if dtype not in DTYPES:
        raise ConfigError(f"dtype must be one of {', '.join(DTYPES)}", ("dtype",))
    overrides = _require_mapping(raw.get("overrides"), ("overrides",))
    overrides = {str(k): _require_mapping(v, ("overrides", k)) for k, v in overrides.items()}

    cfg = ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        dataset=dataset,
        model=model,
        train=train,
        eval=ev,
        trials=trials,
        base_seed=base_seed,
        out=str(raw.get("out", "results")),
        dtype=dtype,
        record_wall_time=bool(raw.get("record_wall_time", False)),
        save_models=bool(raw.get("save_models", False)),
        overrides=overrides,
        raw=copy.deepcopy(raw),
        source=source,
    )
    return cfg


def parse_axis_values(axis: str, text: str) -> list:
    """Comma-separated sweep values, typed for the axis."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError("sweep needs at least one value")
    if axis == "r0":
        try:
            vals = [float(t) for t in items]
        except ValueError:
            raise ConfigError(f"r0 values must be numbers, got {text!r}") from None
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ConfigError("r0 values must lie in [0, 1]")
        return vals
    if axis == "method":
        bad = [t for t in items if t not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {', '.join(bad)}")
    return items

"""Run configuration: a YAML document with ``data``, ``graph``, ``model`` and ``train`` sections.

Unknown keys are rejected with their dotted path.  Environment variables
named ``APP_<SECTION>__<KEY>`` (or ``APP_<KEY>`` for top-level keys) override
file values; their text is parsed as YAML scalars, so ``APP_TRAIN__BASE_LR=0.01``
yields a float.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .model import ModelConfig
from .train import TrainConfig

ENV_PREFIX = "APP_"


@dataclass
class SyntheticSection:
    nodes: int = 20
    hours: int = 4000
    seed: int = 0
    alpha: float = 0.8
    season_amp: float = 1.0
    noise_std: float = 0.05
    n_exogenous: int = 0
    extent_m: float = 30000.0


@dataclass
class DataSection:
    dataset: str | None = None     # .npz cache from `prepare-data` or `synth`; None = generate
    target: str | None = None      # predicted channel; None = first feature
    T: int = 12
    T_prime: int = 12
    train_end: float | str = 0.8   # fraction of hours or an ISO timestamp
    train_stride: int = 1
    normalization: str = "minmax"
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)


@dataclass
class GraphSection:
    path: str | None = None        # graph JSON; None = synthetic stations
    epsilon: float = 0.01


@dataclass
class ModelSection:
    conv: str = "diffusion_dual"
    K: int = 2
    hidden_dim: int = 64
    num_layers: int = 2
    laplacian: str = "sym_normalized"
    lambda_max_mode: str = "power"
    cheb_recurrence: str = "standard"


@dataclass
class TrainSection:
    base_lr: float = 0.001
    decay_every: int = 10
    decay_ratio: float = 0.1
    min_lr: float = 2.0e-06
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 50
    clip_norm: float | None = None
    valid_fraction: float = 0.1


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    graph: GraphSection = field(default_factory=GraphSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)

    def model_config(self, input_dim: int) -> ModelConfig:
        m = self.model
        return ModelConfig(conv=m.conv, K=m.K, input_dim=input_dim, hidden_dim=m.hidden_dim,
                           num_layers=m.num_layers, history=self.data.T, horizon=self.data.T_prime,
                           laplacian=m.laplacian, lambda_max_mode=m.lambda_max_mode,
                           cheb_recurrence=m.cheb_recurrence, seed=self.seed)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(base_lr=t.base_lr, decay_every=t.decay_every, decay_ratio=t.decay_ratio,
                           min_lr=t.min_lr, batch_size=t.batch_size, max_epochs=t.max_epochs,
                           patience=t.patience, hidden_units=self.model.hidden_dim,
                           num_layers=self.model.num_layers, seed=self.seed, clip_norm=t.clip_norm,
                           valid_fraction=t.valid_fraction)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _coerce(value, hint, path):
    """Check a scalar against its annotation; ints are accepted where floats are expected."""
    args = typing.get_args(hint)
    allowed = args if args else (hint,)
    if value is None:
        if type(None) in allowed:
            return None
        raise ConfigurationError(f"{path}: must not be null")
    for t in allowed:
        if t is type(None):
            continue
        if t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if t is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if t is float and isinstance(value, str):
            # YAML 1.1 reads "1e-3" as a string
            try:
                return float(value)
            except ValueError:
                pass
        if t is str and isinstance(value, str):
            return value
        if t is str and isinstance(value, (dt.date, dt.datetime)):
            # unquoted YAML timestamps arrive as date objects
            return value.isoformat()
    names = " or ".join("null" if t is type(None) else t.__name__ for t in allowed)
    raise ConfigurationError(f"{path}: expected {names}, got {value!r}")


def _build(cls, doc, path=""):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path or '<root>'}: expected a mapping, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in doc:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigurationError(f"{where}: unknown key (allowed: {', '.join(sorted(known))})")
    kwargs = {}
    for f in fields(cls):
        if f.name not in doc:
            continue
        where = f"{path}.{f.name}" if path else f.name
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, doc[f.name], where)
        else:
            kwargs[f.name] = _coerce(doc[f.name], hint, where)
    return cls(**kwargs)


def _set_path(doc: dict, keys: list[str], value):
    node = doc
    for k in keys[:-1]:
        child = node.get(k)
        if child is None:
            child = node[k] = {}
        if not isinstance(child, dict):
            raise ConfigurationError(f"{'.'.join(keys)}: {k} is not a section")
        node = child
    node[keys[-1]] = value


def env_overrides(environ=None) -> dict:
    """``APP_TRAIN__BASE_LR=0.01`` -> ``{"train": {"base_lr": 0.01}}``."""
    environ = os.environ if environ is None else environ
    doc: dict = {}
    for name, text in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__")]
        # K is the one upper-case key; match it case-insensitively
        keys = ["K" if k == "k" else k for k in keys]
        _set_path(doc, keys, yaml.safe_load(text) if text != "" else None)
    return doc


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """File, then ``APP_`` environment, then explicit overrides (CLI flags)."""
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: not valid YAML: {exc}") from None
    doc = _merge(doc, env_overrides(environ))
    doc = _merge(doc, overrides or {})
    cfg = _build(RunConfig, doc)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    """Cross-field checks that the dataclass types cannot express."""
    # constructing the downstream configs runs their own checks
    try:
        cfg.model_config(1)
        cfg.train_config()
    except Exception as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from None
    if cfg.data.normalization not in ("minmax", "zscore"):
        raise ConfigurationError("data.normalization: expected minmax or zscore")
    if not 0.0 <= cfg.graph.epsilon < 1.0:
        raise ConfigurationError("graph.epsilon: must lie in [0, 1)")
    if cfg.data.train_stride < 1:
        raise ConfigurationError("data.train_stride: must be >= 1")
    if not 0.0 < cfg.train.valid_fraction < 1.0:
        raise ConfigurationError("train.valid_fraction: must lie in (0, 1)")

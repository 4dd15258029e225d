"""Experiment configuration: a flat TOML document plus CLI overrides.

Precedence is CLI flag > ``CHEX_SEED`` (seed only) > file > defaults.
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from ..errors import ConfigError, InvalidArgumentError
from ..explore import INIT_SCHEMES, SAMPLING_MODES, SCHEDULER_KINDS
from ..simnet.loop import MODES, ExplorationConfig
from ..simnet.network import BN_MODES
from .data import GENERATORS

SEED_ENV = "CHEX_SEED"
DATASETS = tuple(GENERATORS) + ("idx",)

# keys that only matter for some modes
_USED_BY = {
    "delta0": ("chex",),
    "scheduler": ("chex",),
    "init_scheme": ("chex",),
    "sampling": ("chex",),
    "dt_epochs": ("chex", "gradual"),
    "dt_iters": ("chex", "gradual"),
    "t_max_fraction": ("chex", "gradual"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "chex"
    S: float = 0.5
    delta0: float = 0.3
    dt_epochs: float = 2.0
    dt_iters: int = 0  # > 0 overrides dt_epochs
    t_max_fraction: float = 0.8
    scheduler: str = "cosine"
    init_scheme: str = "mru"
    sampling: str = "importance"
    widths: tuple = (2, 16, 16, 16, 3)
    bn_mode: str = "standardize"
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_fraction: float = 0.05
    label_smoothing: float = 0.0
    eval_every: int = 0
    dataset: str = "spirals"
    n: int = 3000
    classes: int = 3
    noise: float = 0.1
    data_seed: int = 0
    idx_images: str = ""
    idx_labels: str = ""
    seed: int = 0
    out: str = "runs/default"
    warnings: tuple = field(default=(), compare=False)

    def echo(self) -> dict:
        """Plain-data copy for metrics and checkpoints (warnings dropped)."""
        d = asdict(self)
        d.pop("warnings")
        d["widths"] = list(self.widths)
        return d

    def iterations_per_epoch(self, n_train: int) -> int:
        return max(1, n_train // min(self.batch_size, n_train))

    def exploration(self, n_train: int) -> ExplorationConfig:
        """Translate epoch-based settings into the iteration grid."""
        ipe = self.iterations_per_epoch(n_train)
        total = self.epochs * ipe
        dt = self.dt_iters if self.dt_iters > 0 else max(1, int(round(self.dt_epochs * ipe)))
        t_max = int(math.floor(self.t_max_fraction * total / dt + 1e-9)) * dt
        if t_max < dt:
            if self.mode in ("chex", "gradual"):
                raise ConfigError(f"dt ({dt} iterations) leaves no exploration step within t_max", key="dt_iters")
            dt = t_max = total
        try:
            return ExplorationConfig(
                total_iters=total, dt=dt, t_max=t_max, mode=self.mode, S=self.S, delta0=self.delta0,
                scheduler=self.scheduler, init_scheme=self.init_scheme, sampling=self.sampling, lr=self.lr,
                momentum=self.momentum, weight_decay=self.weight_decay, warmup_fraction=self.warmup_fraction,
                label_smoothing=self.label_smoothing, batch_size=self.batch_size, eval_every=self.eval_every,
                seed=self.seed,
            )
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc)) from exc


_FIELDS = {f.name: f for f in fields(ExperimentConfig) if f.name != "warnings"}
_DEFAULTS = ExperimentConfig()


def _coerce(key, value):
    default = getattr(_DEFAULTS, key)
    try:
        if isinstance(default, bool):
            raise TypeError
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)) or not value:
                raise TypeError
            out = tuple(int(v) for v in value)
            if any(isinstance(v, bool) or int(v) != v for v in value):
                raise TypeError
            return out
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"{key} has invalid value {value!r} (expected {type(default).__name__})", key=key)


def _check(cfg: ExperimentConfig) -> None:
    def need(ok, key, msg):
        if not ok:
            raise ConfigError(f"{key} = {getattr(cfg, key)!r}: {msg}", key=key)

    need(cfg.mode in MODES, "mode", f"must be one of {', '.join(MODES)}")
    need(0.0 <= cfg.S < 1.0, "S", "must be in [0, 1)")
    need(0.0 < cfg.delta0 <= 1.0, "delta0", "must be in (0, 1]")
    need(0.0 < cfg.t_max_fraction <= 1.0, "t_max_fraction", "must be in (0, 1]")
    need(cfg.dt_iters >= 0, "dt_iters", "must be >= 1 (or 0 to use dt_epochs)")
    need(cfg.dt_epochs > 0.0, "dt_epochs", "must be positive")
    need(cfg.scheduler in SCHEDULER_KINDS, "scheduler", f"must be one of {', '.join(SCHEDULER_KINDS)}")
    need(cfg.init_scheme in INIT_SCHEMES, "init_scheme", f"must be one of {', '.join(INIT_SCHEMES)}")
    need(cfg.sampling in SAMPLING_MODES, "sampling", f"must be one of {', '.join(SAMPLING_MODES)}")
    need(len(cfg.widths) >= 3 and min(cfg.widths) >= 1, "widths", "need input, >= 1 hidden layer and classes, all >= 1")
    need(cfg.bn_mode in BN_MODES, "bn_mode", f"must be one of {', '.join(BN_MODES)}")
    need(cfg.epochs >= 1, "epochs", "must be >= 1")
    need(cfg.batch_size >= 2, "batch_size", "must be >= 2")
    need(cfg.lr > 0.0, "lr", "must be positive")
    need(0.0 <= cfg.momentum < 1.0, "momentum", "must be in [0, 1)")
    need(cfg.weight_decay >= 0.0, "weight_decay", "must be non-negative")
    need(0.0 <= cfg.warmup_fraction < 1.0, "warmup_fraction", "must be in [0, 1)")
    need(0.0 <= cfg.label_smoothing < 1.0, "label_smoothing", "must be in [0, 1)")
    need(cfg.eval_every >= 0, "eval_every", "must be >= 0")
    need(cfg.dataset in DATASETS, "dataset", f"must be one of {', '.join(DATASETS)}")
    need(cfg.dataset != "idx" or (cfg.idx_images and cfg.idx_labels), "dataset", "idx needs idx_images and idx_labels")
    need(cfg.classes >= 2, "classes", "must be >= 2")
    need(cfg.n >= 10 * cfg.classes, "n", "must be at least 10 per class")
    need(cfg.noise >= 0.0, "noise", "must be non-negative")


def make_config(values: dict, *, explicit=None) -> ExperimentConfig:
    """Validated config from a key-value mapping; unknown keys become warnings.

    ``explicit`` names the keys the user actually set (defaults to ``values``)
    and drives the warnings about settings the chosen mode ignores.
    """
    warnings, clean = [], {}
    for key, value in values.items():
        if key not in _FIELDS:
            warnings.append(f"unknown key {key!r} ignored")
            continue
        clean[key] = _coerce(key, value)
    cfg = replace(_DEFAULTS, **clean)
    _check(cfg)
    for key in sorted(set(values if explicit is None else explicit) & set(_USED_BY)):
        if cfg.mode not in _USED_BY[key]:
            warnings.append(f"{key} has no effect in mode {cfg.mode!r}")
    return replace(cfg, warnings=tuple(warnings))


def parse_config_text(text: str) -> dict:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    for key, value in doc.items():
        if isinstance(value, dict):
            raise ConfigError(f"{key}: tables are not supported, the config is flat", key=key)
    return doc


def load_config(path) -> ExperimentConfig:
    """Read and validate a flat TOML config file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return make_config(parse_config_text(text))


def resolve_config(path=None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    """Defaults, then the file, then ``CHEX_SEED``, then CLI overrides."""
    environ = os.environ if environ is None else environ
    values = {}
    if path:
        try:
            values = parse_config_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    env_seed = environ.get(SEED_ENV)
    if env_seed not in (None, ""):
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env_seed!r} is not an integer", key="seed") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return make_config(values)

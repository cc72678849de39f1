"""Run configuration: nested dataclasses, JSON loading, dotted overrides, digests."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

MODES = (
    "target-only",
    "source-only",
    "fine-tune",
    "gradmix",
    "gradmix-no-adalr",
    "gradmix-pseudo-hard",
    "gradmix-pseudo-soft",
)


class ConfigError(ValueError):
    pass


@dataclass
class SourceConfig:
    name: str
    classes: list[int]
    head: str
    relation: str = "same"
    shift: list = field(default_factory=list)  # e.g. ["invert", ["gaussian-noise", 0.2]]
    n_images: int = 2000


def _default_sources():
    return [
        SourceConfig("shifted-5-9", [5, 6, 7, 8, 9], "digits-5-9", "same",
                     ["invert", ["gaussian-noise", 0.2]]),
        SourceConfig("mnist-0-4", [0, 1, 2, 3, 4], "digits-0-4", "disjoint"),
    ]


@dataclass
class DataConfig:
    kind: str = "bundled"  # bundled | idx | synthetic
    data_dir: str | None = None  # idx: directory with the four MNIST files
    image_size: int = 14  # 28x28 digits are block-averaged down to this size
    test_size: int = 1000  # carved from the pool when no separate test file exists
    hyper_val_size: int = 1000
    seed: int = 0  # source subsets, shift noise, test carve-out
    synthetic_per_class: int = 300


@dataclass
class ArchConfig:
    widths: list[int] = field(default_factory=lambda: [8, 8, 16, 16])
    hidden: int = 64


@dataclass
class SolverSettings:
    max_iter: int = 200
    restarts: int = 3
    tol: float = 1e-9
    mode: str = "layerwise"  # layerwise | global
    method: str = "nnls"  # nnls (exact cone projection) | pga (projected gradient ascent)


@dataclass
class PseudoConfig:
    R: int = 3
    threshold: float = 0.8
    per_class: int = 100
    betas: list[float] = field(default_factory=lambda: [5, 6, 7, 8, 9, 10])
    gammas: list[float] = field(default_factory=lambda: [0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    kl_direction: str = "target||model"
    val_batch_size: int | None = None  # None: full (enlarged) V every step


@dataclass
class RunConfig:
    mode: str = "gradmix"
    sources: list[SourceConfig] = field(default_factory=_default_sources)
    target_name: str = "mnist-5-9"
    target_classes: list[int] = field(default_factory=lambda: [5, 6, 7, 8, 9])
    k_per_class: int = 5
    alpha: float = 0.05
    momentum: float = 0.9
    beta: float = 10.0
    gamma: float = 0.6
    finetune_lr: float = 0.005
    batch_size: int = 64
    steps: int = 3000
    finetune_steps: int = 500
    eval_every: int = 100
    seed: int = 0
    early_stopping: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    solver: SolverSettings = field(default_factory=SolverSettings)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        same = [s.name for s in self.sources if s.relation == "same"]
        if len(same) != 1:
            raise ConfigError(f"exactly one source must have relation 'same', got {same}")
        src = next(s for s in self.sources if s.relation == "same")
        if sorted(src.classes) != sorted(self.target_classes):
            raise ConfigError(f"source {src.name!r} is marked 'same' but its classes differ from the target")
        for s in self.sources:
            if s.relation not in ("same", "partial-overlap", "disjoint"):
                raise ConfigError(f"source {s.name!r}: bad relation {s.relation!r}")
        heads = {}
        for s in self.sources:
            if heads.setdefault(s.head, sorted(s.classes)) != sorted(s.classes):
                raise ConfigError(f"head {s.head!r} is shared by sources with different classes")
        if self.alpha <= 0 or self.finetune_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.k_per_class < 1 or self.batch_size < 1 or self.eval_every < 1 or self.steps < 0:
            raise ConfigError("k_per_class, batch_size and eval_every must be >= 1; steps >= 0")
        if self.data.kind not in ("bundled", "idx", "synthetic"):
            raise ConfigError(f"unknown data kind {self.data.kind!r}")
        if self.pseudo.R < 1:
            raise ConfigError("ensemble size R must be >= 1")
        if self.solver.mode not in ("layerwise", "global"):
            raise ConfigError(f"unknown solver mode {self.solver.mode!r}")
        if self.solver.method not in ("nnls", "pga"):
            raise ConfigError(f"unknown solver method {self.solver.method!r}")
        return self

    @property
    def target_head(self) -> str:
        return next(s.head for s in self.sources if s.relation == "same")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return from_dict({**self.to_dict(), **changes})


def _build(cls, data: dict, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(path + k for k in unknown))}")
    kwargs = {}
    for key, value in data.items():
        nested = _NESTED.get((cls, key))
        if nested is SourceConfig:
            value = [_build(SourceConfig, v, f"{path}{key}[{i}].") for i, v in enumerate(value)]
        elif nested is not None:
            value = _build(nested, value, f"{path}{key}.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


_NESTED = {
    (RunConfig, "sources"): SourceConfig,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "arch"): ArchConfig,
    (RunConfig, "solver"): SolverSettings,
    (RunConfig, "pseudo"): PseudoConfig,
}


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data).validate()


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_dict(data)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Applies ``a.b=value`` overrides; values are parsed as JSON when possible."""
    data = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if isinstance(node, list) and p.isdigit() and int(p) < len(node):
                node = node[int(p)]
            elif isinstance(node, dict) and p in node:
                node = node[p]
            else:
                raise ConfigError(f"unknown config key {key!r}")
        last = parts[-1]
        if isinstance(node, list) and last.isdigit() and int(last) < len(node):
            node[int(last)] = _parse_value(raw)
        elif isinstance(node, dict) and last in node:
            node[last] = _parse_value(raw)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return from_dict(data)


def config_digest(cfg: RunConfig) -> str:
    from .datasets import digest

    return digest(cfg.to_dict())

"""Experiment configuration: an INI file with [dataset], [model], [experiment].

Every key is optional. Defaults give 10 initial labels, queries of 10, head
weights 0.1/0.3/0.6 and a 139/20/50 split::

    [dataset]
    resolution = 64x64
    n_train = 139
    n_val = 20
    n_test = 50
    shapes_min = 3
    shapes_max = 8
    noise_sigma = 0.08
    illumination = 0.2
    fg_level = 0.75
    bg_level = 0.2
    seed = 0

    [model]
    depth = 3
    base_channels = 8
    aux_stage_lower = 0
    aux_stage_middle = 1
    alpha_l = 0.1
    alpha_m = 0.3
    alpha_f = 0.6

    [experiment]
    policies = consistency_high, random
    query_size = 10
    n_init = 10
    label_budget = 139        # "pool" = all training samples
    epochs_per_round = 20
    batch_size = 8
    learning_rate = 0.001
    reference_epochs = 100    # full-annotation baseline; 0 disables it
    seeds = 0
    output_dir = runs
    data_dir =                # defaults to <output_dir>/data
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

from .active import POLICY_KINDS, QueryPolicy, TrainConfig
from .data import DatasetConfig
from .segnet import ConfigError, LossWeights, ModelConfig

SECTIONS = {
    "dataset": {"resolution", "n_train", "n_val", "n_test", "shapes_min", "shapes_max", "noise_sigma",
                "illumination", "fg_level", "bg_level", "seed"},
    "model": {"depth", "base_channels", "aux_stage_lower", "aux_stage_middle", "alpha_l", "alpha_m",
              "alpha_f", "dtype"},
    "experiment": {"policies", "query_size", "n_init", "label_budget", "epochs_per_round", "batch_size",
                   "learning_rate", "reference_epochs", "seeds", "output_dir", "data_dir"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    policies: Tuple[QueryPolicy, ...] = (QueryPolicy("consistency_high"), QueryPolicy("random"))
    n_init: int = 10
    label_budget: Optional[int] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    reference_epochs: int = 100
    seeds: Tuple[int, ...] = (0,)
    output_dir: str = "runs"
    data_dir: Optional[str] = None

    def __post_init__(self):
        budget = self.budget
        if self.n_init < 1:
            raise ConfigError("n_init must be >= 1")
        if budget < self.n_init:
            raise ConfigError(f"label_budget {budget} is below n_init {self.n_init}")
        if self.n_init > self.dataset.n_train:
            raise ConfigError(f"n_init {self.n_init} exceeds pool size {self.dataset.n_train}")
        if self.dataset.resolution != self.model.input_size:
            raise ConfigError(f"dataset resolution {self.dataset.resolution} != model input {self.model.input_size}")
        if not self.policies:
            raise ConfigError("at least one policy is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.train.epochs_per_round < 1 or self.train.batch_size < 1 or self.train.learning_rate <= 0:
            raise ConfigError("epochs_per_round, batch_size and learning_rate must be positive")

    @property
    def budget(self) -> int:
        pool = self.dataset.n_train
        return pool if self.label_budget is None else min(self.label_budget, pool)

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.output_dir) / "data"

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "policies": [[p.kind, p.k] for p in self.policies],
            "n_init": self.n_init,
            "label_budget": self.budget,
            "train": {"epochs_per_round": self.train.epochs_per_round, "batch_size": self.train.batch_size,
                      "learning_rate": self.train.learning_rate},
            "reference_epochs": self.reference_epochs,
            "seeds": list(self.seeds),
        }

    def digest(self) -> str:
        """SHA-256 of the canonical JSON of every field that affects results."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _get(section, key, conv, default):
    if section is None or key not in section or section[key].strip() == "":
        return default
    raw = section[key].strip()
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key} = {raw!r}: {exc}") from None


def _resolution(raw: str) -> Tuple[int, int]:
    parts = raw.lower().replace(",", "x").split("x")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError("expected HxW")
    return int(parts[0]), int(parts[1])


def _int_list(raw: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in raw.replace(",", " ").split())


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        unknown = set(cp[name]) - SECTIONS[name]
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    base = base or ExperimentConfig()
    ds = cp["dataset"] if cp.has_section("dataset") else None
    md = cp["model"] if cp.has_section("model") else None
    ex = cp["experiment"] if cp.has_section("experiment") else None
    d0 = base.dataset
    try:
        dataset = DatasetConfig(
            resolution=_get(ds, "resolution", _resolution, d0.resolution),
            n_train=_get(ds, "n_train", int, d0.n_train),
            n_val=_get(ds, "n_val", int, d0.n_val),
            n_test=_get(ds, "n_test", int, d0.n_test),
            shapes_per_image=(_get(ds, "shapes_min", int, d0.shapes_per_image[0]),
                              _get(ds, "shapes_max", int, d0.shapes_per_image[1])),
            noise_sigma=_get(ds, "noise_sigma", float, d0.noise_sigma),
            illumination=_get(ds, "illumination", float, d0.illumination),
            fg_level=_get(ds, "fg_level", float, d0.fg_level),
            bg_level=_get(ds, "bg_level", float, d0.bg_level),
            seed=_get(ds, "seed", int, d0.seed),
        )
        m0 = base.model
        w0 = m0.loss_weights
        model = ModelConfig(
            depth=_get(md, "depth", int, m0.depth),
            base_channels=_get(md, "base_channels", int, m0.base_channels),
            input_size=dataset.resolution,
            aux_stage_lower=_get(md, "aux_stage_lower", int, m0.aux_stage_lower),
            aux_stage_middle=_get(md, "aux_stage_middle", int, m0.aux_stage_middle),
            loss_weights=LossWeights(_get(md, "alpha_l", float, w0.alpha_l),
                                     _get(md, "alpha_m", float, w0.alpha_m),
                                     _get(md, "alpha_f", float, w0.alpha_f)),
            seed=m0.seed,
            dtype=_get(md, "dtype", str, m0.dtype),
        )
        k = _get(ex, "query_size", int, base.policies[0].k)
        kinds = _get(ex, "policies", lambda r: [p.strip() for p in r.split(",") if p.strip()],
                     [p.kind for p in base.policies])
        for kind in kinds:
            if kind not in POLICY_KINDS:
                raise ConfigError(f"unknown policy {kind!r}; expected one of {', '.join(POLICY_KINDS)}")
        budget_raw = ex.get("label_budget", "").strip() if ex is not None else ""
        if budget_raw.lower() == "pool":
            budget = None
        else:
            budget = _get(ex, "label_budget", int, base.label_budget)
        t0 = base.train
        return ExperimentConfig(
            dataset=dataset,
            model=model,
            policies=tuple(QueryPolicy(kind, k) for kind in kinds),
            n_init=_get(ex, "n_init", int, base.n_init),
            label_budget=budget,
            train=TrainConfig(_get(ex, "epochs_per_round", int, t0.epochs_per_round),
                              _get(ex, "batch_size", int, t0.batch_size),
                              _get(ex, "learning_rate", float, t0.learning_rate)),
            reference_epochs=_get(ex, "reference_epochs", int, base.reference_epochs),
            seeds=_get(ex, "seeds", _int_list, base.seeds),
            output_dir=_get(ex, "output_dir", str, base.output_dir),
            data_dir=_get(ex, "data_dir", str, base.data_dir),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def override(cfg: ExperimentConfig, output: Optional[str] = None, seed: Optional[int] = None,
             policy: Optional[str] = None) -> ExperimentConfig:
    """Apply CLI flag overrides."""
    changes = {}
    if output is not None:
        changes["output_dir"] = output
    if seed is not None:
        changes["seeds"] = (int(seed),)
    if policy is not None:
        if policy not in POLICY_KINDS:
            raise ConfigError(f"unknown policy {policy!r}; expected one of {', '.join(POLICY_KINDS)}")
        changes["policies"] = (QueryPolicy(policy, cfg.policies[0].k),)
    return replace(cfg, **changes) if changes else cfg

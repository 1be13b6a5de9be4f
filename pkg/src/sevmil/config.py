"""Experiment configuration: a strict YAML schema mapped onto library objects."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .hierarchy import Hierarchy
from .losses import HyperParams
from .remix import SfrParams
from .synth import SynthSpec, make_centers
from .trainer import TrainConfig


class ConfigError(ValueError):
    code = "config-invalid"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LevelConfig(_Strict):
    names: list[str]
    parents: Optional[list[int]] = None
    tiers: Optional[list[list[int]]] = None
    more_urgent: list[tuple[int, int]] = Field(default_factory=list)
    equivalent: list[tuple[int, int]] = Field(default_factory=list)


class HierarchyConfig(_Strict):
    levels: list[LevelConfig]

    def build(self) -> Hierarchy:
        return Hierarchy.build([lvl.model_dump() for lvl in self.levels])


class SynthConfig(_Strict):
    feature_dim: int = Field(16, ge=1)
    instances_per_bag: tuple[int, int] = (4, 12)
    noise_sigma: float = Field(1.5, gt=0)
    background_fraction: float = Field(0.3, ge=0, lt=1)
    bags_per_class: int = Field(300, ge=1)
    center_separation: float = Field(3.0, gt=0)
    class_centers: Optional[list[list[float]]] = None
    background_center: Optional[list[float]] = None


class LossConfig(_Strict):
    name: Literal["ce", "weighted_ce", "msce", "msce_ha", "hxe", "co2", "cdw_ce"] = "msce_ha"
    alpha: float = Field(1.6, gt=1)
    lambda1: float = Field(2.0, ge=0)
    lambda2: float = Field(1.0, ge=0)
    delta_co2: float = Field(0.05, ge=0)
    lambda_co2: float = Field(1.0, ge=0)
    alpha_cdw: float = Field(1.0, ge=1)
    alpha_hxe: float = Field(0.1, ge=0)
    class_weights: Optional[list[list[float]]] = None


class RemixConfig(_Strict):
    method: Literal["none", "sfr", "random_mix"] = "none"
    prob: float = Field(0.25, ge=0, le=1)
    L: int = Field(11, ge=2)
    T: int = Field(6, ge=0)
    k: int = Field(6, ge=1)
    fraction: float = Field(0.5, gt=0, le=1)
    literal_argmin: bool = False

    @model_validator(mode="after")
    def _k_below_L(self):
        if self.k >= self.L:
            raise ValueError(f"remix.k must be smaller than remix.L (k={self.k}, L={self.L})")
        return self


class TrainSection(_Strict):
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-4, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class MetricsConfig(_Strict):
    P: float = Field(2.0, ge=0)
    risk_factor: float = Field(0.5, gt=0)
    literal_indexing: bool = False


class ExperimentConfig(_Strict):
    hierarchy: HierarchyConfig
    synth: SynthConfig = Field(default_factory=SynthConfig)
    train: TrainSection = Field(default_factory=TrainSection)
    loss: LossConfig = Field(default_factory=LossConfig)
    remix: RemixConfig = Field(default_factory=RemixConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    seed: int = 0
    output_dir: str = "out"

    def build_hierarchy(self) -> Hierarchy:
        h = self.hierarchy.build()
        problems = h.validate()
        if problems:
            raise ConfigError("hierarchy invalid: " + "; ".join(problems))
        return h

    def hyper_params(self) -> HyperParams:
        lc = self.loss
        cw = None if lc.class_weights is None else tuple(tuple(w) for w in lc.class_weights)
        return HyperParams(lc.alpha, lc.lambda1, lc.lambda2, lc.delta_co2, lc.lambda_co2,
                           lc.alpha_cdw, lc.alpha_hxe, cw)

    def sfr_params(self, seed: int | None = None) -> SfrParams:
        return SfrParams(self.remix.L, self.remix.T, self.remix.k, self.seed if seed is None else seed)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = self.train
        seed = self.seed if seed is None else seed
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, loss=self.loss.name, lr=t.lr,
                           beta1=t.beta1, beta2=t.beta2, eps=t.eps, hp=self.hyper_params(),
                           remix=self.remix.method, remix_prob=self.remix.prob,
                           random_mix_fraction=self.remix.fraction, sfr=self.sfr_params(seed), seed=seed)

    def synth_spec(self, hierarchy: Hierarchy, seed: int | None = None, id_prefix: str = "bag") -> SynthSpec:
        s = self.synth
        seed = self.seed if seed is None else seed
        C = hierarchy.n_classes(hierarchy.finest)
        if s.class_centers is not None:
            centers = np.asarray(s.class_centers, dtype=float)
        else:
            # centers depend on the config seed only, so train/test splits share them
            centers = make_centers(C, s.feature_dim, s.center_separation, self.seed)
        bg = None if s.background_center is None else np.asarray(s.background_center, dtype=float)
        return SynthSpec(hierarchy, s.feature_dim, tuple(s.instances_per_bag), centers, s.noise_sigma,
                         s.bags_per_class, s.background_fraction, bg, seed, id_prefix)

    def canonical_json(self) -> bytes:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode()


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False, default_flow_style=None)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text)
    cfg.build_hierarchy()
    return cfg

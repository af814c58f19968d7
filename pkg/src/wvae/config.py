"""Experiment configuration: nested dataclasses with strict JSON parsing,
dotted-path overrides and a deterministic echo format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .simdata import CsiConfig, pnr_from_db
from .training import TrainConfig


@dataclass
class DatasetBlock:
    k: int = 10
    n_train: int = 2557
    n_test: int = 638
    m: int = 72
    pilot_snr_db: float = 10.0
    noise_var: float = 16.0
    pnr_db: float = 3.0
    traffic_length: int = 400
    band_rate: float = 0.8
    base_rate: float = 0.05
    band_width: int | None = None

    def csi_config(self) -> CsiConfig:
        return CsiConfig(
            pilot_snr_db=self.pilot_snr_db,
            noise_var=self.noise_var,
            perturb_var=pnr_from_db(self.pnr_db) * self.noise_var,
            m=self.m,
        )


@dataclass
class ModelBlock:
    z_card: int = 10
    widths: list[int] = field(default_factory=lambda: [64, 128])
    leaky_slope: float = 0.01
    alpha_traffic: float | None = None  # None: weight views uniformly
    csi_family: str = "gaussian-diag"  # "gaussian-full" switches the CSI head


@dataclass
class TrainBlock:
    regime: str = "unsupervised"
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    trials: int | None = None  # None: 25 supervised / 40 otherwise
    label_fraction: float = 0.5


@dataclass
class SweepBlock:
    pnr_grid_db: list[float] = field(default_factory=lambda: [float(v) for v in range(3, 13)])
    alpha_grid: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    z_min: int = 2
    z_max: int = 16
    detect_trials: int = 3


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    sweep: SweepBlock = field(default_factory=SweepBlock)

    def train_config(self, n_views: int = 2) -> TrainConfig:
        """Resolve the model+train blocks into the trial runner's config."""
        alphas = None
        if self.model.alpha_traffic is not None:
            if n_views != 2:
                raise ValueError("alpha_traffic shortcut assumes two views")
            alphas = (self.model.alpha_traffic, 1.0 - self.model.alpha_traffic)
        families = None
        if self.model.csi_family != "gaussian-diag":
            families = ("bernoulli", self.model.csi_family)
        return TrainConfig(
            regime=self.train.regime,
            epochs=self.train.epochs,
            batch_size=self.train.batch_size,
            learning_rate=self.train.learning_rate,
            trials=self.train.trials,
            z_card=self.model.z_card,
            alphas=alphas,
            label_fraction=self.train.label_fraction,
            seed=self.seed,
            widths=tuple(self.model.widths),
            leaky_slope=self.model.leaky_slope,
            families=families,
        )


_BLOCKS = {
    "dataset": DatasetBlock,
    "model": ModelBlock,
    "train": TrainBlock,
    "sweep": SweepBlock,
}


def _from_dict(cls, data: dict, path: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ValueError(
            f"unknown config key(s) at {path or 'top level'}: {sorted(unknown)}"
        )
    kwargs = {}
    for name, value in data.items():
        if name in _BLOCKS:
            if not isinstance(value, dict):
                raise ValueError(f"config block {name!r} must be an object")
            kwargs[name] = _from_dict(_BLOCKS[name], value, f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data, "")


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(path, config: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def apply_override(config: ExperimentConfig, assignment: str) -> None:
    """Apply one `dotted.key=value` override; values parse as JSON first."""
    if "=" not in assignment:
        raise ValueError(f"override {assignment!r} must look like key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    target = config
    parts = key.split(".")
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ValueError(f"unknown config key {key!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or leaf not in {
        f.name for f in dataclasses.fields(target)
    }:
        raise ValueError(f"unknown config key {key!r}")
    setattr(target, leaf, value)

"""Experiment configuration: one JSON document per run."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .graphnet import GnnConfig
from .icfactor import FactorizationConfig
from .pcg import DEFAULT_TOLERANCES
from .pdegen import DEFAULT_CORR_LEN
from .training import LossSpec, TrainConfig


@dataclass(frozen=True)
class GeneralizeConfig:
    grids: tuple[int, ...] = (32, 64)
    variances: tuple[float, ...] = (0.1, 0.5, 0.7)
    memory_budget_mb: float = 2048.0
    same_dataset_baseline: bool = False


@dataclass(frozen=True)
class SpectrumConfig:
    samples: int = 1
    lanczos_iters: int = 300
    dense_limit: int = 1024  # full spectrum and histograms up to this n


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    equation: str = "diffusion"
    grid_n: int = 32
    variance: float = 0.5
    corr_len: float = DEFAULT_CORR_LEN
    n_train: int = 100
    n_test: int = 50
    seed: int = 42
    dataset_dir: str | None = None  # default: <out>/dataset
    manifest_kappa: bool = True
    factorizations: tuple[FactorizationConfig, ...] = (FactorizationConfig("ic0"), FactorizationConfig("ict", p=1))
    learn_on: FactorizationConfig = FactorizationConfig("ic0")
    gnn: GnnConfig = GnnConfig()
    loss: LossSpec = LossSpec()
    train: TrainConfig = TrainConfig()
    tolerances: tuple[float, ...] = DEFAULT_TOLERANCES
    max_iters: int | None = None
    generalize: GeneralizeConfig = GeneralizeConfig()
    spectrum: SpectrumConfig = SpectrumConfig()

    def __post_init__(self):
        if self.equation not in ("diffusion", "poisson"):
            raise ConfigError(f"unknown equation {self.equation!r}")
        if self.grid_n < 2:
            raise ConfigError("grid_n must be at least 2")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be positive")
        if self.variance < 0 or not 0 < self.corr_len <= 1:
            raise ConfigError("variance must be >= 0 and corr_len in (0, 1]")
        if not self.factorizations:
            raise ConfigError("at least one factorization is required")
        labels = [f.label for f in self.factorizations]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate factorizations {labels}")
        if not self.tolerances or any(a <= b for a, b in zip(self.tolerances, self.tolerances[1:])):
            raise ConfigError("tolerances must be strictly decreasing")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self, *keys: str) -> str:
        """sha256 of the canonical JSON of the selected top-level keys."""
        d = self.to_dict()
        sub = {k: d[k] for k in (keys or sorted(d))}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()

    def dataset_keys(self) -> dict:
        return {k: getattr(self, k) for k in ("equation", "grid_n", "variance", "corr_len", "n_train", "n_test", "seed")}

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    "learn_on": FactorizationConfig,
    "gnn": GnnConfig,
    "loss": LossSpec,
    "train": TrainConfig,
    "generalize": GeneralizeConfig,
    "spectrum": SpectrumConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    data = dict(data)
    for key, cls in _NESTED.items():
        if key in data:
            data[key] = _build(cls, data[key], key)
    if "factorizations" in data:
        if not isinstance(data["factorizations"], (list, tuple)):
            raise ConfigError("factorizations: expected a list")
        data["factorizations"] = tuple(_build(FactorizationConfig, f, "factorizations") for f in data["factorizations"])
    if "tolerances" in data:
        try:
            data["tolerances"] = tuple(float(t) for t in data["tolerances"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"tolerances: {exc}") from exc
    return _build(ExperimentConfig, data, "config")


def load_config(path) -> tuple[ExperimentConfig, str]:
    """Parse a config file; also returns the raw text for the echo."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data), text

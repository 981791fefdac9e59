"""
Experiment configuration schema

Experiment presets are YAML files validated here. Unknown keys are errors
so that a typo cannot silently change a sweep.
"""

import copy
import os
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from discovery.errors import ConfigError, GenomeError
from discovery.genome import parse_genome

PDE_PARAMS: Dict[str, set] = {
    "kdv": {"nu", "n_modes", "t_end", "nt", "dt"},
    "ks": {"n_fine", "t_end", "nt", "dt"},
    "convdiff": {"v", "nx", "nt", "t_end", "length", "dt", "boundary"},
    "wave": {"nx", "nt", "t_end", "length", "dt"},
    "boussinesq": {"nx", "nt", "t_end", "length", "dt"},
}

# name of the spatially varying coefficient each heterogeneous solver takes
HETERO_FIELDS: Dict[str, str] = {"convdiff": "D", "wave": "EA", "boussinesq": "K"}

DEFAULT_EPSILON = {"integral": 1e-3, "differential": 1e-3, "hetero": 1e-5}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _ordered(value: Tuple[float, float]) -> Tuple[float, float]:
    if not value[1] > value[0]:
        raise ValueError(f"range {value} must be increasing")
    return value


class FieldBlock(StrictModel):
    kind: Literal["kle", "constant"] = "kle"
    value: float = 1.0
    variance: float = Field(1.0, gt=0)
    correlation_length: Optional[float] = Field(None, gt=0)
    n_modes: int = Field(12, ge=1)
    mean: float = 0.0
    seed: int = Field(0, ge=0)


class DatasetBlock(StrictModel):
    pde: Literal["kdv", "ks", "convdiff", "wave", "boussinesq"]
    params: Dict[str, Union[int, float, str]] = Field(default_factory=dict)
    field: Optional[FieldBlock] = None
    file: Optional[str] = None
    noise: float = Field(0.0, ge=0)
    noise_seed: int = Field(0, ge=0)
    subsample: int = Field(..., ge=1)
    subsample_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_params(self) -> "DatasetBlock":
        unknown = set(self.params) - PDE_PARAMS[self.pde]
        if unknown:
            raise ValueError(f"unknown {self.pde} parameters: {sorted(unknown)}")
        if self.pde in HETERO_FIELDS:
            if self.field is None:
                self.field = FieldBlock()
        elif self.field is not None:
            raise ValueError(f"{self.pde} takes no coefficient field")
        if self.file is not None and not os.path.exists(self.file):
            raise ValueError(f"dataset file {self.file} does not exist")
        return self


class TrainBlock(StrictModel):
    learning_rate: float = Field(1e-3, gt=0)
    steps: int = Field(30000, ge=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    batch_size: int = Field(0, ge=0)
    seed: int = Field(0, ge=0)
    report_every: int = Field(1000, ge=1)


class SurrogateBlock(StrictModel):
    hidden_layers: int = Field(5, ge=1)
    width: int = Field(50, ge=1)
    train: TrainBlock = Field(default_factory=TrainBlock)
    network_file: Optional[str] = None

    @field_validator("network_file")
    @classmethod
    def file_exists(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and not os.path.exists(value):
            raise ValueError(f"network file {value} does not exist")
        return value


class MetaBlock(StrictModel):
    x_range: Tuple[float, float]
    t_range: Tuple[float, float]
    nx: int = Field(500, ge=2)
    nt: int = Field(100, ge=2)
    allow_extrapolation: bool = False

    @field_validator("x_range", "t_range")
    @classmethod
    def ordered(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        return _ordered(value)


class GenomeBlock(StrictModel):
    max_order: int = Field(3, ge=0, le=4)
    max_genes_per_module: int = Field(3, ge=1)
    max_modules: int = Field(5, ge=1)
    lhs_choices: List[int] = Field(default_factory=lambda: [1, 2])

    @field_validator("lhs_choices")
    @classmethod
    def valid_lhs(cls, value: List[int]) -> List[int]:
        if not value or any(v not in (1, 2) for v in value):
            raise ValueError("lhs_choices must be a non-empty subset of [1, 2]")
        return sorted(set(value))


class GaBlock(StrictModel):
    population_size: int = Field(200, ge=2)
    generations: int = Field(100, ge=0)
    p_cross: float = Field(0.8, ge=0, le=1)
    p_mut: float = Field(0.2, ge=0, le=1)
    seed: int = Field(0, ge=0)
    genome: GenomeBlock = Field(default_factory=GenomeBlock)

    @field_validator("population_size")
    @classmethod
    def even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("population_size must be even")
        return value


class WindowBlock(StrictModel):
    n_local: int = Field(10, ge=1)
    span: Tuple[float, float]
    t_range: Tuple[float, float]
    nx: int = Field(200, ge=3)
    nt: int = Field(100, ge=2)

    @field_validator("span", "t_range")
    @classmethod
    def ordered(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        return _ordered(value)


class DiscoveryBlock(StrictModel):
    mode: Literal["integral", "differential", "hetero"] = "integral"
    epsilon: Optional[float] = Field(None, ge=0)
    interval_length: Union[Literal["2dx"], float] = 0.05
    quadrature_nodes: int = Field(5, ge=1, le=16)
    ga: GaBlock = Field(default_factory=GaBlock)
    windows: Optional[WindowBlock] = None
    expected: Optional[str] = None
    cv_threshold: float = Field(5.0, gt=0)

    @field_validator("interval_length")
    @classmethod
    def positive_length(cls, value):
        if not isinstance(value, str) and value <= 0:
            raise ValueError("interval_length must be positive or '2dx'")
        return value

    @field_validator("expected")
    @classmethod
    def parseable(cls, value: Optional[str]) -> Optional[str]:
        if value is not None:
            try:
                return parse_genome(value).notation()
            except GenomeError as e:
                raise ValueError(str(e)) from e
        return value

    @model_validator(mode="after")
    def check_mode(self) -> "DiscoveryBlock":
        if self.mode == "hetero" and self.windows is None:
            raise ValueError("hetero mode requires a windows block")
        return self

    @property
    def effective_epsilon(self) -> float:
        return self.epsilon if self.epsilon is not None else DEFAULT_EPSILON[self.mode]


class EvaluationBlock(StrictModel):
    solution_error: bool = True


class SweepBlock(StrictModel):
    kind: Literal["interval", "noise", "datasize", "variance"]
    values: List[float] = Field(..., min_length=1)


class ExperimentConfig(StrictModel):
    name: str
    dataset: DatasetBlock
    surrogate: SurrogateBlock = Field(default_factory=SurrogateBlock)
    meta: MetaBlock
    discovery: DiscoveryBlock = Field(default_factory=DiscoveryBlock)
    evaluation: EvaluationBlock = Field(default_factory=EvaluationBlock)
    sweep: Optional[SweepBlock] = None

    @model_validator(mode="after")
    def check_consistency(self) -> "ExperimentConfig":
        if self.discovery.mode == "hetero" and self.dataset.pde not in HETERO_FIELDS:
            raise ValueError(f"hetero mode needs a heterogeneous PDE, got {self.dataset.pde}")
        if self.dataset.file is None and self.dataset.subsample > _grid_size(self.dataset):
            raise ValueError("subsample exceeds the number of grid points")
        return self

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


_DEFAULT_GRID = {"kdv": (512, 201), "ks": (512, 251), "convdiff": (801, 251), "wave": (401, 251), "boussinesq": (401, 251)}


def _grid_size(block: DatasetBlock) -> int:
    nx, nt = _DEFAULT_GRID[block.pde]
    params = block.params
    if block.pde == "kdv":
        nx = int(params.get("n_modes", nx))
    elif block.pde == "ks":
        nx = int(params.get("n_fine", 2 * nx)) // 2
    else:
        nx = int(params.get("nx", nx))
    return nx * int(params.get("nt", nt))


def validate_experiment(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config:\n{e}") from e


def load_experiment(path: str) -> ExperimentConfig:
    """Read and validate an experiment YAML file"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Experiment config {path} not found") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} does not contain a mapping")
    return validate_experiment(data)


def with_overrides(config: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """Apply dotted-path overrides, e.g. {"dataset.noise": 0.05}, and re-validate"""
    data = copy.deepcopy(config.echo())
    for path, value in overrides.items():
        node = data
        keys = path.split(".")
        for key in keys[:-1]:
            if node.get(key) is None:
                node[key] = {}
            node = node[key]
        node[keys[-1]] = value
    return validate_experiment(data)


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Master seed for every stochastic stage except the planted field"""
    return with_overrides(
        config,
        {
            "dataset.noise_seed": seed,
            "dataset.subsample_seed": seed,
            "surrogate.train.seed": seed,
            "discovery.ga.seed": seed,
        },
    )

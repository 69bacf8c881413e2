"""
JSON run configuration: model descriptor, jump atoms, initial measure and solver settings
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, validator

from .config import Config
from .exceptions import ConfigError
from .lqoracle import LQSpec
from .measure import EmpiricalMeasure
from .models import AssumptionConstants, SolveConfig
from .problem import JumpMeasure, ModelSpec, affine_model, example_drift_model, with_derivative_offsets

logger = logging.getLogger(__name__)

Coefficient = Union[float, List[float]]


class JumpAtom(BaseModel):
    """One atom of the intensity measure with its affine jump coefficient"""

    mark: List[float] = Field(default_factory=lambda: [1.0], min_length=1)
    intensity: float = Field(gt=0.0)
    gamma0: Coefficient = 0.0
    gamma1: Coefficient = 0.0
    gamma2: Coefficient = 0.0

    class Config:
        extra = "forbid"


class ModelDescriptor(BaseModel):
    """Built-in model family and its coefficients"""

    kind: Literal["affine", "example_drift"] = "affine"
    a: Coefficient = 0.0
    abar: Coefficient = 0.0
    c: Coefficient = 1.0
    sigma0: Coefficient = 0.0
    sigma1: Coefficient = 0.0
    sigma2: Coefficient = 0.0
    q: Coefficient = 1.0
    qbar: Coefficient = 0.0
    r: Coefficient = 1.0
    h: Coefficient = 0.0
    hbar: Coefficient = 0.0
    epsilon: float = Field(default=0.0, description="Nonlinearity of the example drift")
    noise_loading: Optional[Coefficient] = None
    noise_cost: Optional[Coefficient] = None
    constants: Optional[AssumptionConstants] = None
    derivative_offsets: Dict[str, float] = Field(
        default_factory=dict, description="Constant offsets injected into named derivative callbacks"
    )

    class Config:
        extra = "forbid"

    @validator("r")
    def validate_r(cls, v):
        """Validate r > 0"""
        if np.any(np.asarray(v, dtype=float) <= 0.0):
            raise ValueError(f"r must be positive, got {v}")
        return v


class InitialMeasure(BaseModel):
    kind: Literal["gaussian", "empirical"] = "gaussian"
    mean: List[float] = Field(default_factory=lambda: [0.0])
    std: List[float] = Field(default_factory=lambda: [1.0])
    file: Optional[str] = Field(default=None, description="CSV of initial points, one particle per row")
    seed: int = Field(default=0, ge=0)

    class Config:
        extra = "forbid"

    @validator("file", always=True)
    def validate_file(cls, v, values):
        """Validate that empirical measures name a file"""
        if values.get("kind") == "empirical" and not v:
            raise ValueError("an empirical initial measure needs a file")
        return v


class HJBSettings(BaseModel):
    """Probe grid for the value-function derivatives"""

    probes: Optional[List[List[float]]] = None
    probe_count: int = Field(default=9, ge=3, description="Quantile probes per coordinate when probes is absent")
    copies: Optional[int] = Field(default=None, ge=1)

    class Config:
        extra = "forbid"


class RunConfig(BaseModel):
    """A complete run: exactly one of model and lq describes the problem"""

    model: Optional[ModelDescriptor] = None
    lq: Optional[LQSpec] = None
    jumps: List[JumpAtom] = Field(default_factory=list)
    initial: InitialMeasure = Field(default_factory=InitialMeasure)
    solver: SolveConfig = Field(default_factory=SolveConfig)
    hjb: HJBSettings = Field(default_factory=HJBSettings)
    output_dir: str = Config.DEFAULT_OUTPUT_DIR

    class Config:
        extra = "forbid"

    @validator("lq", always=True)
    def validate_problem(cls, v, values):
        """Validate that exactly one problem description is present"""
        if (v is None) == (values.get("model") is None):
            raise ValueError("give exactly one of 'model' and 'lq'")
        return v

    @validator("jumps")
    def validate_jumps(cls, v, values):
        """Jumps of an lq problem live in the lq block"""
        if v and values.get("lq") is not None:
            raise ValueError("an lq problem declares its jumps in lq.jumps")
        return v

    def build_model(self) -> Tuple[ModelSpec, JumpMeasure]:
        if self.lq is not None:
            return self.lq.to_model()
        d = self.model
        jm = JumpMeasure([(atom.mark, atom.intensity) for atom in self.jumps])
        jumps = [(atom.gamma0, atom.gamma1, atom.gamma2) for atom in self.jumps] or None
        if d.kind == "example_drift":
            m = example_drift_model(
                d.epsilon,
                sigma0=float(np.asarray(d.sigma0).ravel()[0]),
                q=float(np.asarray(d.q).ravel()[0]),
                qbar=float(np.asarray(d.qbar).ravel()[0]),
                r=float(np.asarray(d.r).ravel()[0]),
                h=float(np.asarray(d.h).ravel()[0]),
                hbar=float(np.asarray(d.hbar).ravel()[0]),
                jm=jm,
                jumps=jumps,
                constants=d.constants,
            )
        else:
            m = affine_model(
                d.a,
                d.abar,
                d.c,
                d.sigma0,
                d.sigma1,
                d.sigma2,
                q=d.q,
                qbar=d.qbar,
                r=d.r,
                h=d.h,
                hbar=d.hbar,
                jm=jm,
                jumps=jumps,
                constants=d.constants,
                noise_loading=d.noise_loading,
                noise_cost=d.noise_cost,
            )
        if d.derivative_offsets:
            logger.warning(f"Injecting derivative offsets {d.derivative_offsets}")
            m = with_derivative_offsets(m, d.derivative_offsets)
        return m, jm

    def initial_measure(self, base_dir: Optional[Path] = None) -> EmpiricalMeasure:
        init = self.initial
        if init.kind == "gaussian":
            return EmpiricalMeasure.gaussian(init.mean, init.std, self.solver.particles, seed=init.seed)
        path = Path(init.file)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        try:
            points = np.loadtxt(path, delimiter=",", ndmin=2)
        except OSError as e:
            raise ConfigError(f"cannot read initial measure from {path}: {e}") from e
        return EmpiricalMeasure(points)

    def probes(self, init: EmpiricalMeasure) -> np.ndarray:
        """Configured probes, or per-coordinate quantiles of the initial cloud (one coordinate varied at a time)"""
        if self.hjb.probes is not None:
            return np.asarray(self.hjb.probes, dtype=float)
        levels = np.linspace(0.05, 0.95, self.hjb.probe_count)
        center = init.mean()
        rows = []
        for b in range(init.dim):
            for value in np.quantile(init.points[:, b], levels):
                row = center.copy()
                row[b] = value
                rows.append(row)
        return np.asarray(rows)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate a JSON run configuration.

    Raises:
        ConfigError: If the file cannot be read or is not JSON
        pydantic.ValidationError: If the content does not match the schema
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot load run configuration {path}: {e}") from e
    config = RunConfig.model_validate(data)
    logger.info(f"Loaded run configuration from {path}")
    return config


def dump_run_config(config: RunConfig) -> str:
    return config.model_dump_json(indent=2, exclude_none=True)

"""
Configuration for fits (fit.json) and environment overrides

fit.json:
    {
      "data": "trials.csv",
      "model": "model.json",
      "out": "results/",
      "sampler": {"seed": 7, "particles_per_stage": {...}, ...},
      "hierarchy": {"nu": 2.0, "A_scale": 1.0},
      "analysis": {"heatmap": true, "predictive_draws": 0},
      "log_level": "INFO"
    }

Relative paths resolve against the directory of the config file.
ACCJOINT_SEED (process environment or .env) overrides sampler.seed.

Usage:
    from config import load_fit_config

    cfg = load_fit_config("fit.json")
"""

import json
import os
from pathlib import Path
from typing import List, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigurationError, DataNotFoundError, ModelNotFoundError
from hierarchy import DEFAULT_A_SCALE, DEFAULT_NU
from pmwg import SamplerConfig

load_dotenv()

SEED_ENV = "ACCJOINT_SEED"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


# ==================== SECTIONS ====================

class HierarchyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    nu: float = Field(DEFAULT_NU, ge=2.0)
    A_scale: Union[float, List[float]] = DEFAULT_A_SCALE

    @field_validator("A_scale")
    @classmethod
    def _positive(cls, v):
        values = v if isinstance(v, list) else [v]
        if any(x <= 0 for x in values):
            raise ValueError("A_scale must be positive")
        return v


class AnalysisConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    heatmap: bool = True
    heatmap_blocks: Optional[Tuple[str, str]] = None  # (row block, column block)
    predictive_draws: int = Field(0, ge=0)
    reference_chains: List[Path] = Field(default_factory=list)


class FitConfig(BaseModel):
    """Paths, sampler settings, hyperparameters and analysis toggles"""

    model_config = ConfigDict(extra="forbid")

    data: Optional[Path] = None
    model: Optional[Path] = None
    out: Optional[Path] = None
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    hierarchy: HierarchyConfig = Field(default_factory=HierarchyConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    log_level: str = "INFO"

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, v: str) -> str:
        level = v.upper()
        if level not in LOG_LEVELS:
            raise ValueError(f"log_level must be one of {LOG_LEVELS}")
        return level

    def resolved(self, base_dir: Path) -> "FitConfig":
        """Copy with every relative path anchored at base_dir"""
        def anchor(p: Optional[Path]) -> Optional[Path]:
            if p is None or p.is_absolute():
                return p
            return (base_dir / p).resolve()

        return self.model_copy(update={
            "data": anchor(self.data),
            "model": anchor(self.model),
            "out": anchor(self.out),
            "analysis": self.analysis.model_copy(
                update={"reference_chains": [anchor(p) for p in self.analysis.reference_chains]}),
        })

    def validate_paths(self) -> None:
        """
        Raises:
            DataNotFoundError: If the trials file is missing
            ModelNotFoundError: If the model spec is missing
            ConfigurationError: If a reference chain is missing or out is not a directory
        """
        if self.data is None or self.model is None or self.out is None:
            raise ConfigurationError("data, model and out must be set in the config or on the command line")
        if not self.data.is_file():
            raise DataNotFoundError(f"data file not found: {self.data}", path=str(self.data))
        if not self.model.is_file():
            raise ModelNotFoundError(f"model spec not found: {self.model}", path=str(self.model))
        for chain in self.analysis.reference_chains:
            if not chain.is_file():
                raise ConfigurationError(f"reference chain not found: {chain}", path=str(chain))
        if self.out.exists() and not self.out.is_dir():
            raise ConfigurationError(f"output path is not a directory: {self.out}", path=str(self.out))

    def with_overrides(self, seed: Optional[int] = None, workers: Optional[int] = None,
                       data: Optional[Path] = None, model: Optional[Path] = None,
                       out: Optional[Path] = None) -> "FitConfig":
        """Apply ACCJOINT_SEED, then explicit CLI values"""
        sampler_update = {}
        env_seed = env_seed_override()
        if env_seed is not None:
            sampler_update["seed"] = env_seed
        if seed is not None:
            sampler_update["seed"] = seed
        if workers is not None:
            sampler_update["workers"] = workers
        try:
            sampler = SamplerConfig.model_validate({**self.sampler.model_dump(), **sampler_update})
        except ValidationError as e:
            raise ConfigurationError(f"invalid sampler override: {e.errors()[0]['msg']}") from e
        update = {"sampler": sampler}
        for key, value in (("data", data), ("model", model), ("out", out)):
            if value is not None:
                update[key] = Path(value).resolve()
        return self.model_copy(update=update)


# ==================== LOADING ====================

def env_seed_override() -> Optional[int]:
    """
    Seed from ACCJOINT_SEED, if set

    Raises:
        ConfigurationError: If the value is not a non-negative integer
    """
    raw = os.getenv(SEED_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV} must be an integer: {raw!r}")
    if seed < 0:
        raise ConfigurationError(f"{SEED_ENV} must be non-negative: {seed}")
    return seed


def load_fit_config(path: Union[str, Path], check_paths: bool = True) -> FitConfig:
    """
    Load fit.json, resolve its paths and (by default) check they exist

    Raises:
        ConfigurationError: If the file is missing, not JSON, or fails validation
        DataNotFoundError / ModelNotFoundError: If referenced inputs are missing
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}", path=str(path))
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config is not valid JSON: {e}", path=str(path)) from e
    try:
        cfg = FitConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigurationError(f"invalid config: {e.errors()[0]['msg']}", errors=str(e)) from e

    cfg = cfg.resolved(path.resolve().parent)
    if check_paths:
        cfg.validate_paths()
    return cfg

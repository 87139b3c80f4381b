"""
Configuração de experimentos.

Parâmetros de ambiente vêm do arquivo .env (python-dotenv); a configuração
de cada experimento é um documento JSON validado pelo ExperimentConfig.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from sparsetrain.dynsparse import DynSparseConfig
from sparsetrain.errors import ConfigError
from sparsetrain.nn import ModelConfig, TaskConfig
from sparsetrain.optim import AdamHyper, GroupLassoConfig, LrSchedule

# Carregar variáveis de ambiente
load_dotenv()

# Configurações
OUTPUT_DIR = os.getenv("SPARSETRAIN_OUTPUT_DIR", "runs")
MAX_WORKERS = int(os.getenv("SPARSETRAIN_MAX_WORKERS", "4"))
LOG_LEVEL = os.getenv("SPARSETRAIN_LOG_LEVEL", "INFO")

SCHEMA_VERSION = 1
DEFAULT_STEPS = 20000
DEFAULT_WARMUP_STEPS = 500
EVAL_BATCHES = 64  # batches fixos de avaliação por semente

Mode = Literal[
    "dense",
    "static",
    "dynsparse_random",
    "dynsparse_gradient",
    "freeze_half",
    "unfreeze_half",
    "zero_vs_untrained",
    "alternating",
]


def _explicit_fields(value: Union[BaseModel, dict, None]) -> dict:
    if isinstance(value, BaseModel):
        return value.model_dump(exclude_unset=True)
    return dict(value or {})


class ExperimentConfig(BaseModel):
    """
    Configuração completa de um experimento.

    Campos derivados (schedule.total_steps, dynsparse.total_steps,
    dynsparse.block_size e o warmup padrão) são preenchidos a partir de
    steps e model.block_size quando omitidos.

    Attributes:
        schema_version: Versão do esquema do arquivo (1)
        mode: Modo de treino
        seeds: Sementes usadas quando nenhuma é passada na CLI
        steps: Total de passos T
        eval_interval: Passos entre avaliações registradas no metrics.csv
        freeze_fraction: Fração não treinável nos modos freeze_half/unfreeze_half
        treatment: zero ou untrained (modo zero_vs_untrained)
        selection: fixed, magnitude ou random (modo alternating)
        non_active: zero ou untrained (modo alternating)
        active_fraction: Fração treinável nas fases restritas do modo alternating
        scale_lr_with_sparsity: Multiplica peak_lr pelo fator da regra de esparsidade
    """
    schema_version: int = SCHEMA_VERSION
    mode: Mode = "dynsparse_random"
    model: ModelConfig = Field(default_factory=ModelConfig)
    task: TaskConfig = Field(default_factory=TaskConfig)
    dynsparse: DynSparseConfig = Field(default_factory=DynSparseConfig)
    adam: AdamHyper = Field(default_factory=AdamHyper)
    schedule: LrSchedule = Field(default_factory=LrSchedule)
    group_lasso: GroupLassoConfig = Field(default_factory=GroupLassoConfig)
    seeds: List[int] = [0, 1, 2, 3, 4]
    steps: int = DEFAULT_STEPS
    batch_size: int = 32
    eval_interval: int = 500
    eval_batches: int = EVAL_BATCHES
    output_dir: str = OUTPUT_DIR
    scale_lr_with_sparsity: bool = False
    freeze_fraction: float = 0.9
    treatment: Optional[Literal["zero", "untrained"]] = None
    selection: Optional[Literal["fixed", "magnitude", "random"]] = None
    non_active: Optional[Literal["zero", "untrained"]] = None
    active_fraction: float = 0.1

    @model_validator(mode="before")
    @classmethod
    def fill_derived(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        steps = data.get("steps", DEFAULT_STEPS)
        block_size = _explicit_fields(data.get("model")).get("block_size", 1)

        schedule = _explicit_fields(data.get("schedule"))
        schedule.setdefault("total_steps", steps)
        schedule.setdefault("warmup_steps", min(DEFAULT_WARMUP_STEPS, steps // 10))
        data["schedule"] = schedule

        dynsparse = _explicit_fields(data.get("dynsparse"))
        dynsparse.setdefault("total_steps", steps)
        dynsparse.setdefault("block_size", block_size)
        data["dynsparse"] = dynsparse
        return data

    @field_validator("schema_version")
    @classmethod
    def validate_schema(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"schema_version {v} não suportada (esperado {SCHEMA_VERSION})")
        return v

    @field_validator("steps", "batch_size", "eval_interval", "eval_batches")
    @classmethod
    def validate_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("Contagens devem ser >= 1")
        return v

    @field_validator("freeze_fraction", "active_fraction")
    @classmethod
    def validate_fraction(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("Frações devem estar em [0, 1]")
        return v

    @model_validator(mode="after")
    def validate_consistency(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ValueError("seeds não pode estar vazia")
        if self.schedule.total_steps != self.steps or self.dynsparse.total_steps != self.steps:
            raise ValueError("schedule.total_steps e dynsparse.total_steps devem ser iguais a steps")
        if self.dynsparse.block_size != self.model.block_size:
            raise ValueError("dynsparse.block_size deve ser igual a model.block_size")
        if self.mode == "alternating" and (self.selection is None or self.non_active is None):
            raise ValueError("Modo alternating exige selection e non_active")
        if self.mode == "zero_vs_untrained" and self.treatment is None:
            raise ValueError("Modo zero_vs_untrained exige treatment")
        return self


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Lê e valida um arquivo JSON de configuração.

    Raises:
        ConfigError: Arquivo ausente ou configuração inválida
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Arquivo de configuração não encontrado: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"JSON inválido em {path}: {e}") from e
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Configuração inválida em {path}: {e}") from e

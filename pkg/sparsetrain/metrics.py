"""
Métricas da dinâmica de treino: graus de liberdade explorados (DOF),
atividade média das máscaras e fração de blocos novos removidos.

As máscaras só mudam nas atualizações de esparsidade, então a amostragem
é feita em t=0 e logo após cada atualização.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np
import pandas as pd

from sparsetrain.dynsparse import UpdateRecord
from sparsetrain.errors import ScheduleError, UnknownLayerError
from sparsetrain.tensor import SparsityMask

logger = logging.getLogger(__name__)

# Ordem estável das colunas do metrics.csv; DOF por camada vem depois
METRICS_COLUMNS = [
    "step",
    "loss",
    "lr",
    "dof_mean",
    "removed_new_ratio",
    "pruning_ratio",
    "flops_cumulative",
]


@dataclass
class LayerExploration:
    """União das máscaras e contagem de atividade por bloco de uma camada."""
    grid: tuple[int, int]
    union: np.ndarray
    activity: np.ndarray


@dataclass
class ExplorationState:
    """
    Estado de exploração de todas as camadas esparsas.

    Attributes:
        layers: Exploração por índice de camada
        samples: Número de instantes amostrados
    """
    layers: dict[int, LayerExploration] = field(default_factory=dict)
    samples: int = 0

    @classmethod
    def from_masks(cls, masks: Mapping[int, SparsityMask]) -> "ExplorationState":
        state = cls()
        state.observe(masks)
        return state

    def observe(self, masks: Mapping[int, SparsityMask]) -> None:
        """Registra as máscaras atuais como um instante de amostragem."""
        for index, mask in masks.items():
            layer = self.layers.get(index)
            if layer is None:
                layer = LayerExploration(
                    grid=mask.grid,
                    union=np.zeros(mask.n_blocks, dtype=bool),
                    activity=np.zeros(mask.n_blocks, dtype=np.int64),
                )
                self.layers[index] = layer
            ids = mask.block_ids
            layer.union[ids] = True
            layer.activity[ids] += 1
        self.samples += 1

    def layer(self, index: int) -> LayerExploration:
        if index not in self.layers:
            raise UnknownLayerError(f"Camada {index} não registrada")
        return self.layers[index]


def dof_explored(state: ExplorationState, layer: int) -> float:
    """
    Fração da grade densa ativada em algum momento do treino.

    Raises:
        UnknownLayerError: Se a camada não foi observada
    """
    exploration = state.layer(layer)
    return float(exploration.union.sum()) / exploration.union.size


def activity_average(state: ExplorationState, layer: int) -> np.ndarray:
    """
    Fração dos instantes amostrados em que cada bloco esteve ativo.

    Returns:
        Array com a forma da grade de blocos, valores em [0, 1]

    Raises:
        UnknownLayerError: Se a camada não foi observada
        ScheduleError: Se nenhum instante foi amostrado
    """
    exploration = state.layer(layer)
    if state.samples == 0:
        raise ScheduleError("Nenhum instante amostrado")
    return (exploration.activity / state.samples).reshape(exploration.grid)


def layer_mean(values: Union[Mapping[int, float], Iterable[float]]) -> float:
    """Média aritmética sobre as camadas."""
    items = list(values.values()) if isinstance(values, Mapping) else list(values)
    if not items:
        raise ValueError("layer_mean precisa de pelo menos uma camada")
    return float(np.mean(items))


def _coord_set(coords: Optional[np.ndarray]) -> set[tuple[int, int]]:
    if coords is None:
        return set()
    return {(int(r), int(c)) for r, c in np.asarray(coords).reshape(-1, 2)}


def removed_new_ratio(record: UpdateRecord, previous: Optional[UpdateRecord],
                      layer: Optional[int] = None) -> float:
    """
    Fração dos blocos podados na atualização k que foram alocados na k-1.

    Sem camada explícita devolve a média sobre as camadas. Quando nada é
    podado o valor é 0 por convenção.
    """
    if layer is None:
        if not record.pruned:
            return 0.0
        return layer_mean(removed_new_ratio(record, previous, i) for i in sorted(record.pruned))
    pruned = _coord_set(record.pruned.get(layer))
    if not pruned:
        return 0.0
    grown_before = _coord_set(previous.grown.get(layer)) if previous is not None else set()
    return len(pruned & grown_before) / len(pruned)


@dataclass
class MetricsRow:
    step: int
    loss: float
    lr: float
    dof_mean: float
    removed_new_ratio: float
    pruning_ratio: float
    flops_cumulative: float
    dof_layers: dict[int, float] = field(default_factory=dict)
    group_lasso_penalty: Optional[float] = None


@dataclass
class MetricsLog:
    """Série temporal das métricas de uma execução."""
    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError(f"Passo {row.step} não é maior que {self.rows[-1].step}")
        self.rows.append(row)

    def to_frame(self) -> pd.DataFrame:
        layers = sorted({i for row in self.rows for i in row.dof_layers})
        columns = METRICS_COLUMNS + [f"dof_layer_{i}" for i in layers]
        penalized = any(row.group_lasso_penalty is not None for row in self.rows)
        if penalized:
            columns.append("group_lasso_penalty")
        records = []
        for row in self.rows:
            record = {name: getattr(row, name) for name in METRICS_COLUMNS}
            record.update({f"dof_layer_{i}": row.dof_layers.get(i) for i in layers})
            if penalized:
                record["group_lasso_penalty"] = row.group_lasso_penalty
            records.append(record)
        return pd.DataFrame.from_records(records, columns=columns)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)

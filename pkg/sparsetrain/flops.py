"""
Contagem analítica de FLOPs, fator de custo crítico e regras de learning rate.

O custo de treinar uma camada com pesos esparsos e entrada densa escala
como 3·2·I·batch·O·f: forward, gradiente da entrada e produto externo
esparso, cada um com 2·I·batch·O·f. Bias, ativações e aritmética do
otimizador ficam fora da conta.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import pandas as pd

from sparsetrain.errors import DimensionError
from sparsetrain.nn import ModelConfig

logger = logging.getLogger(__name__)

# Ajustes de learning rate (log natural)
LR_FIT_QUADRATIC = 1.969
LR_FIT_LINEAR = 0.2905
LR_FIT_INTERCEPT = -8.175
LR_PARAM_SLOPE = -0.838
LR_PARAM_INTERCEPT = 6.13

PARETO_COLUMNS = ["label", "flops", "loss", "sparsity", "block_size", "status", "on_frontier"]


@dataclass(frozen=True)
class LayerFlopsSpec:
    """
    Dimensões de uma camada para a contagem de FLOPs.

    Attributes:
        input_dim: I
        output_dim: O
        batch: Tamanho do batch
        density: f = 1 - s
    """
    input_dim: int
    output_dim: int
    batch: int
    density: float = 1.0

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1 or self.batch < 1:
            raise DimensionError("I, O e batch devem ser positivos")
        if not 0.0 < self.density <= 1.0:
            raise DimensionError(f"Densidade {self.density} fora de (0, 1]")


@dataclass(frozen=True)
class ParetoPoint:
    """Um ponto da curva loss × FLOPs de treino (sem embeddings) por passo."""
    label: str
    flops: float
    loss: float
    sparsity: float
    block_size: int
    status: str = "ok"

    def __post_init__(self) -> None:
        if self.flops <= 0:
            raise ValueError("FLOPs de um ponto de Pareto devem ser positivos")


def sparse_train_flops(spec: LayerFlopsSpec) -> float:
    """FLOPs de um passo de treino: 3·2·I·batch·O·f."""
    return 3 * 2 * spec.input_dim * spec.batch * spec.output_dim * spec.density


def dense_train_flops(input_dim: int, output_dim: int, batch: int) -> int:
    """FLOPs de um passo de treino denso: 6·I·batch·O."""
    return 6 * input_dim * batch * output_dim


def forward_flops_breakdown(spec: LayerFlopsSpec) -> dict[str, float]:
    """
    Decompõe o forward esparso em multiplicações e adições.

    As adições seguem a estimativa de primeira ordem com distribuição
    uniforme de não-zeros: batch·O·(I·f - 1).
    """
    multiplies = spec.input_dim * spec.batch * spec.output_dim * spec.density
    additions = spec.batch * spec.output_dim * (spec.input_dim * spec.density - 1)
    return {"multiplies": multiplies, "additions": additions, "leading_order": 2 * multiplies}


def _layer_sparsity(sparsity: Union[float, Mapping[int, float]], index: int) -> float:
    if isinstance(sparsity, Mapping):
        return sparsity.get(index, 0.0)
    return sparsity


def model_train_flops(config: ModelConfig, sparsity: Union[float, Mapping[int, float]], batch: int) -> float:
    """
    Soma os FLOPs de treino das camadas elegíveis à esparsidade.

    Args:
        config: Configuração do modelo
        sparsity: Esparsidade única ou por camada (camadas ausentes contam como densas)
        batch: Tamanho do batch

    Returns:
        FLOPs por passo de treino, sem embeddings
    """
    total = 0.0
    for index in config.sparse_layers:
        shape = config.layer_shape(index)
        density = 1.0 - _layer_sparsity(sparsity, index)
        total += sparse_train_flops(LayerFlopsSpec(shape.cols, shape.rows, batch, density))
    return total


def model_param_count(config: ModelConfig, sparsity: Union[float, Mapping[int, float]] = 0.0) -> float:
    """Número de parâmetros não-embedding ativos, usado por lr_param_fit."""
    total = 0.0
    for index in config.sparse_layers:
        shape = config.layer_shape(index)
        total += shape.size * (1.0 - _layer_sparsity(sparsity, index))
    return total


def epsilon_critical(flops_dense: float, flops_sparse: float) -> float:
    """
    Fator de custo crítico F_denso / F_esparso.

    É a maior desaceleração por FLOP que a execução esparsa pode ter sem
    perder a vantagem em tempo de treino.

    Raises:
        ZeroDivisionError: Se flops_sparse <= 0
    """
    if flops_sparse <= 0:
        raise ZeroDivisionError("FLOPs esparsos devem ser positivos")
    return flops_dense / flops_sparse


def lr_static_fit(sparsity: float) -> float:
    """Learning rate ótimo ajustado em função da esparsidade: exp(1.969 s² + 0.2905 s - 8.175)."""
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"Esparsidade {sparsity} fora de [0, 1)")
    return math.exp(LR_FIT_QUADRATIC * sparsity ** 2 + LR_FIT_LINEAR * sparsity + LR_FIT_INTERCEPT)


def lr_sparse_factor(sparsity: float) -> float:
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"Esparsidade {sparsity} fora de [0, 1)")
    return math.exp(LR_FIT_QUADRATIC * sparsity ** 2 + LR_FIT_LINEAR * sparsity)


def lr_sparse_from_dense(lr_dense: float, sparsity: float) -> float:
    """Escala o learning rate denso para a esparsidade s; fator exatamente 1 em s=0."""
    if lr_dense <= 0:
        raise ValueError("lr_dense deve ser positivo")
    return lr_dense * lr_sparse_factor(sparsity)


def lr_param_fit(n_params: float) -> float:
    """Learning rate ótimo em função do número de parâmetros: exp(-0.838 ln N + 6.13)."""
    if n_params < 1:
        raise ValueError("N deve ser >= 1")
    return math.exp(LR_PARAM_SLOPE * math.log(n_params) + LR_PARAM_INTERCEPT)


def lr_grid(base: float, m_values: Iterable[int]) -> list[float]:
    """Grade base·2^m usada nas varreduras de learning rate."""
    return [base * 2.0 ** m for m in m_values]


def pareto_table(points: Sequence[ParetoPoint]) -> pd.DataFrame:
    """
    Tabela ordenada por FLOPs com a marcação da fronteira.

    Um ponto está na fronteira se sua loss é estritamente menor que a de
    todos os pontos mais baratos. Execuções com status diferente de ok
    continuam na tabela, mas nunca entram na fronteira.
    """
    frame = pd.DataFrame([asdict(p) for p in points], columns=PARETO_COLUMNS[:-1])
    frame = frame.sort_values(["flops", "loss"], kind="mergesort").reset_index(drop=True)
    best = math.inf
    frontier = []
    for loss, status in zip(frame["loss"], frame["status"]):
        finished = status == "ok" and math.isfinite(loss)
        frontier.append(bool(finished and loss < best))
        if finished:
            best = min(best, loss)
    frame["on_frontier"] = frontier
    return frame


def summary_path(path: Union[str, Path]) -> Path:
    """Caminho do resumo JSON gravado ao lado da tabela."""
    path = Path(path)
    if path.suffix == ".json":
        return path.with_name(f"{path.stem}.summary.json")
    return path.with_suffix(".json")


def write_pareto_table(points: Sequence[ParetoPoint], path: Union[str, Path]) -> pd.DataFrame:
    """Grava a tabela como CSV exatamente em path e um resumo JSON ao lado."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pareto_table(points)
    frame.to_csv(path, index=False)
    failed = frame.loc[frame["status"] != "ok", "label"].tolist()
    summary = {
        "points": frame.to_dict(orient="records"),
        "frontier": frame.loc[frame["on_frontier"], "label"].tolist(),
        "failed": failed,
    }
    summary_path(path).write_text(json.dumps(summary, indent=2))
    if failed:
        logger.warning("%d execução(ões) sem status ok fora da fronteira: %s", len(failed), ", ".join(failed))
    logger.info("Tabela de Pareto com %d pontos gravada em %s", len(frame), path)
    return frame

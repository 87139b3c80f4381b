"""
Agendador DynSparse: poda e realocação periódica dos blocos.

A cada fronteira floor(j·T/n), j = 1..n-1, cada camada esparsa perde a
fração p_r(k) dos blocos de menor norma L^p e recebe o mesmo número de
blocos novos (aleatórios, ou pelo gradiente denso no modo gradient). Os
blocos novos começam com valor e momentos do Adam em zero, e a
esparsidade de cada camada fica constante durante todo o treino.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from sparsetrain.errors import DegenerateSparsityError, MaskError, ScheduleError
from sparsetrain.nn import LayerGrads, Model, weight_name
from sparsetrain.optim import OptimState, realign_state, reset_moments
from sparsetrain.tensor import BlockSparseMatrix, SparsityMask, block_norms, norm_order, realign_blocks

logger = logging.getLogger(__name__)


class DynSparseConfig(BaseModel):
    """
    Configuração do treinamento esparso dinâmico.

    Attributes:
        sparsity: Esparsidade s por camada
        updates: n; o treino é dividido em n trechos com n-1 atualizações
        max_pruning_ratio: p_r da primeira atualização
        block_size: Lado B dos blocos
        norm: Norma L^p usada na poda (1, 2 ou "inf")
        realloc_mode: random (sempre esparso) ou gradient (estilo RigL)
        pruning_schedule: cosine (padrão) ou constant
        total_steps: T
    """
    sparsity: float = 0.9
    updates: int = 40
    max_pruning_ratio: float = 0.5
    block_size: int = 1
    norm: Union[Literal[1, 2], Literal["inf"]] = 2
    realloc_mode: Literal["random", "gradient"] = "random"
    pruning_schedule: Literal["cosine", "constant"] = "cosine"
    total_steps: int = 20000

    @field_validator("sparsity")
    @classmethod
    def validate_sparsity(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("sparsity deve estar em [0, 1)")
        return v

    @field_validator("max_pruning_ratio")
    @classmethod
    def validate_ratio(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("max_pruning_ratio deve estar em [0, 1]")
        return v

    @model_validator(mode="after")
    def validate_interval(self) -> "DynSparseConfig":
        if self.updates < 1:
            raise ValueError("updates deve ser >= 1")
        if self.total_steps < self.updates:
            raise ValueError("Intervalo entre atualizações T/n deve ser de pelo menos um passo")
        return self


@dataclass
class UpdateRecord:
    """
    Registro de uma atualização de esparsidade.

    Attributes:
        index: Índice k da atualização (0 na primeira fronteira)
        step: Passo de treino em que ocorreu
        pruning_ratio: p_r(k) aplicado
        pruned: Coordenadas podadas por camada
        grown: Coordenadas alocadas por camada
        pruned_new: Quantas podadas tinham sido alocadas na atualização anterior
        used_dense_grad: True quando a realocação usou gradiente denso
    """
    index: int
    step: int
    pruning_ratio: float
    pruned: dict[int, np.ndarray] = field(default_factory=dict)
    grown: dict[int, np.ndarray] = field(default_factory=dict)
    pruned_new: dict[int, int] = field(default_factory=dict)
    used_dense_grad: bool = False

    def to_json_dict(self) -> dict:
        return {
            "index": self.index,
            "step": self.step,
            "pruning_ratio": self.pruning_ratio,
            "pruned": {str(i): c.tolist() for i, c in self.pruned.items()},
            "grown": {str(i): c.tolist() for i, c in self.grown.items()},
            "pruned_new": {str(i): n for i, n in self.pruned_new.items()},
            "used_dense_grad": self.used_dense_grad,
        }


def update_steps(cfg: DynSparseConfig) -> list[int]:
    """Passos das n-1 fronteiras internas floor(j·T/n)."""
    return [(j * cfg.total_steps) // cfg.updates for j in range(1, cfg.updates)]


def pruning_ratio_at(cfg: DynSparseConfig, k: int) -> float:
    """
    Fração de poda da atualização k.

    Cosseno: p_r · ½ · (1 + cos(π·k/n)); constante: p_r.

    Raises:
        ScheduleError: Se k estiver fora de [0, n)
    """
    if not 0 <= k < cfg.updates:
        raise ScheduleError(f"Índice de atualização {k} fora de [0, {cfg.updates})")
    if cfg.pruning_schedule == "constant":
        return cfg.max_pruning_ratio
    return cfg.max_pruning_ratio * 0.5 * (1.0 + math.cos(math.pi * k / cfg.updates))


def prune_step(weight: BlockSparseMatrix, ratio: float,
               p: Union[int, float, str] = 2) -> tuple[np.ndarray, SparsityMask]:
    """
    Remove os floor(ratio·|ativos|) blocos de menor norma L^p.

    Empates são decididos pela ordem das coordenadas.

    Args:
        weight: Peso esparso
        ratio: Fração de poda em [0, 1]
        p: Norma usada como importância do bloco

    Returns:
        Tupla (coordenadas podadas ordenadas, máscara sobrevivente)

    Raises:
        ScheduleError: Se ratio estiver fora de [0, 1]
        DegenerateSparsityError: Se a poda esvaziaria a máscara
    """
    if not 0.0 <= ratio <= 1.0:
        raise ScheduleError(f"Fração de poda {ratio} fora de [0, 1]")
    mask = weight.mask
    count = int(math.floor(ratio * mask.n_active + 1e-9))
    if count >= mask.n_active:
        raise DegenerateSparsityError(f"Poda de {count} blocos esvaziaria a máscara")
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64), mask
    norms = block_norms(weight.values, p)
    ids = mask.block_ids
    order = np.lexsort((ids, norms))
    pruned_ids = np.sort(ids[order[:count]])
    surviving = SparsityMask.from_block_ids(mask.shape, mask.block_size, ids[np.sort(order[count:])])
    return mask.ids_to_coords(pruned_ids), surviving


def grow_random(mask: SparsityMask, count: int, rng: np.random.Generator) -> np.ndarray:
    """
    Sorteia count blocos inativos, uniforme e sem reposição.

    Raises:
        MaskError: Se não houver blocos inativos suficientes
    """
    inactive = mask.inactive_block_ids()
    if count > len(inactive):
        raise MaskError(f"Pedidos {count} blocos, apenas {len(inactive)} inativos")
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    chosen = np.sort(rng.choice(inactive, size=count, replace=False))
    return mask.ids_to_coords(chosen)


def grow_gradient(mask: SparsityMask, count: int, dense_grad: np.ndarray) -> np.ndarray:
    """
    Escolhe os count blocos inativos com maior norma L1 do gradiente denso.

    Raises:
        MaskError: Forma do gradiente incompatível ou blocos inativos insuficientes
    """
    dense_grad = np.asarray(dense_grad, dtype=np.float64)
    if dense_grad.shape != (mask.shape.rows, mask.shape.cols):
        raise MaskError(f"Gradiente {dense_grad.shape} incompatível com máscara {mask.shape}")
    inactive = mask.inactive_block_ids()
    if count > len(inactive):
        raise MaskError(f"Pedidos {count} blocos, apenas {len(inactive)} inativos")
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    grid_rows, grid_cols = mask.grid
    b = mask.block_size
    scores = np.abs(dense_grad).reshape(grid_rows, b, grid_cols, b).sum(axis=(1, 3)).ravel()
    candidate_scores = scores[inactive]
    order = np.lexsort((inactive, -candidate_scores))
    return mask.ids_to_coords(np.sort(inactive[order[:count]]))


def _count_overlap(a: np.ndarray, b: np.ndarray, mask: SparsityMask) -> int:
    if len(a) == 0 or len(b) == 0:
        return 0
    return len(np.intersect1d(mask.coords_to_ids(a), mask.coords_to_ids(b)))


def dynsparse_update(model: Model, state: OptimState, cfg: DynSparseConfig, k: int,
                     rng: np.random.Generator,
                     grads: Optional[list[LayerGrads]] = None,
                     previous: Optional[UpdateRecord] = None,
                     step: int = 0) -> UpdateRecord:
    """
    Poda e realoca todas as camadas esparsas do modelo.

    Para cada camada: prune_step com pruning_ratio_at(cfg, k), crescimento
    de exatamente |podados| blocos fora da máscara sobrevivente,
    realinhamento de valores e momentos e zeragem dos blocos novos.

    Args:
        model: Modelo (modificado in place)
        state: Estado do Adam (modificado in place)
        cfg: Configuração DynSparse
        k: Índice da atualização
        rng: Gerador da realocação aleatória
        grads: Gradientes com dense_weight, exigidos no modo gradient
        previous: Registro da atualização anterior (para contar podados-novos)
        step: Passo de treino atual, apenas registrado

    Returns:
        UpdateRecord da atualização

    Raises:
        MaskError: Modo gradient sem gradientes densos
    """
    ratio = pruning_ratio_at(cfg, k)
    p = norm_order(cfg.norm)
    record = UpdateRecord(index=k, step=step, pruning_ratio=ratio,
                          used_dense_grad=cfg.realloc_mode == "gradient")
    for i in model.sparse_indices():
        layer = model.layers[i]
        weight: BlockSparseMatrix = layer.weight
        old_mask = weight.mask
        pruned, surviving = prune_step(weight, ratio, p)
        count = len(pruned)
        if cfg.realloc_mode == "gradient":
            if grads is None or grads[i].dense_weight is None:
                raise MaskError("Realocação por gradiente exige gradientes densos")
            grown = grow_gradient(surviving, count, grads[i].dense_weight)
        else:
            grown = grow_random(surviving, count, rng)

        new_ids = np.concatenate([surviving.block_ids, surviving.coords_to_ids(grown)])
        new_mask = SparsityMask.from_block_ids(old_mask.shape, old_mask.block_size, new_ids)
        name = weight_name(i)
        realign_state(state, name, old_mask, new_mask)
        new_weight = reset_moments(state, name, weight.realign(new_mask), grown)
        layer.weight = new_weight
        if layer.frozen is not None:
            # blocos novos entram treináveis
            frozen = realign_blocks(np.asarray(layer.frozen, dtype=bool), old_mask, new_mask)
            if len(grown):
                frozen[new_mask.positions(grown)] = False
            layer.frozen = frozen

        record.pruned[i] = pruned
        record.grown[i] = grown
        previous_grown = previous.grown.get(i) if previous is not None else None
        record.pruned_new[i] = _count_overlap(pruned, previous_grown, old_mask) if previous_grown is not None else 0
        logger.debug("Camada %d: %d blocos podados, %d realocados", i, count, len(grown))

    if count_total := sum(len(c) for c in record.pruned.values()):
        logger.info("Atualização %d (passo %d): p_r=%.4f, %d blocos trocados",
                    k, step, ratio, count_total)
    elif ratio > 0:
        logger.warning("Atualização %d (passo %d): p_r=%.4f arredonda para zero blocos", k, step, ratio)
    else:
        logger.info("Atualização %d (passo %d): p_r=0, máscara inalterada", k, step)
    return record


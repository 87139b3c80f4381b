"""
Adam com weight decay desacoplado, clipping, agenda linear e Group Lasso.

Os momentos do Adam ficam alinhados entrada a entrada com os valores de
cada parâmetro (blocos ativos, no caso de pesos esparsos). Quando a
máscara muda, realign_state leva os momentos para a nova ordem e
reset_moments zera os blocos recém-alocados.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from sparsetrain.errors import DivergenceError, MaskError, ScheduleError
from sparsetrain.tensor import BlockSparseMatrix, SparsityMask, realign_blocks

logger = logging.getLogger(__name__)


class AdamHyper(BaseModel):
    """
    Hiperparâmetros do Adam.

    Attributes:
        beta1, beta2: Decaimento dos momentos
        eps: Constante de estabilidade (sem fator de loss scaling)
        weight_decay: Decaimento desacoplado aplicado aos pesos
        clip_global_norm: Norma global máxima dos gradientes (None desativa)
    """
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip_global_norm: Optional[float] = 1.0

    @field_validator("beta1", "beta2")
    @classmethod
    def validate_beta(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("betas devem estar em (0, 1)")
        return v

    @field_validator("eps")
    @classmethod
    def validate_eps(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("eps deve ser positivo")
        return v

    @field_validator("weight_decay")
    @classmethod
    def validate_decay(cls, v: float) -> float:
        if v < 0:
            raise ValueError("weight_decay não pode ser negativo")
        return v

    @field_validator("clip_global_norm")
    @classmethod
    def validate_clip(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and v <= 0:
            raise ValueError("clip_global_norm deve ser positivo ou null")
        return v


class LrSchedule(BaseModel):
    """Warmup linear até peak_lr seguido de decaimento linear até zero em total_steps."""
    peak_lr: float = 1e-3
    warmup_steps: int = 500
    total_steps: int = 20000

    @field_validator("peak_lr")
    @classmethod
    def validate_peak(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("peak_lr deve ser positivo")
        return v

    @model_validator(mode="after")
    def validate_steps(self) -> "LrSchedule":
        if self.warmup_steps < 0 or self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps deve estar em [0, total_steps)")
        return self


class GroupLassoConfig(BaseModel):
    """
    Regularização Group Lasso desacoplada por bloco.

    Attributes:
        lambda_group: Intensidade (0 desativa)
        w_std: Escala típica dos pesos
        eps_gl: Constante de estabilidade dentro da raiz
    """
    lambda_group: float = 0.0
    w_std: float = 0.02
    eps_gl: float = 1e-6

    @field_validator("lambda_group", "w_std", "eps_gl")
    @classmethod
    def validate_nonnegative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("Parâmetros do Group Lasso não podem ser negativos")
        return v

    @property
    def enabled(self) -> bool:
        return self.lambda_group > 0


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray


@dataclass
class OptimState:
    """
    Estado do Adam: momentos por parâmetro e contador global de passos.

    Attributes:
        moments: Momentos indexados pelo nome do parâmetro
        step: Número de passos já aplicados
    """
    moments: dict[str, Moments] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "OptimState":
        return cls(moments={
            name: Moments(np.zeros_like(p, dtype=np.float64), np.zeros_like(p, dtype=np.float64))
            for name, p in params.items()
        })

    def audit(self, params: Mapping[str, np.ndarray]) -> None:
        """
        Verifica alinhamento dos momentos com os parâmetros e v >= 0.

        Raises:
            MaskError: Se algum invariante estiver violado
        """
        if set(params) != set(self.moments):
            raise MaskError("Parâmetros e momentos com nomes diferentes")
        for name, p in params.items():
            mom = self.moments[name]
            if mom.m.shape != p.shape or mom.v.shape != p.shape:
                raise MaskError(f"Momentos de {name} desalinhados: {mom.m.shape} vs {p.shape}")
            if np.any(mom.v < 0):
                raise MaskError(f"Segundo momento negativo em {name}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """
    Learning rate no passo dado.

    Rampa linear 0 → peak_lr durante o warmup e decaimento linear
    peak_lr → 0 em total_steps.

    Raises:
        ScheduleError: Se step estiver fora de [0, total_steps]
    """
    if not 0 <= step <= schedule.total_steps:
        raise ScheduleError(f"Passo {step} fora de [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    remaining = schedule.total_steps - step
    return schedule.peak_lr * remaining / (schedule.total_steps - schedule.warmup_steps)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray],
                   max_norm: Optional[float]) -> tuple[dict[str, np.ndarray], float]:
    """
    Reescala todos os gradientes se a norma L2 global passar de max_norm.

    Args:
        grads: Gradientes por nome de parâmetro
        max_norm: Norma máxima (None desativa)

    Returns:
        Tupla (gradientes possivelmente reescalados, norma global original)

    Raises:
        DivergenceError: Se algum gradiente não for finito
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise DivergenceError("Gradiente não finito")
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def adam_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                state: OptimState, hyper: AdamHyper, lr: float,
                frozen: Optional[Mapping[str, Optional[np.ndarray]]] = None,
                weight_decay: Optional[Mapping[str, float]] = None) -> dict[str, np.ndarray]:
    """
    Atualiza os momentos e devolve os deltas de cada parâmetro.

    delta = -lr * (m̂ / (sqrt(v̂) + eps) + wd * param), com correção de viés.
    Entradas congeladas mantêm seus momentos.

    Args:
        params: Valores atuais
        grads: Gradientes alinhados com params
        state: Estado do otimizador (modificado in place)
        hyper: Hiperparâmetros
        lr: Learning rate do passo
        frozen: Máscaras booleanas de entradas congeladas por parâmetro
        weight_decay: Decaimento por parâmetro (padrão: hyper.weight_decay)

    Returns:
        Deltas por nome de parâmetro
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - hyper.beta1 ** t
    correction2 = 1.0 - hyper.beta2 ** t
    deltas = {}
    for name, param in params.items():
        grad = grads[name]
        mom = state.moments[name]
        if grad.shape != param.shape or mom.m.shape != param.shape:
            raise MaskError(f"Gradiente ou momentos de {name} desalinhados")
        m = hyper.beta1 * mom.m + (1.0 - hyper.beta1) * grad
        v = hyper.beta2 * mom.v + (1.0 - hyper.beta2) * grad * grad
        mask = frozen.get(name) if frozen else None
        if mask is not None:
            m = np.where(mask, mom.m, m)
            v = np.where(mask, mom.v, v)
        mom.m, mom.v = m, v
        decay = hyper.weight_decay if weight_decay is None else weight_decay.get(name, 0.0)
        deltas[name] = -lr * ((m / correction1) / (np.sqrt(v / correction2) + hyper.eps) + decay * param)
    return deltas


def apply_updates(params: Mapping[str, np.ndarray], deltas: Mapping[str, np.ndarray],
                  frozen: Optional[Mapping[str, Optional[np.ndarray]]] = None) -> dict[str, np.ndarray]:
    """
    Soma os deltas aos parâmetros; entradas congeladas ficam bit a bit iguais.

    Raises:
        DivergenceError: Se algum parâmetro resultante não for finito
    """
    updated = {}
    for name, param in params.items():
        new = param + deltas[name]
        mask = frozen.get(name) if frozen else None
        if mask is not None:
            new = np.where(mask, param, new)
        if not np.all(np.isfinite(new)):
            raise DivergenceError(f"Atualização não finita em {name}")
        updated[name] = new
    return updated


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: OptimState, hyper: AdamHyper, lr: float,
              frozen: Optional[Mapping[str, Optional[np.ndarray]]] = None,
              weight_decay: Optional[Mapping[str, float]] = None) -> dict[str, np.ndarray]:
    """Um passo completo do Adam (adam_update seguido de apply_updates)."""
    deltas = adam_update(params, grads, state, hyper, lr, frozen, weight_decay)
    return apply_updates(params, deltas, frozen)


def group_lasso_penalty(weight: BlockSparseMatrix, cfg: GroupLassoConfig) -> float:
    """Penalidade Σ_blocos sqrt(Σ w² + eps) cujo gradiente é o termo de encolhimento."""
    squares = np.sum(weight.values * weight.values, axis=(1, 2))
    return float(np.sum(np.sqrt(squares + cfg.eps_gl)))


def group_lasso_adjust(update: np.ndarray, weight: BlockSparseMatrix,
                       cfg: GroupLassoConfig, lr: float) -> np.ndarray:
    """
    Aplica o encolhimento L2 por bloco de forma desacoplada.

    ΔW_reg = ΔW - lr · λ · w_std · sqrt(B) · W / sqrt(Σ_bloco W² + eps)

    Args:
        update: Delta alinhado com weight.values
        weight: Peso esparso atual
        cfg: Configuração do Group Lasso
        lr: Learning rate do passo

    Returns:
        Delta ajustado
    """
    update = np.asarray(update, dtype=np.float64)
    if not cfg.enabled:
        return update
    squares = np.sum(weight.values * weight.values, axis=(1, 2), keepdims=True)
    prefactor = lr * cfg.lambda_group * cfg.w_std * math.sqrt(weight.block_size)
    return update - prefactor * weight.values / np.sqrt(squares + cfg.eps_gl)


def reset_moments(state: OptimState, name: str, weight: BlockSparseMatrix,
                  new_coords: np.ndarray) -> BlockSparseMatrix:
    """
    Zera momentos e valores dos blocos recém-alocados.

    Args:
        state: Estado do otimizador (modificado in place)
        name: Nome do parâmetro de peso
        weight: Peso esparso já na nova máscara
        new_coords: Coordenadas (k, 2) dos blocos alocados

    Returns:
        Peso com os blocos new_coords zerados

    Raises:
        MaskError: Se alguma coordenada não estiver na máscara
    """
    coords = np.asarray(new_coords, dtype=np.int64).reshape(-1, 2)
    if len(coords) == 0:
        return weight
    positions = weight.mask.positions(coords)
    mom = state.moments[name]
    mom.m[positions] = 0.0
    mom.v[positions] = 0.0
    values = weight.values.copy()
    values[positions] = 0.0
    return weight.with_values(values)


def realign_state(state: OptimState, name: str, old_mask: SparsityMask,
                  new_mask: SparsityMask) -> OptimState:
    """
    Leva os momentos de old_mask para new_mask.

    Blocos sobreviventes mantêm m e v; blocos podados saem e blocos
    novos entram com zero.

    Raises:
        MaskError: Se as máscaras forem inconsistentes entre si ou com o estado
    """
    mom = state.moments[name]
    mom.m = realign_blocks(mom.m, old_mask, new_mask)
    mom.v = realign_blocks(mom.v, old_mask, new_mask)
    return state

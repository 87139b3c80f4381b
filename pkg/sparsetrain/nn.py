"""
Rede feed-forward pequena com pesos ocultos esparsos e backprop manual.

A tarefa sintética é uma regressão professor–aluno: um professor denso,
fixo e sorteado pela semente, gera os alvos e o aluno (possivelmente
esparso) é treinado com erro quadrático médio. As camadas de entrada e
saída ficam densas e fazem o papel dos embeddings; apenas as
camadas internas recebem máscara.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, field_validator, model_validator
from scipy.special import erf

from sparsetrain.errors import DimensionError, DivergenceError
from sparsetrain.tensor import (
    BlockSparseMatrix,
    Shape,
    SparsityMask,
    dense_weight_grad,
    random_mask,
    sparse_weight_grad,
    spmm_backward_input,
    spmm_forward,
)

logger = logging.getLogger(__name__)

# Truncamento da normal em ±2 desvios
TRUNCATION_STDS = 2.0
HEAVY_TAIL_SIGMA = 1.0

Batch = tuple[np.ndarray, np.ndarray]


class ModelConfig(BaseModel):
    """
    Configuração da rede do aluno.

    Attributes:
        layer_widths: Larguras (entrada, ocultas..., saída)
        sparse_layers: Índices das camadas com peso esparso; por padrão as
            camadas internas (nem a primeira nem a última)
        activation: relu ou gelu
        init_std: Desvio da normal truncada de inicialização
        init_scheme: truncated_normal ou sparse_glorot
        block_size: Lado B dos blocos das camadas esparsas
    """
    layer_widths: List[int] = [32, 64, 64, 16]
    sparse_layers: Optional[List[int]] = None
    activation: Literal["relu", "gelu"] = "relu"
    init_std: float = 0.02
    init_scheme: Literal["truncated_normal", "sparse_glorot"] = "truncated_normal"
    block_size: int = 1

    @field_validator("layer_widths")
    @classmethod
    def validate_widths(cls, v: List[int]) -> List[int]:
        if len(v) < 2:
            raise ValueError("layer_widths precisa de pelo menos entrada e saída")
        if any(w < 1 for w in v):
            raise ValueError("Larguras devem ser positivas")
        return v

    @field_validator("init_std")
    @classmethod
    def validate_init_std(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("init_std deve ser positivo")
        return v

    @field_validator("block_size")
    @classmethod
    def validate_block_size(cls, v: int) -> int:
        if v < 1:
            raise ValueError("block_size deve ser positivo")
        return v

    @model_validator(mode="after")
    def resolve_sparse_layers(self) -> "ModelConfig":
        n_layers = len(self.layer_widths) - 1
        if self.sparse_layers is None:
            interior = list(range(1, n_layers - 1))
            self.sparse_layers = interior or list(range(n_layers))
        self.sparse_layers = sorted(set(self.sparse_layers))
        for index in self.sparse_layers:
            if not 0 <= index < n_layers:
                raise ValueError(f"Camada esparsa {index} fora do intervalo [0, {n_layers})")
            shape = self.layer_shape(index)
            if shape.rows % self.block_size or shape.cols % self.block_size:
                raise ValueError(
                    f"Camada {index} ({shape.rows}x{shape.cols}) não é divisível pelo bloco {self.block_size}"
                )
        return self

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def layer_shape(self, index: int) -> Shape:
        return Shape(rows=self.layer_widths[index + 1], cols=self.layer_widths[index])


class TaskConfig(BaseModel):
    """
    Parâmetros da tarefa professor–aluno.

    Attributes:
        noise_std: Desvio do ruído gaussiano somado aos alvos
        input_scale: ones (normal padrão) ou lognormal (escalas por feature
            com cauda pesada, para o estudo de colapso da realocação por gradiente)
        teacher_gain: Ganho do professor; pesos ~ N(0, gain²/fan_in)
    """
    noise_std: float = 0.0
    input_scale: Literal["ones", "lognormal"] = "ones"
    teacher_gain: float = math.sqrt(2.0)

    @field_validator("noise_std")
    @classmethod
    def validate_noise(cls, v: float) -> float:
        if v < 0:
            raise ValueError("noise_std não pode ser negativo")
        return v


@dataclass
class Layer:
    """
    Uma camada afim.

    Attributes:
        weight: Peso esparso (BlockSparseMatrix) ou denso (array [O × I])
        bias: Viés denso [O]
        trainable: False congela a camada inteira
        frozen: Máscara booleana opcional alinhada com os valores do peso;
            entradas True não são atualizadas pelo otimizador
    """
    weight: Union[BlockSparseMatrix, np.ndarray]
    bias: np.ndarray
    trainable: bool = True
    frozen: Optional[np.ndarray] = None

    @property
    def is_sparse(self) -> bool:
        return isinstance(self.weight, BlockSparseMatrix)

    @property
    def weight_values(self) -> np.ndarray:
        return self.weight.values if self.is_sparse else self.weight

    def set_weight_values(self, values: np.ndarray) -> None:
        if self.is_sparse:
            self.weight = self.weight.with_values(values)
        else:
            self.weight = np.asarray(values, dtype=np.float64)


def weight_name(index: int) -> str:
    return f"layers.{index}.weight"


def bias_name(index: int) -> str:
    return f"layers.{index}.bias"


@dataclass
class Model:
    """Pesos, vieses e flags de treinabilidade de todas as camadas."""
    config: ModelConfig
    layers: List[Layer]

    def masks(self) -> dict[int, SparsityMask]:
        return {i: layer.weight.mask for i, layer in enumerate(self.layers) if layer.is_sparse}

    def sparse_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.is_sparse]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            params[weight_name(i)] = layer.weight_values
            params[bias_name(i)] = layer.bias
        return params

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            if weight_name(i) in params:
                layer.set_weight_values(params[weight_name(i)])
            if bias_name(i) in params:
                layer.bias = np.asarray(params[bias_name(i)], dtype=np.float64)

    def frozen_masks(self) -> dict[str, Optional[np.ndarray]]:
        """Máscaras de congelamento por parâmetro (None = tudo treinável)."""
        frozen: dict[str, Optional[np.ndarray]] = {}
        for i, layer in enumerate(self.layers):
            if not layer.trainable:
                frozen[weight_name(i)] = np.ones(layer.weight_values.shape, dtype=bool)
                frozen[bias_name(i)] = np.ones(layer.bias.shape, dtype=bool)
            else:
                frozen[weight_name(i)] = layer.frozen
                frozen[bias_name(i)] = None
        return frozen

    def param_count(self, non_embedding_only: bool = False) -> int:
        """Número de pesos armazenados; non_embedding_only conta só as camadas esparsas."""
        total = 0
        for layer in self.layers:
            if non_embedding_only and not layer.is_sparse:
                continue
            total += layer.weight_values.size
            if not non_embedding_only:
                total += layer.bias.size
        return total

    def achieved_sparsity(self) -> dict[int, float]:
        return {i: mask.sparsity for i, mask in self.masks().items()}


def truncated_normal(rng: np.random.Generator, size: tuple[int, ...], std: float,
                     bound: float = TRUNCATION_STDS) -> np.ndarray:
    """
    Amostra N(0, std²) truncada em ±bound·std por rejeição.

    Valores fora do intervalo são sorteados de novo até todos caírem dentro.
    """
    out = rng.standard_normal(size)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def _init_values(config: ModelConfig, rng: np.random.Generator, size: tuple[int, ...],
                 shape: Shape, density: float) -> np.ndarray:
    if config.init_scheme == "truncated_normal":
        return truncated_normal(rng, size, config.init_std)
    # Glorot uniforme com variância reescalada pela densidade
    limit = math.sqrt(6.0 / (shape.rows + shape.cols)) / math.sqrt(density)
    return rng.uniform(-limit, limit, size)


def init_model(config: ModelConfig, sparsity: float, rng: np.random.Generator,
               mask_rng: Optional[np.random.Generator] = None) -> Model:
    """
    Inicializa o modelo do aluno.

    Camadas esparsas recebem uma máscara aleatória (random_mask) e apenas
    os blocos ativos são sorteados; vieses começam em zero.

    Args:
        config: Configuração do modelo
        sparsity: Esparsidade pedida para as camadas esparsas
        rng: Gerador para os valores dos pesos
        mask_rng: Gerador para as máscaras (padrão: o próprio rng)

    Returns:
        Modelo inicializado

    Raises:
        DimensionError, DegenerateSparsityError: Propagados de random_mask
    """
    mask_rng = rng if mask_rng is None else mask_rng
    layers = []
    for i in range(config.n_layers):
        shape = config.layer_shape(i)
        if i in config.sparse_layers:
            mask = random_mask(shape, config.block_size, sparsity, mask_rng)
            b = config.block_size
            values = _init_values(config, rng, (mask.n_active, b, b), shape, mask.density)
            weight: Union[BlockSparseMatrix, np.ndarray] = BlockSparseMatrix(mask, values)
        else:
            weight = _init_values(config, rng, (shape.rows, shape.cols), shape, 1.0)
        layers.append(Layer(weight=weight, bias=np.zeros(shape.rows)))
    logger.debug(
        "Modelo %s inicializado (%s, truncamento ±%.1f std), esparsidade pedida %.3f",
        config.layer_widths, config.init_scheme, TRUNCATION_STDS, sparsity,
    )
    return Model(config=config, layers=layers)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return 0.5 * z * (1.0 + erf(z / math.sqrt(2.0)))


def _activation_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0).astype(np.float64)
    cdf = 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return cdf + z * pdf


@dataclass
class ForwardCache:
    """Entradas e pré-ativações de cada camada, guardadas para o backward."""
    inputs: List[np.ndarray] = field(default_factory=list)
    preactivations: List[np.ndarray] = field(default_factory=list)


@dataclass
class LayerGrads:
    """
    Gradientes de uma camada.

    Attributes:
        weight: Alinhado com weight_values (blocos ativos para camadas esparsas)
        bias: Gradiente do viés
        dense_weight: Gradiente denso completo, só quando pedido em camadas esparsas
    """
    weight: np.ndarray
    bias: np.ndarray
    dense_weight: Optional[np.ndarray] = None


def forward(model: Model, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """
    Composição afim + ativação; a última camada é linear.

    Raises:
        DimensionError: Se x não tiver a largura de entrada
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.config.layer_widths[0]:
        raise DimensionError(
            f"Entrada {x.shape} incompatível com largura {model.config.layer_widths[0]}"
        )
    cache = ForwardCache()
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        cache.inputs.append(h)
        if layer.is_sparse:
            z = spmm_forward(layer.weight, h) + layer.bias
        else:
            z = h @ layer.weight.T + layer.bias
        cache.preactivations.append(z)
        h = z if i == last else _activate(z, model.config.activation)
    return h, cache


def mse_loss(model: Model, batch: Batch) -> float:
    """Erro quadrático médio sobre batch e saídas."""
    x, targets = batch
    prediction, _ = forward(model, x)
    return float(np.mean((prediction - np.asarray(targets, dtype=np.float64)) ** 2))


def loss_and_grads(model: Model, batch: Batch, dense_grads: bool = False) -> tuple[float, List[LayerGrads]]:
    """
    Calcula o MSE e os gradientes por backprop.

    Camadas esparsas produzem gradientes apenas nos blocos ativos
    (sparse_weight_grad); com dense_grads=True também devolvem o gradiente
    denso completo, necessário para a realocação por gradiente.

    Args:
        model: Modelo avaliado (não é modificado)
        batch: Par (X, alvos)
        dense_grads: Se deve calcular o gradiente denso das camadas esparsas

    Returns:
        Tupla (loss, lista de LayerGrads por camada)

    Raises:
        DimensionError: Batch vazio ou alvos com forma errada
        DivergenceError: Loss não finita
    """
    x, targets = batch
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DimensionError("Batch não pode estar vazio")
    prediction, cache = forward(model, x)
    if targets.shape != prediction.shape:
        raise DimensionError(f"Alvos {targets.shape} incompatíveis com predição {prediction.shape}")

    diff = prediction - targets
    loss = float(np.mean(diff * diff))
    if not math.isfinite(loss):
        raise DivergenceError(f"Loss não finita: {loss}")

    activation = model.config.activation
    grads: List[Optional[LayerGrads]] = [None] * len(model.layers)
    delta = 2.0 * diff / diff.size
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        inputs = cache.inputs[i]
        if layer.is_sparse:
            weight_grad = sparse_weight_grad(inputs, delta, layer.weight.mask).values
            dense = dense_weight_grad(inputs, delta) if dense_grads else None
        else:
            weight_grad = delta.T @ inputs
            dense = None
        grads[i] = LayerGrads(weight=weight_grad, bias=delta.sum(axis=0), dense_weight=dense)
        if i == 0:
            break
        if layer.is_sparse:
            d_hidden = spmm_backward_input(layer.weight, delta)
        else:
            d_hidden = delta @ layer.weight
        delta = d_hidden * _activation_grad(cache.preactivations[i - 1], activation)
    return loss, grads  # type: ignore[return-value]


@dataclass
class TaskSpec:
    """
    Professor fixo e distribuição de entrada.

    Attributes:
        weights: Pesos densos do professor, um por camada
        biases: Vieses do professor
        activation: Ativação do professor (a mesma do aluno)
        input_scale: Escala por feature aplicada à entrada normal padrão
        noise_std: Desvio do ruído dos alvos
    """
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str
    input_scale: np.ndarray
    noise_std: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if i == last else _activate(z, self.activation)
        return h


def make_task(config: TaskConfig, model_config: ModelConfig, rng: np.random.Generator) -> TaskSpec:
    """
    Sorteia o professor (mesmas larguras do aluno) e as escalas de entrada.

    Com input_scale=lognormal cada feature recebe escala exp(N(0, 1)), o
    que gera os outliers de ativação por trás do colapso do RigL.
    """
    widths = model_config.layer_widths
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * config.teacher_gain / math.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    if config.input_scale == "lognormal":
        scale = np.exp(HEAVY_TAIL_SIGMA * rng.standard_normal(widths[0]))
    else:
        scale = np.ones(widths[0])
    return TaskSpec(
        weights=weights,
        biases=biases,
        activation=model_config.activation,
        input_scale=scale,
        noise_std=config.noise_std,
    )


def make_batch(task: TaskSpec, batch_size: int, rng: np.random.Generator) -> Batch:
    """
    Sorteia um batch: X normal com escalas por feature, alvos = professor(X) + ruído.

    Raises:
        DimensionError: Se batch_size < 1
    """
    if batch_size < 1:
        raise DimensionError(f"batch_size deve ser >= 1, recebido {batch_size}")
    x = rng.standard_normal((batch_size, len(task.input_scale))) * task.input_scale
    targets = task.predict(x)
    if task.noise_std > 0:
        targets = targets + task.noise_std * rng.standard_normal(targets.shape)
    return x, targets

"""
Matrizes densas e esparsas em blocos, e os kernels usados no treinamento.

Uma matriz esparsa em blocos guarda apenas os blocos B×B ativos da sua
máscara, na ordem linha-major das coordenadas de bloco. Os kernels de
forward, backward (gradiente da entrada) e gradiente dos pesos tocam
somente esses blocos, de modo que o peso denso nunca é instanciado.

Todos os cálculos são feitos em float64.
"""

from __future__ import annotations

import contextlib
import contextvars
import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np

from sparsetrain.errors import DegenerateSparsityError, DimensionError, MaskError

logger = logging.getLogger(__name__)

# Matrizes densas são arrays numpy 2-D (linhas × colunas)
DenseMatrix = np.ndarray
NormOrder = Union[int, float, str]


@dataclass(frozen=True)
class Shape:
    """
    Dimensões de uma matriz de pesos.

    Attributes:
        rows: Dimensão de saída O
        cols: Dimensão de entrada I
    """
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise DimensionError(f"Dimensões devem ser positivas, recebido {self.rows}x{self.cols}")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def block_grid(self, block_size: int) -> tuple[int, int]:
        """
        Retorna a grade de blocos (linhas, colunas) para o tamanho de bloco dado.

        Raises:
            DimensionError: Se alguma dimensão não for divisível por block_size
        """
        if block_size < 1:
            raise DimensionError(f"Tamanho de bloco inválido: {block_size}")
        if self.rows % block_size or self.cols % block_size:
            raise DimensionError(
                f"Forma {self.rows}x{self.cols} não é divisível pelo bloco {block_size}"
            )
        return self.rows // block_size, self.cols // block_size


@dataclass
class KernelCounters:
    """
    Contadores instrumentados nos kernels.

    Attributes:
        multiplies: Multiplicações escalares executadas
        block_accesses: Blocos ativos lidos pelo spmm_forward
        dense_materializations: Pesos ou gradientes densos criados (densify, dense_weight_grad)
    """
    multiplies: int = 0
    block_accesses: int = 0
    dense_materializations: int = 0


_active_counters: contextvars.ContextVar[Optional[KernelCounters]] = contextvars.ContextVar(
    "kernel_counters", default=None
)


@contextlib.contextmanager
def count_kernel_ops() -> Iterator[KernelCounters]:
    """
    Ativa a contagem de operações dos kernels no contexto atual.

    Cada thread tem seu próprio contexto, então contagens de execuções
    paralelas não se misturam.

    Yields:
        KernelCounters acumulando as operações feitas dentro do bloco with
    """
    counters = KernelCounters()
    token = _active_counters.set(counters)
    try:
        yield counters
    finally:
        _active_counters.reset(token)


def _record(multiplies: int = 0, block_accesses: int = 0, dense: int = 0) -> None:
    counters = _active_counters.get()
    if counters is None:
        return
    counters.multiplies += multiplies
    counters.block_accesses += block_accesses
    counters.dense_materializations += dense


def _block_ids(coords: np.ndarray, grid_cols: int) -> np.ndarray:
    return coords[:, 0] * grid_cols + coords[:, 1]


@dataclass(frozen=True, eq=False)
class SparsityMask:
    """
    Conjunto de blocos ativos de uma matriz de pesos.

    Attributes:
        shape: Forma da matriz densa correspondente
        block_size: Lado B dos blocos quadrados
        active_blocks: Array (k, 2) de coordenadas (linha, coluna) de bloco,
            únicas e ordenadas em ordem linha-major
    """
    shape: Shape
    block_size: int
    active_blocks: np.ndarray

    def __post_init__(self) -> None:
        grid_rows, grid_cols = self.shape.block_grid(self.block_size)
        coords = np.array(self.active_blocks, dtype=np.int64).reshape(-1, 2)
        if len(coords) == 0:
            raise DegenerateSparsityError("Máscara precisa de pelo menos um bloco ativo")
        if (
            coords[:, 0].min() < 0 or coords[:, 1].min() < 0
            or coords[:, 0].max() >= grid_rows or coords[:, 1].max() >= grid_cols
        ):
            raise MaskError(f"Coordenada de bloco fora da grade {grid_rows}x{grid_cols}")
        if np.any(np.diff(_block_ids(coords, grid_cols)) <= 0):
            raise MaskError("Coordenadas de bloco devem ser únicas e ordenadas")
        coords.setflags(write=False)
        object.__setattr__(self, "active_blocks", coords)

    @classmethod
    def from_block_ids(cls, shape: Shape, block_size: int, ids: np.ndarray) -> "SparsityMask":
        """Constrói a máscara a partir de índices lineares de bloco (em qualquer ordem)."""
        _, grid_cols = shape.block_grid(block_size)
        ids = np.unique(np.asarray(ids, dtype=np.int64))
        coords = np.stack([ids // grid_cols, ids % grid_cols], axis=1)
        return cls(shape, block_size, coords)

    @property
    def grid(self) -> tuple[int, int]:
        return self.shape.block_grid(self.block_size)

    @property
    def n_blocks(self) -> int:
        grid_rows, grid_cols = self.grid
        return grid_rows * grid_cols

    @property
    def n_active(self) -> int:
        return len(self.active_blocks)

    @property
    def block_ids(self) -> np.ndarray:
        """Índices lineares (linha-major) dos blocos ativos, ordenados."""
        return _block_ids(self.active_blocks, self.grid[1])

    @property
    def density(self) -> float:
        return self.n_active * self.block_size ** 2 / self.shape.size

    @property
    def sparsity(self) -> float:
        return 1.0 - self.density

    def coords_to_ids(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        return _block_ids(coords, self.grid[1])

    def ids_to_coords(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        grid_cols = self.grid[1]
        return np.stack([ids // grid_cols, ids % grid_cols], axis=1).reshape(-1, 2)

    def positions(self, coords: np.ndarray) -> np.ndarray:
        """
        Posição de cada coordenada dentro de active_blocks.

        Raises:
            MaskError: Se alguma coordenada não estiver na máscara
        """
        ids = self.coords_to_ids(coords)
        own = self.block_ids
        pos = np.searchsorted(own, ids)
        if np.any(pos >= len(own)) or np.any(own[np.minimum(pos, len(own) - 1)] != ids):
            raise MaskError("Coordenada não pertence à máscara")
        return pos

    def inactive_block_ids(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_blocks, dtype=np.int64), self.block_ids, assume_unique=True)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparsityMask):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.block_size == other.block_size
            and np.array_equal(self.active_blocks, other.active_blocks)
        )

    def __hash__(self) -> int:
        return hash((self.shape, self.block_size, self.active_blocks.tobytes()))


def random_mask(shape: Shape, block_size: int, sparsity: float, rng: np.random.Generator) -> SparsityMask:
    """
    Sorteia uma máscara uniforme com round((1 - s) * n_blocos) blocos ativos.

    A esparsidade obtida é o valor representável mais próximo de s e fica
    disponível em mask.sparsity.

    Args:
        shape: Forma da matriz de pesos
        block_size: Lado do bloco
        sparsity: Esparsidade pedida, em [0, 1)
        rng: Gerador de números aleatórios

    Returns:
        Máscara com as coordenadas sorteadas em ordem

    Raises:
        DimensionError: Se a forma não for divisível pelo bloco
        DegenerateSparsityError: Se nenhum bloco ficar ativo
    """
    grid_rows, grid_cols = shape.block_grid(block_size)
    if not 0.0 <= sparsity < 1.0:
        raise DegenerateSparsityError(f"Esparsidade deve estar em [0, 1), recebido {sparsity}")
    n_blocks = grid_rows * grid_cols
    k = int(math.floor((1.0 - sparsity) * n_blocks + 0.5))
    if k < 1:
        raise DegenerateSparsityError(
            f"Esparsidade {sparsity} deixa zero blocos ativos em {n_blocks} blocos"
        )
    ids = rng.choice(n_blocks, size=k, replace=False)
    mask = SparsityMask.from_block_ids(shape, block_size, ids)
    logger.debug(
        "Máscara %dx%d B=%d: esparsidade pedida %.4f, obtida %.4f",
        shape.rows, shape.cols, block_size, sparsity, mask.sparsity,
    )
    return mask


def realign_blocks(values: np.ndarray, old_mask: SparsityMask, new_mask: SparsityMask) -> np.ndarray:
    """
    Reordena valores por bloco de old_mask para new_mask.

    Blocos presentes nas duas máscaras mantêm seus valores; blocos novos
    recebem zero (ou False, para arrays booleanos).

    Raises:
        MaskError: Se as máscaras tiverem forma/bloco diferentes ou os valores
            não estiverem alinhados com old_mask
    """
    if old_mask.shape != new_mask.shape or old_mask.block_size != new_mask.block_size:
        raise MaskError("Máscaras com forma ou tamanho de bloco diferentes")
    if values.shape[0] != old_mask.n_active:
        raise MaskError(
            f"Valores com {values.shape[0]} blocos para máscara com {old_mask.n_active}"
        )
    out = np.zeros((new_mask.n_active,) + values.shape[1:], dtype=values.dtype)
    _, old_idx, new_idx = np.intersect1d(
        old_mask.block_ids, new_mask.block_ids, assume_unique=True, return_indices=True
    )
    out[new_idx] = values[old_idx]
    return out


@dataclass(frozen=True, eq=False)
class BlockSparseMatrix:
    """
    Peso esparso em blocos: máscara mais os valores dos blocos ativos.

    Attributes:
        mask: Máscara de blocos ativos
        values: Array (k, B, B) com um bloco por coordenada ativa, na mesma ordem
    """
    mask: SparsityMask
    values: np.ndarray

    def __post_init__(self) -> None:
        b = self.mask.block_size
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.mask.n_active, b, b):
            raise DimensionError(
                f"Valores com forma {values.shape}, esperado {(self.mask.n_active, b, b)}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, mask: SparsityMask) -> "BlockSparseMatrix":
        b = mask.block_size
        return cls(mask, np.zeros((mask.n_active, b, b)))

    @property
    def shape(self) -> Shape:
        return self.mask.shape

    @property
    def block_size(self) -> int:
        return self.mask.block_size

    def with_values(self, values: np.ndarray) -> "BlockSparseMatrix":
        return BlockSparseMatrix(self.mask, values)

    def realign(self, new_mask: SparsityMask) -> "BlockSparseMatrix":
        """Leva os blocos sobreviventes para new_mask; blocos novos começam em zero."""
        return BlockSparseMatrix(new_mask, realign_blocks(self.values, self.mask, new_mask))


def _as_matrix(array: np.ndarray, name: str) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2:
        raise DimensionError(f"{name} deve ser 2-D, recebido ndim={array.ndim}")
    return array


def _to_blocks(dense: np.ndarray, block_size: int) -> np.ndarray:
    rows, cols = dense.shape
    return dense.reshape(rows // block_size, block_size, cols // block_size, block_size).transpose(0, 2, 1, 3)


def _scatter_add(contrib: np.ndarray, index: np.ndarray, n_out: int) -> np.ndarray:
    # contrib (batch, k, B) somado nas posições index (k,) da grade de saída
    batch, _, b = contrib.shape
    flat = (np.arange(batch)[:, None, None] * n_out + index[None, :, None]) * b + np.arange(b)[None, None, :]
    out = np.bincount(flat.ravel(), weights=contrib.ravel(), minlength=batch * n_out * b)
    return out.reshape(batch, n_out * b)


def sparsify(dense: DenseMatrix, mask: SparsityMask) -> BlockSparseMatrix:
    """
    Copia as entradas de dense cobertas pela máscara.

    Raises:
        DimensionError: Se a forma de dense não coincidir com a da máscara
    """
    dense = _as_matrix(dense, "dense")
    if dense.shape != (mask.shape.rows, mask.shape.cols):
        raise DimensionError(f"Matriz {dense.shape} incompatível com máscara {mask.shape}")
    blocks = _to_blocks(dense, mask.block_size)
    rows, cols = mask.active_blocks[:, 0], mask.active_blocks[:, 1]
    return BlockSparseMatrix(mask, blocks[rows, cols])


def densify(sparse: BlockSparseMatrix) -> DenseMatrix:
    """Materializa a matriz densa; entradas fora da máscara são exatamente 0."""
    _record(dense=1)
    mask = sparse.mask
    grid_rows, grid_cols = mask.grid
    b = mask.block_size
    blocks = np.zeros((grid_rows, grid_cols, b, b))
    blocks[mask.active_blocks[:, 0], mask.active_blocks[:, 1]] = sparse.values
    return blocks.transpose(0, 2, 1, 3).reshape(mask.shape.rows, mask.shape.cols)


def spmm_forward(weight: BlockSparseMatrix, x: DenseMatrix) -> DenseMatrix:
    """
    Produto esparso-denso do forward: y[b, i] = Σ_j M[i, j] · x[b, j].

    Args:
        weight: Peso esparso [O × I]
        x: Entrada densa [batch × I]

    Returns:
        Saída densa [batch × O]

    Raises:
        DimensionError: Se x.cols != weight.cols
    """
    x = _as_matrix(x, "x")
    if x.shape[1] != weight.shape.cols:
        raise DimensionError(f"Entrada com {x.shape[1]} colunas para peso {weight.shape}")
    mask = weight.mask
    b = mask.block_size
    grid_rows, grid_cols = mask.grid
    rows, cols = mask.active_blocks[:, 0], mask.active_blocks[:, 1]
    batch = x.shape[0]

    x_blocks = x.reshape(batch, grid_cols, b)[:, cols, :]
    contrib = np.einsum("kij,bkj->bki", weight.values, x_blocks)
    _record(multiplies=batch * weight.values.size, block_accesses=mask.n_active)
    return _scatter_add(contrib, rows, grid_rows)


def spmm_backward_input(weight: BlockSparseMatrix, dy: DenseMatrix) -> DenseMatrix:
    """
    Erro denso multiplicado pela transposta esparsa: dx[b, j] = Σ_i M[i, j] · dy[b, i].

    Raises:
        DimensionError: Se dy.cols != weight.rows
    """
    dy = _as_matrix(dy, "dy")
    if dy.shape[1] != weight.shape.rows:
        raise DimensionError(f"Erro com {dy.shape[1]} colunas para peso {weight.shape}")
    mask = weight.mask
    b = mask.block_size
    grid_rows, grid_cols = mask.grid
    rows, cols = mask.active_blocks[:, 0], mask.active_blocks[:, 1]
    batch = dy.shape[0]

    dy_blocks = dy.reshape(batch, grid_rows, b)[:, rows, :]
    contrib = np.einsum("kij,bki->bkj", weight.values, dy_blocks)
    _record(multiplies=batch * weight.values.size)
    return _scatter_add(contrib, cols, grid_cols)


def sparse_weight_grad(x: DenseMatrix, dy: DenseMatrix, mask: SparsityMask) -> BlockSparseMatrix:
    """
    Gradiente dos pesos como produto externo esparso.

    Apenas os blocos ativos são calculados: dW[i, j] = Σ_b dy[b, i] · x[b, j].

    Raises:
        DimensionError: Se batch ou dimensões não baterem com a máscara
    """
    x = _as_matrix(x, "x")
    dy = _as_matrix(dy, "dy")
    if x.shape[0] != dy.shape[0]:
        raise DimensionError(f"Batch divergente: x {x.shape[0]}, dy {dy.shape[0]}")
    if x.shape[1] != mask.shape.cols or dy.shape[1] != mask.shape.rows:
        raise DimensionError(f"x {x.shape} e dy {dy.shape} incompatíveis com máscara {mask.shape}")
    b = mask.block_size
    grid_rows, grid_cols = mask.grid
    rows, cols = mask.active_blocks[:, 0], mask.active_blocks[:, 1]
    batch = x.shape[0]

    x_blocks = x.reshape(batch, grid_cols, b)[:, cols, :]
    dy_blocks = dy.reshape(batch, grid_rows, b)[:, rows, :]
    values = np.einsum("bki,bkj->kij", dy_blocks, x_blocks)
    _record(multiplies=batch * values.size)
    return BlockSparseMatrix(mask, values)


def dense_weight_grad(x: DenseMatrix, dy: DenseMatrix) -> DenseMatrix:
    """
    Gradiente denso completo dos pesos (dy^T · x), sem máscara.

    Usado apenas pela realocação baseada em gradiente.
    """
    x = _as_matrix(x, "x")
    dy = _as_matrix(dy, "dy")
    if x.shape[0] != dy.shape[0]:
        raise DimensionError(f"Batch divergente: x {x.shape[0]}, dy {dy.shape[0]}")
    _record(multiplies=x.shape[0] * x.shape[1] * dy.shape[1], dense=1)
    return dy.T @ x


def norm_order(p: NormOrder) -> float:
    """Normaliza o seletor de norma para 1.0, 2.0 ou inf."""
    if isinstance(p, str):
        p = p.strip().lower()
        p = math.inf if p in ("inf", "infinity", "max") else float(p)
    p = float(p)
    if p not in (1.0, 2.0, math.inf):
        raise ValueError(f"Norma deve ser 1, 2 ou inf, recebido {p}")
    return p


def block_norms(values: np.ndarray, p: NormOrder = 2) -> np.ndarray:
    """L^p de cada bloco de um array (k, B, B)."""
    order = norm_order(p)
    magnitudes = np.abs(np.asarray(values, dtype=np.float64)).reshape(len(values), -1)
    if order == 1.0:
        return magnitudes.sum(axis=1)
    if order == 2.0:
        return np.sqrt(np.sum(magnitudes * magnitudes, axis=1))
    return magnitudes.max(axis=1)


def block_norm(block: np.ndarray, p: NormOrder = 2) -> float:
    """
    Norma L^p de um bloco: (Σ|w|^p)^(1/p), com L^inf = max|w|.

    Para B=1 as três normas coincidem com |w| (poda por magnitude).
    """
    block = np.asarray(block, dtype=np.float64)
    return float(block_norms(block.reshape(1, -1), p)[0])

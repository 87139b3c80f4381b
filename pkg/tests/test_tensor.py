"""
Testes das matrizes esparsas em blocos e dos kernels.

Os kernels são comparados com o oráculo denso (densify + matmul) em
formas aleatórias e com contas feitas à mão.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Adicionar o diretório raiz ao path
sys.path.insert(0, str(Path(__file__).parent.parent))

from sparsetrain.errors import DegenerateSparsityError, DimensionError, MaskError
from sparsetrain.tensor import (
    BlockSparseMatrix,
    Shape,
    SparsityMask,
    block_norm,
    block_norms,
    count_kernel_ops,
    dense_weight_grad,
    densify,
    norm_order,
    random_mask,
    realign_blocks,
    sparse_weight_grad,
    sparsify,
    spmm_backward_input,
    spmm_forward,
)


def full_mask(rows, cols, block_size=1):
    shape = Shape(rows, cols)
    grid_rows, grid_cols = shape.block_grid(block_size)
    return SparsityMask.from_block_ids(shape, block_size, np.arange(grid_rows * grid_cols))


def random_case(rng, block_size):
    """Sorteia peso esparso, entrada e erro com formas aleatórias múltiplas do bloco."""
    rows = block_size * int(rng.integers(1, 6))
    cols = block_size * int(rng.integers(1, 6))
    batch = int(rng.integers(1, 5))
    sparsity = float(rng.uniform(0.0, 0.7))
    shape = Shape(rows, cols)
    try:
        mask = random_mask(shape, block_size, sparsity, rng)
    except DegenerateSparsityError:
        mask = full_mask(rows, cols, block_size)
    weight = BlockSparseMatrix(mask, rng.standard_normal((mask.n_active, block_size, block_size)))
    x = rng.standard_normal((batch, cols))
    dy = rng.standard_normal((batch, rows))
    return weight, x, dy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestShape:
    """Testes para Shape e a grade de blocos"""

    def test_block_grid(self):
        assert Shape(8, 4).block_grid(2) == (4, 2)

    def test_indivisible_shape_raises(self):
        with pytest.raises(DimensionError):
            Shape(6, 4).block_grid(4)

    def test_non_positive_dimension_raises(self):
        with pytest.raises(DimensionError):
            Shape(0, 4)


class TestSparsityMask:
    """Testes de validação da máscara"""

    def test_unsorted_coordinates_rejected(self):
        with pytest.raises(MaskError):
            SparsityMask(Shape(4, 4), 1, np.array([[1, 0], [0, 0]]))

    def test_duplicate_coordinates_rejected(self):
        with pytest.raises(MaskError):
            SparsityMask(Shape(4, 4), 1, np.array([[0, 1], [0, 1]]))

    def test_out_of_grid_rejected(self):
        with pytest.raises(MaskError):
            SparsityMask(Shape(4, 4), 2, np.array([[0, 2]]))

    def test_empty_mask_is_degenerate(self):
        with pytest.raises(DegenerateSparsityError):
            SparsityMask(Shape(4, 4), 1, np.zeros((0, 2)))

    def test_active_blocks_are_read_only(self):
        mask = full_mask(2, 2)
        with pytest.raises(ValueError):
            mask.active_blocks[0, 0] = 1

    def test_positions_of_absent_coordinate(self):
        mask = SparsityMask(Shape(4, 4), 1, np.array([[0, 0], [2, 3]]))
        np.testing.assert_array_equal(mask.positions(np.array([[2, 3]])), [1])
        with pytest.raises(MaskError):
            mask.positions(np.array([[1, 1]]))

    def test_equality_and_hash(self):
        a = SparsityMask(Shape(4, 4), 2, np.array([[0, 1], [1, 0]]))
        b = SparsityMask.from_block_ids(Shape(4, 4), 2, np.array([2, 1]))
        assert a == b
        assert hash(a) == hash(b)


class TestRandomMask:
    """Testes para random_mask"""

    def test_exact_active_count(self, rng):
        mask = random_mask(Shape(4, 4), 1, 0.75, rng)
        assert mask.n_active == 4

    def test_single_block_full_density(self, rng):
        mask = random_mask(Shape(4, 4), 4, 0.0, rng)
        np.testing.assert_array_equal(mask.active_blocks, [[0, 0]])
        assert mask.density == 1.0

    def test_achieved_sparsity_is_rounded(self, rng):
        mask = random_mask(Shape(8, 8), 2, 0.9, rng)
        assert mask.n_active == 2
        assert mask.sparsity == pytest.approx(0.875)
        assert mask.density == 1.0 - mask.sparsity

    def test_zero_active_blocks_raises(self, rng):
        with pytest.raises(DegenerateSparsityError):
            random_mask(Shape(4, 4), 4, 0.9, rng)

    def test_indivisible_shape_raises(self, rng):
        with pytest.raises(DimensionError):
            random_mask(Shape(6, 4), 4, 0.5, rng)

    def test_same_seed_same_mask(self):
        a = random_mask(Shape(16, 16), 2, 0.8, np.random.default_rng(7))
        b = random_mask(Shape(16, 16), 2, 0.8, np.random.default_rng(7))
        assert a == b

    def test_inclusion_frequency_is_uniform(self, rng):
        """Cada bloco deve aparecer com frequência k/n dentro de 5 desvios."""
        shape, trials = Shape(4, 4), 4000
        counts = np.zeros(16)
        for _ in range(trials):
            counts[random_mask(shape, 1, 0.75, rng).block_ids] += 1
        p = 4 / 16
        sigma = np.sqrt(trials * p * (1 - p))
        assert np.all(np.abs(counts - trials * p) < 5 * sigma)


class TestSparsifyDensify:
    """Testes de sparsify e densify"""

    def test_identity_full_mask(self):
        sparse = sparsify(np.eye(2), full_mask(2, 2))
        np.testing.assert_array_equal(densify(sparse), np.eye(2))

    def test_direct_selection(self):
        mask = SparsityMask(Shape(2, 2), 1, np.array([[0, 0], [1, 1]]))
        sparse = sparsify(np.array([[1.0, 2.0], [3.0, 4.0]]), mask)
        np.testing.assert_array_equal(sparse.values.ravel(), [1.0, 4.0])

    def test_structural_zeros(self):
        mask = SparsityMask(Shape(4, 4), 2, np.array([[0, 0]]))
        dense = densify(BlockSparseMatrix(mask, np.ones((1, 2, 2))))
        assert np.count_nonzero(dense == 0.0) == 12

    def test_round_trip_projects_onto_mask(self, rng):
        mask = random_mask(Shape(8, 12), 4, 0.5, rng)
        dense = rng.standard_normal((8, 12))
        projected = densify(sparsify(dense, mask))
        covered = densify(BlockSparseMatrix(mask, np.ones((mask.n_active, 4, 4)))) == 1.0
        np.testing.assert_array_equal(projected[covered], dense[covered])
        assert np.all(projected[~covered] == 0.0)

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            sparsify(np.zeros((3, 2)), full_mask(2, 2))

    def test_values_are_read_only(self):
        sparse = sparsify(np.eye(2), full_mask(2, 2))
        with pytest.raises(ValueError):
            sparse.values[0, 0, 0] = 5.0

    def test_wrong_value_count_raises(self):
        with pytest.raises(DimensionError):
            BlockSparseMatrix(full_mask(2, 2), np.zeros((3, 1, 1)))


class TestKernels:
    """Testes dos kernels contra contas à mão e o oráculo denso"""

    def test_forward_identity(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(spmm_forward(sparsify(np.eye(4), full_mask(4, 4)), x), x)

    def test_forward_single_cell(self):
        mask = SparsityMask(Shape(2, 2), 1, np.array([[1, 0]]))
        weight = BlockSparseMatrix(mask, np.array([[[2.0]]]))
        np.testing.assert_array_equal(spmm_forward(weight, np.array([[3.0, 5.0]])), [[0.0, 6.0]])

    def test_backward_single_cell(self):
        mask = SparsityMask(Shape(2, 2), 1, np.array([[1, 0]]))
        weight = BlockSparseMatrix(mask, np.array([[[2.0]]]))
        np.testing.assert_array_equal(spmm_backward_input(weight, np.array([[7.0, 11.0]])), [[22.0, 0.0]])

    def test_weight_grad_hand_outer_product(self):
        grad = sparse_weight_grad(np.array([[2.0, 3.0]]), np.array([[1.0, 0.0]]), full_mask(2, 2))
        np.testing.assert_array_equal(densify(grad), [[2.0, 3.0], [0.0, 0.0]])

    def test_zero_error_gives_zero_gradient(self, rng):
        mask = random_mask(Shape(4, 4), 2, 0.5, rng)
        grad = sparse_weight_grad(rng.standard_normal((3, 4)), np.zeros((3, 4)), mask)
        assert np.all(grad.values == 0.0)
        assert np.all(dense_weight_grad(rng.standard_normal((3, 4)), np.zeros((3, 4))) == 0.0)

    @pytest.mark.parametrize("block_size", [1, 2, 4])
    def test_kernels_match_dense_oracle(self, block_size):
        rng = np.random.default_rng(block_size)
        for _ in range(40):
            weight, x, dy = random_case(rng, block_size)
            dense = densify(weight)
            np.testing.assert_allclose(spmm_forward(weight, x), x @ dense.T, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(spmm_backward_input(weight, dy), dy @ dense, rtol=1e-12, atol=1e-12)
            projected = sparsify(dy.T @ x, weight.mask)
            np.testing.assert_allclose(sparse_weight_grad(x, dy, weight.mask).values, projected.values,
                                       rtol=1e-12, atol=1e-12)

    def test_dense_grad_matches_triple_loop(self, rng):
        x, dy = rng.standard_normal((3, 4)), rng.standard_normal((3, 5))
        expected = np.zeros((5, 4))
        for i in range(5):
            for j in range(4):
                for b in range(3):
                    expected[i, j] += dy[b, i] * x[b, j]
        np.testing.assert_allclose(dense_weight_grad(x, dy), expected, rtol=1e-12)

    def test_dense_grad_equals_sparse_grad_under_full_mask(self, rng):
        x, dy = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        sparse = sparse_weight_grad(x, dy, full_mask(4, 4, 2))
        np.testing.assert_allclose(densify(sparse), dense_weight_grad(x, dy), rtol=1e-12)

    def test_dimension_mismatch(self, rng):
        weight = sparsify(np.eye(4), full_mask(4, 4))
        with pytest.raises(DimensionError):
            spmm_forward(weight, np.zeros((2, 3)))
        with pytest.raises(DimensionError):
            spmm_backward_input(weight, np.zeros((2, 3)))
        with pytest.raises(DimensionError):
            sparse_weight_grad(np.zeros((2, 4)), np.zeros((3, 4)), weight.mask)


class TestKernelCounters:
    """Testes da contagem instrumentada de operações"""

    def test_forward_counts_only_active_blocks(self, rng):
        mask = random_mask(Shape(8, 8), 2, 0.5, rng)
        weight = BlockSparseMatrix(mask, rng.standard_normal((mask.n_active, 2, 2)))
        with count_kernel_ops() as counters:
            spmm_forward(weight, rng.standard_normal((5, 8)))
        assert counters.multiplies == 5 * mask.n_active * 4
        assert counters.block_accesses == mask.n_active
        assert counters.dense_materializations == 0

    def test_dense_materializations_are_recorded(self, rng):
        weight = sparsify(np.eye(2), full_mask(2, 2))
        with count_kernel_ops() as counters:
            densify(weight)
            dense_weight_grad(np.ones((1, 2)), np.ones((1, 2)))
        assert counters.dense_materializations == 2

    def test_no_counting_outside_context(self, rng):
        weight = sparsify(np.eye(2), full_mask(2, 2))
        with count_kernel_ops() as counters:
            pass
        spmm_forward(weight, np.ones((1, 2)))
        assert counters.multiplies == 0


class TestRealign:
    """Testes de realign_blocks"""

    def test_survivors_keep_values_new_blocks_zero(self):
        shape = Shape(2, 2)
        old = SparsityMask(shape, 1, np.array([[0, 0], [0, 1]]))
        new = SparsityMask(shape, 1, np.array([[0, 1], [1, 1]]))
        out = realign_blocks(np.array([[[1.0]], [[2.0]]]), old, new)
        np.testing.assert_array_equal(out.ravel(), [2.0, 0.0])

    def test_boolean_arrays_get_false(self):
        shape = Shape(2, 2)
        old = SparsityMask(shape, 1, np.array([[0, 0]]))
        new = SparsityMask(shape, 1, np.array([[0, 0], [1, 0]]))
        out = realign_blocks(np.ones((1, 1, 1), dtype=bool), old, new)
        np.testing.assert_array_equal(out.ravel(), [True, False])

    def test_mismatched_masks_raise(self):
        a = full_mask(2, 2)
        b = full_mask(4, 4)
        with pytest.raises(MaskError):
            realign_blocks(np.zeros((4, 1, 1)), a, b)


class TestBlockNorms:
    """Testes das normas L^p por bloco"""

    def test_three_four_five(self):
        block = np.array([[3.0, -4.0], [0.0, 0.0]])
        assert block_norm(block, 1) == 7.0
        assert block_norm(block, 2) == 5.0
        assert block_norm(block, "inf") == 4.0

    def test_scalar_block_all_norms_equal(self):
        for p in (1, 2, "inf"):
            assert block_norm(np.array([[-2.0]]), p) == 2.0

    def test_norm_ordering(self, rng):
        values = rng.standard_normal((200, 4, 4))
        l1, l2, linf = block_norms(values, 1), block_norms(values, 2), block_norms(values, "inf")
        assert np.all(linf <= l2 + 1e-15)
        assert np.all(l2 <= l1 + 1e-15)

    def test_invalid_order(self):
        with pytest.raises(ValueError):
            norm_order(3)

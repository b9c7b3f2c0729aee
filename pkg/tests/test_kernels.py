import math
import threading

import numpy as np
import pytest

from conftest import unit_patches
from DccnnErrors import InvalidInput, NumericalError
from DccnnKernels import (BlockDiagonal, KernelSource, KernelSpec, block_kernel, kernel_eval,
                          kernel_generating_matrix, lambda_max, median_heuristic_gamma)


class TestKernelEval:

  def test_gaussian_identical_vectors(self, rng):
    u = rng.normal(size=6)
    assert kernel_eval(KernelSpec.gaussian(0.7), u, u) == 1.0

  def test_gaussian_unit_distance(self):
    value = kernel_eval(KernelSpec.gaussian(1.0), [0.0, 0.0], [1.0, 0.0])
    assert value == pytest.approx(math.exp(-1.0), abs=1e-15)

  def test_gaussian_range(self, rng):
    spec = KernelSpec.gaussian(3.0)
    for _ in range(50):
      value = kernel_eval(spec, rng.normal(size=4) * 10, rng.normal(size=4))
      assert 0.0 <= value <= 1.0

  def test_linear_orthogonal(self):
    assert kernel_eval(KernelSpec.linear(), [1.0, 0.0], [0.0, 1.0]) == 0.0

  def test_polynomial(self):
    spec = KernelSpec.polynomial(3, 1.0)
    assert kernel_eval(spec, [1.0, 2.0], [0.5, 0.25]) == pytest.approx(8.0)

  def test_length_mismatch(self):
    with pytest.raises(InvalidInput):
      kernel_eval(KernelSpec.linear(), [1.0, 2.0], [1.0])

  def test_unresolved_gamma(self):
    with pytest.raises(InvalidInput):
      kernel_eval(KernelSpec.gaussian(), [1.0], [2.0])

  def test_invalid_parameters(self):
    with pytest.raises(InvalidInput):
      KernelSpec.gaussian(-1.0)
    with pytest.raises(InvalidInput):
      KernelSpec.polynomial(0)


class TestKernelGeneratingMatrix:

  @pytest.mark.parametrize("spec", [KernelSpec.gaussian(0.5), KernelSpec.linear(), KernelSpec.polynomial(2, 0.5)])
  def test_entries_match_kernel_eval(self, rng, spec):
    Zi, Zj = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    K = kernel_generating_matrix(spec, Zi, Zj).entries
    expected = [[kernel_eval(spec, Zi[:, a], Zj[:, b]) for b in range(4)] for a in range(4)]
    np.testing.assert_allclose(K, expected, rtol=1e-12, atol=1e-14)

  def test_single_patch(self, rng):
    spec = KernelSpec.gaussian(2.0)
    Zi, Zj = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
    K = kernel_generating_matrix(spec, Zi, Zj).entries
    assert K.shape == (1, 1)
    assert K[0, 0] == pytest.approx(kernel_eval(spec, Zi[:, 0], Zj[:, 0]), abs=1e-15)

  def test_identical_patches_give_ones(self):
    Z = np.tile(np.array([[0.6], [0.8]]), (1, 4))
    np.testing.assert_allclose(kernel_generating_matrix(KernelSpec.gaussian(5.0), Z, Z).entries, np.ones((4, 4)))

  def test_transpose_symmetry(self, rng):
    spec = KernelSpec.gaussian(0.9)
    Zi, Zj = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    Kij = kernel_generating_matrix(spec, Zi, Zj, 0, 1)
    Kji = kernel_generating_matrix(spec, Zj, Zi, 1, 0)
    np.testing.assert_allclose(Kij.entries, Kji.entries.T, rtol=0, atol=1e-14)
    assert (Kij.T.i, Kij.T.j) == (1, 0)

  def test_linear_is_gram(self, rng):
    Zi, Zj = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    np.testing.assert_array_equal(kernel_generating_matrix(KernelSpec.linear(), Zi, Zj).entries, Zi.T @ Zj)

  def test_gaussian_unit_patches_diagonal(self, rng):
    Z = unit_patches(rng, 1, 5, 6)[0]
    K = kernel_generating_matrix(KernelSpec.gaussian(1.3), Z, Z).entries
    np.testing.assert_allclose(np.diag(K), 1.0)
    w = np.linalg.eigvalsh(K)
    assert w[0] >= -1e-8 * w[-1]

  def test_geometry_mismatch(self, rng):
    with pytest.raises(InvalidInput):
      kernel_generating_matrix(KernelSpec.linear(), rng.normal(size=(3, 4)), rng.normal(size=(3, 5)))


class TestLambdaMax:

  def test_identity(self):
    assert lambda_max(np.eye(4)) == pytest.approx(1.0)

  def test_diagonal(self):
    assert lambda_max(np.diag([0.2, 0.7, 0.1])) == pytest.approx(0.7)

  def test_rank_one(self):
    v = np.array([0.0, 2.0, 0.0])
    assert lambda_max(np.outer(v, v)) == pytest.approx(4.0)

  def test_symmetrizes(self):
    M = np.array([[1.0, 2.0], [0.0, 1.0]])
    assert lambda_max(M) == pytest.approx(2.0)

  def test_symmetric_input_unchanged(self, rng):
    A = rng.normal(size=(5, 5))
    S = A @ A.T
    assert lambda_max(S) == pytest.approx(np.linalg.eigvalsh(S)[-1], rel=1e-12)

  def test_non_finite(self):
    with pytest.raises(NumericalError):
      lambda_max(np.array([[np.nan, 0.0], [0.0, 1.0]]))

  def test_not_square(self):
    with pytest.raises(InvalidInput):
      lambda_max(np.ones((2, 3)))


class TestBlockKernel:

  def test_single_class_is_the_kernel(self, rng):
    K = kernel_generating_matrix(KernelSpec.linear(), rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
    np.testing.assert_array_equal(block_kernel(0, K, 1).dense(), K.entries)

  def test_dense_layout(self, rng):
    K = kernel_generating_matrix(KernelSpec.linear(), rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))
    dense = block_kernel(1, K, 3).dense()
    assert dense.shape == (6, 6)
    np.testing.assert_array_equal(dense[2:4, 2:4], K.entries)
    assert np.count_nonzero(dense[:2]) == 0 and np.count_nonzero(dense[4:]) == 0

  def test_out_of_range(self, rng):
    K = kernel_generating_matrix(KernelSpec.linear(), np.eye(2), np.eye(2))
    with pytest.raises(InvalidInput):
      block_kernel(3, K, 3)

  def test_row_product_is_dense_block_row(self, rng):
    K = kernel_generating_matrix(KernelSpec.linear(), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    V = rng.normal(size=(6, 4))
    bk = block_kernel(1, K, 3)
    np.testing.assert_allclose(bk.row_product(V), (bk.dense() @ V)[2:4], atol=1e-14)
    with pytest.raises(InvalidInput):
      bk.row_product(V[:5])

  def test_block_algebra(self, rng):
    spec = KernelSpec.linear()
    A = kernel_generating_matrix(spec, rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))
    B = kernel_generating_matrix(spec, rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))
    same = block_kernel(0, A, 2) + block_kernel(0, B, 2)
    np.testing.assert_allclose(same.blocks[0], A.entries + B.entries)
    np.testing.assert_array_equal(same.blocks[1], 0.0)
    apart = block_kernel(0, A, 2) + block_kernel(1, B, 2)
    np.testing.assert_array_equal(apart.blocks[0], A.entries)
    np.testing.assert_array_equal(apart.blocks[1], B.entries)
    np.testing.assert_allclose((2.0 * apart).dense(), 2.0 * apart.dense())

  def test_lambda_max_is_max_over_blocks(self):
    rng = np.random.default_rng(5)
    for m in (1, 2, 3):
      for p in (1, 2, 3):
        blocks = []
        for _ in range(m):
          A = rng.normal(size=(p, p))
          blocks.append(A @ A.T)
        D = BlockDiagonal(np.array(blocks))
        assert abs(D.lambda_max() - np.linalg.eigvalsh(D.dense())[-1]) <= 1e-10
        np.testing.assert_allclose(D.block_lambda_max(), [np.linalg.eigvalsh(b)[-1] for b in blocks])


class TestKernelSource:

  def test_pair_and_transpose(self, rng):
    source = KernelSource(unit_patches(rng, 4, 3, 2), KernelSpec.gaussian(1.0))
    np.testing.assert_allclose(source.pair(3, 1), source.pair(1, 3).T)
    assert source.matrix(0, 2).entries.shape == (2, 2)

  def test_row_matches_pairs(self, rng):
    source = KernelSource(unit_patches(rng, 5, 3, 2), KernelSpec.gaussian(0.8))
    row = source.row(2)
    for j in range(5):
      np.testing.assert_allclose(row[j], source.pair(2, j), rtol=1e-12, atol=1e-14)

  def test_cache_hits_and_budget(self, rng):
    source = KernelSource(unit_patches(rng, 4, 3, 2), KernelSpec.linear(), cache_budget=2)
    source.pair(0, 1)
    source.pair(1, 0)
    assert source.hits == 1 and source.misses == 1
    source.pair(0, 2)
    source.pair(0, 3)
    source.pair(0, 1)
    assert source.misses == 4

  def test_results_independent_of_cache(self, rng):
    patches = unit_patches(rng, 5, 3, 3)
    cached = KernelSource(patches, KernelSpec.gaussian(0.5), cache_budget=256)
    uncached = KernelSource(patches, KernelSpec.gaussian(0.5), cache_budget=0)
    for i in range(5):
      np.testing.assert_allclose(cached.row(i), uncached.row(i), rtol=1e-12, atol=1e-14)

  def test_concurrent_reads(self, rng):
    source = KernelSource(unit_patches(rng, 6, 3, 2), KernelSpec.gaussian(1.0), cache_budget=4)
    expected = [source.row(i).copy() for i in range(6)]
    errors = []

    def work():
      for i in range(6):
        if not np.allclose(source.row(i), expected[i], rtol=1e-12, atol=1e-14):
          errors.append(i)

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
      t.start()
    for t in threads:
      t.join()
    assert not errors

  def test_weighted_cross(self, rng):
    patches = unit_patches(rng, 4, 3, 2)
    source = KernelSource(patches, KernelSpec.gaussian(1.0))
    x = unit_patches(rng, 1, 3, 2)[0]
    W = np.array([[0.5, 0.0, -1.0, 2.0], [0.0, 0.0, 0.0, 0.0]])
    C = source.weighted_cross(x, W)
    expected = sum(W[0, j] * kernel_generating_matrix(source.spec, x, patches[j]).entries for j in range(4))
    np.testing.assert_allclose(C[0], expected, rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(C[1], 0.0)

  def test_unresolved_gamma(self, rng):
    with pytest.raises(InvalidInput):
      KernelSource(unit_patches(rng, 2, 2, 2), KernelSpec.gaussian())


class TestMedianHeuristic:

  def test_deterministic_and_positive(self, rng):
    patches = unit_patches(rng, 6, 4, 5)
    gamma = median_heuristic_gamma(patches, seed=3)
    assert gamma > 0
    assert gamma == median_heuristic_gamma(patches, seed=3)

  def test_identical_patches_fall_back(self):
    patches = np.ones((3, 2, 4))
    assert median_heuristic_gamma(patches) == 1.0

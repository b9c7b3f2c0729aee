"""
  DccnnRecovery - linear weight and convolution output from a dual solution

  The linear weight L is the set of eigenvectors of the dual quadratic form
  whose eigenvalue reaches the threshold (ideally exactly 1). For
  multiclass the form is block diagonal; block k's eigenvectors are placed
  in rows k*p .. (k+1)*p of L.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

from DccnnErrors import InvalidInput, NoFiltersRecovered
from DccnnKernels import KernelGeneratingMatrix, KernelSource, block_kernel
from DccnnPatches import PoolingMatrix
from DccnnSolver import DualSolution, accumulate_block_quadratic

log = logging.getLogger(__name__)

NEAR_MISS_BAND = 0.1


@dataclass(frozen=True)
class LinearWeight:
  columns: np.ndarray  # Bp x r
  eigenvalues: np.ndarray  # r, descending
  threshold: float
  block_size: int  # p
  num_blocks: int = 1

  def __post_init__(self):
    # one memory layout whatever built the columns, so scores are bitwise reproducible
    object.__setattr__(self, "columns", np.ascontiguousarray(self.columns, dtype=np.float64))

  @property
  def rank(self) -> int:
    return self.columns.shape[1]

  def block(self, k: int) -> np.ndarray:
    """rows of class k, p x r"""
    p = self.block_size
    return self.columns[k * p:(k + 1) * p]

  def blocks(self) -> np.ndarray:
    """B x p x r"""
    return self.columns.reshape(self.num_blocks, self.block_size, self.rank)


@dataclass(frozen=True)
class ConvOutput:
  values: np.ndarray  # p x r, or q x r after pooling
  sample: int = None

  def vectorize(self) -> np.ndarray:
    """column-major: filter k's map is the k-th contiguous chunk"""
    return self.values.ravel(order="F")


def linear_weight_from_quadratic(S: np.ndarray, threshold: float = 0.9) -> LinearWeight:
  """
  :param S: one p x p form, or B x p x p diagonal blocks
  :param threshold: eigenvalues >= threshold are kept
  """
  if not 0.0 < threshold <= 1.0:
    raise InvalidInput("threshold must be in (0, 1], got " + str(threshold))
  S = np.asarray(S, dtype=np.float64)
  if S.ndim == 2:
    S = S[np.newaxis]
  B, p, _ = S.shape

  values, vectors = [], []
  top = -np.inf
  for k in range(B):
    w, V = eigh(0.5 * (S[k] + S[k].T))
    keep = w >= threshold
    near = w[(w < threshold) & (w >= threshold - NEAR_MISS_BAND)]
    if near.size:
      log.warning("block %d: eigenvalues just below threshold %g: %s", k, threshold,
                  ", ".join("%.6f" % v for v in np.sort(near)[::-1]))
    # end if
    for idx in np.flatnonzero(keep)[::-1]:
      column = np.zeros(B * p)
      column[k * p:(k + 1) * p] = V[:, idx]
      values.append(w[idx])
      vectors.append(column)
    # end for each kept eigenvector
    top = max(top, float(w[-1]))
  # end for each block

  if not values:
    raise NoFiltersRecovered(float(top), threshold)
  values = np.array(values)
  order = np.argsort(-values, kind="stable")
  columns = np.ascontiguousarray(np.column_stack(vectors)[:, order])
  log.info("recovered %d filters, eigenvalues %.6f .. %.6f", columns.shape[1], values.max(), values.min())
  return LinearWeight(columns, values[order], float(threshold), p, B)
# end linear_weight_from_quadratic


def recover_linear_weight(sol: DualSolution, source: KernelSource, threshold: float = 0.9) -> LinearWeight:
  S = accumulate_block_quadratic(sol.weights, source)
  return linear_weight_from_quadratic(S, threshold)


def conv_output_from_cross(C: np.ndarray, L: LinearWeight, sample: int = None) -> ConvOutput:
  """
  :param C: B x p x p weighted cross kernels sum_j W[b, j] K(x, x_j)
  :return: sum_b C[b] L_b
  """
  if C.shape[0] != L.num_blocks or C.shape[1] != L.block_size:
    raise InvalidInput("cross kernels %s do not fit a weight with %d blocks of %d rows"
                       % (C.shape, L.num_blocks, L.block_size))
  B = L.num_blocks
  out = np.zeros((L.block_size, L.rank))
  for b in range(B):
    out += block_kernel(b, KernelGeneratingMatrix(C[b]), B).row_product(L.columns)
  return ConvOutput(out, sample)


def recover_conv_output(sol: DualSolution, source: KernelSource, L: LinearWeight,
                        x_patches: np.ndarray, sample: int = None) -> ConvOutput:
  """
  sum_j alpha_j y_j K(x, x_j) L, or its folded multiclass form

  :param x_patches: d1 x p patch matrix of x, prepared the same way as the
                    training patches in source
  """
  C = source.weighted_cross(x_patches, sol.weights)
  return conv_output_from_cross(C, L, sample)


def apply_pooling(out: ConvOutput, G: PoolingMatrix) -> ConvOutput:
  if G.entries.shape[1] != out.values.shape[0]:
    raise InvalidInput("pooling matrix has %d columns, conv output has %d rows"
                       % (G.entries.shape[1], out.values.shape[0]))
  return ConvOutput(G.entries @ out.values, out.sample)

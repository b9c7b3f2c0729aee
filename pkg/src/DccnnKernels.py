"""
  DccnnKernels - patch kernels and kernel generating matrices

  K(x_i, x_j) is the p x p matrix of kernel values between every patch of
  x_i and every patch of x_j. Feature maps are never formed here; the
  only place they exist explicitly is DccnnOracle.
"""

import enum
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import eigvalsh

from DccnnErrors import InvalidInput, NumericalError
from DccnnPatches import PatchMatrix

log = logging.getLogger(__name__)


class KernelKind(str, enum.Enum):
  GAUSSIAN_RBF = "gaussian_rbf"
  LINEAR = "linear"
  POLYNOMIAL = "polynomial"


@dataclass(frozen=True)
class KernelSpec:
  """
  kernel kind plus its parameters

  gamma is only used by gaussian_rbf; None means "pick it with the median
  heuristic" and must be resolved before the kernel is evaluated.
  degree and offset are only used by polynomial: (u'v + offset)^degree.
  """
  kind: KernelKind = KernelKind.GAUSSIAN_RBF
  gamma: float = None
  degree: int = 2
  offset: float = 1.0

  def __post_init__(self):
    object.__setattr__(self, "kind", KernelKind(self.kind))
    if self.kind == KernelKind.GAUSSIAN_RBF and self.gamma is not None and not self.gamma > 0:
      raise InvalidInput("gaussian gamma must be > 0, got " + str(self.gamma))
    if self.kind == KernelKind.POLYNOMIAL and int(self.degree) < 1:
      raise InvalidInput("polynomial degree must be >= 1, got " + str(self.degree))

  @classmethod
  def gaussian(cls, gamma: float = None) -> "KernelSpec":
    return cls(KernelKind.GAUSSIAN_RBF, gamma=gamma)

  @classmethod
  def linear(cls) -> "KernelSpec":
    return cls(KernelKind.LINEAR)

  @classmethod
  def polynomial(cls, degree: int = 2, offset: float = 1.0) -> "KernelSpec":
    return cls(KernelKind.POLYNOMIAL, degree=int(degree), offset=float(offset))

  @property
  def needs_unit_patches(self) -> bool:
    return self.kind == KernelKind.GAUSSIAN_RBF

  @property
  def resolved(self) -> bool:
    return self.kind != KernelKind.GAUSSIAN_RBF or self.gamma is not None

  def with_gamma(self, gamma: float) -> "KernelSpec":
    return replace(self, gamma=float(gamma))

  def pairwise(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """
    kernel values between the columns of A (d1 x a) and B (d1 x b)

    :return: a x b matrix
    """
    if not self.resolved:
      raise InvalidInput("gaussian gamma has not been resolved")
    G = A.T @ B
    if self.kind == KernelKind.LINEAR:
      return G
    if self.kind == KernelKind.POLYNOMIAL:
      return (G + self.offset) ** self.degree
    sq = np.einsum('ij,ij->j', A, A)[:, None] + np.einsum('ij,ij->j', B, B)[None, :] - 2.0 * G
    return np.exp(-self.gamma * np.maximum(sq, 0.0))
# end class KernelSpec


def kernel_eval(spec: KernelSpec, u: np.ndarray, v: np.ndarray) -> float:
  u = np.asarray(u, dtype=np.float64).ravel()
  v = np.asarray(v, dtype=np.float64).ravel()
  if u.shape != v.shape:
    raise InvalidInput("kernel arguments differ in length: %d vs %d" % (u.size, v.size))
  if spec.kind == KernelKind.LINEAR:
    return float(u @ v)
  if spec.kind == KernelKind.POLYNOMIAL:
    return float((u @ v + spec.offset) ** spec.degree)
  if not spec.resolved:
    raise InvalidInput("gaussian gamma has not been resolved")
  diff = u - v
  return float(np.exp(-spec.gamma * (diff @ diff)))


@dataclass(frozen=True)
class KernelGeneratingMatrix:
  entries: np.ndarray  # p x p
  i: int = None
  j: int = None

  @property
  def T(self) -> "KernelGeneratingMatrix":
    return KernelGeneratingMatrix(self.entries.T, self.j, self.i)


def _entries(Z) -> np.ndarray:
  if isinstance(Z, PatchMatrix):
    return Z.entries
  return np.asarray(Z, dtype=np.float64)


def kernel_generating_matrix(spec: KernelSpec, Zi, Zj, i: int = None, j: int = None) -> KernelGeneratingMatrix:
  """
  :param Zi: patch matrix of sample i (d1 x p)
  :param Zj: patch matrix of sample j (d1 x p)
  :return: K with K[a, b] = kernel(column a of Zi, column b of Zj)
  """
  A, B = _entries(Zi), _entries(Zj)
  if A.ndim != 2 or A.shape != B.shape:
    raise InvalidInput("patch matrices differ in geometry: %s vs %s" % (A.shape, B.shape))
  return KernelGeneratingMatrix(spec.pairwise(A, B), i, j)


def lambda_max(M: np.ndarray) -> float:
  """largest eigenvalue of (M + M')/2"""
  M = np.asarray(M, dtype=np.float64)
  if M.ndim != 2 or M.shape[0] != M.shape[1]:
    raise InvalidInput("lambda_max needs a square matrix, got shape " + str(M.shape))
  if not np.all(np.isfinite(M)):
    raise NumericalError("non-finite entries in quadratic form")
  p = M.shape[0]
  sym = 0.5 * (M + M.T)
  return float(eigvalsh(sym, subset_by_index=[p - 1, p - 1])[0])


@dataclass(frozen=True)
class BlockKernel:
  """
  the logical mp x mp matrix diag(0, ..., K at block k, ..., 0)

  k is zero-based. Only the inner p x p block is stored.
  """
  k: int
  inner: KernelGeneratingMatrix
  m: int

  def dense(self) -> np.ndarray:
    p = self.inner.entries.shape[0]
    out = np.zeros((self.m * p, self.m * p))
    out[self.k * p:(self.k + 1) * p, self.k * p:(self.k + 1) * p] = self.inner.entries
    return out

  def row_product(self, V: np.ndarray) -> np.ndarray:
    """rows k*p .. (k+1)*p of dense() @ V without forming the dense matrix"""
    p = self.inner.entries.shape[0]
    V = np.asarray(V, dtype=np.float64)
    if V.shape[0] != self.m * p:
      raise InvalidInput("operand has %d rows, block kernel has %d" % (V.shape[0], self.m * p))
    return np.ascontiguousarray(self.inner.entries) @ np.ascontiguousarray(V[self.k * p:(self.k + 1) * p])

  def __add__(self, other):
    return BlockDiagonal.from_block(self) + other

  def __mul__(self, scalar: float) -> "BlockDiagonal":
    return BlockDiagonal.from_block(self) * scalar

  __rmul__ = __mul__


def block_kernel(k: int, K: KernelGeneratingMatrix, m: int) -> BlockKernel:
  if m < 1 or not 0 <= k < m:
    raise InvalidInput("class index %d out of range for %d classes" % (k, m))
  return BlockKernel(int(k), K, int(m))


class BlockDiagonal:
  """m diagonal p x p blocks of a logical mp x mp matrix"""

  def __init__(self, blocks: np.ndarray):
    self.blocks = np.asarray(blocks, dtype=np.float64)

  @classmethod
  def zeros(cls, m: int, p: int) -> "BlockDiagonal":
    return cls(np.zeros((m, p, p)))

  @classmethod
  def from_block(cls, bk: BlockKernel) -> "BlockDiagonal":
    p = bk.inner.entries.shape[0]
    out = cls.zeros(bk.m, p)
    out.blocks[bk.k] = bk.inner.entries
    return out

  @property
  def m(self) -> int:
    return self.blocks.shape[0]

  def __add__(self, other) -> "BlockDiagonal":
    if isinstance(other, BlockKernel):
      other = BlockDiagonal.from_block(other)
    if not isinstance(other, BlockDiagonal) or other.blocks.shape != self.blocks.shape:
      raise InvalidInput("block shapes do not match")
    return BlockDiagonal(self.blocks + other.blocks)

  def __mul__(self, scalar: float) -> "BlockDiagonal":
    return BlockDiagonal(self.blocks * float(scalar))

  __rmul__ = __mul__

  def block_lambda_max(self) -> np.ndarray:
    return np.array([lambda_max(b) for b in self.blocks])

  def lambda_max(self) -> float:
    return float(np.max(self.block_lambda_max()))

  def dense(self) -> np.ndarray:
    m, p, _ = self.blocks.shape
    out = np.zeros((m * p, m * p))
    for k in range(m):
      out[k * p:(k + 1) * p, k * p:(k + 1) * p] = self.blocks[k]
    return out
# end class BlockDiagonal


class KernelSource:
  """
  kernel generating matrices of one training set, computed on demand

  Pairs are kept in a bounded LRU cache keyed by (i, j) with i <= j;
  K(x_j, x_i) is served as the transpose of K(x_i, x_j). Cache access is
  serialized by a lock, so one source may be shared by several threads.
  """

  def __init__(self, patches: np.ndarray, spec: KernelSpec, cache_budget: int = 256):
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3:
      raise InvalidInput("expected n x d1 x p patches, got shape " + str(patches.shape))
    if not spec.resolved:
      raise InvalidInput("gaussian gamma has not been resolved")
    self.patches = patches
    self.spec = spec
    self.cache_budget = int(cache_budget)
    self.__cache = OrderedDict()
    self.__lock = threading.Lock()
    self.hits = 0
    self.misses = 0

  @property
  def n(self) -> int:
    return self.patches.shape[0]

  @property
  def p(self) -> int:
    return self.patches.shape[2]

  @property
  def d1(self) -> int:
    return self.patches.shape[1]

  def __lookup(self, key):
    with self.__lock:
      value = self.__cache.get(key)
      if value is not None:
        self.__cache.move_to_end(key)
        self.hits += 1
      else:
        self.misses += 1
      return value

  def __store(self, key, value):
    if self.cache_budget <= 0:
      return
    with self.__lock:
      self.__cache[key] = value
      self.__cache.move_to_end(key)
      while len(self.__cache) > self.cache_budget:
        self.__cache.popitem(last=False)

  def pair(self, i: int, j: int) -> np.ndarray:
    """K(x_i, x_j)"""
    if i > j:
      return self.pair(j, i).T
    key = (i, j)
    value = self.__lookup(key)
    if value is None:
      value = self.spec.pairwise(self.patches[i], self.patches[j])
      self.__store(key, value)
    return value

  def matrix(self, i: int, j: int) -> KernelGeneratingMatrix:
    return KernelGeneratingMatrix(self.pair(i, j), i, j)

  def cross(self, Zx: np.ndarray, indices=None) -> np.ndarray:
    """
    K(x, x_j) for a patch matrix Zx (d1 x p) against training samples

    :return: len(indices) x p x p array
    """
    Zx = np.asarray(Zx, dtype=np.float64)
    if Zx.shape != self.patches.shape[1:]:
      raise InvalidInput("patch matrix %s does not match training patches %s"
                         % (Zx.shape, self.patches.shape[1:]))
    train = self.patches if indices is None else self.patches[indices]
    k = train.shape[0]
    if k == 0:
      return np.zeros((0, self.p, self.p))
    flat = train.transpose(1, 0, 2).reshape(self.d1, k * self.p)
    return self.spec.pairwise(Zx, flat).reshape(self.p, k, self.p).transpose(1, 0, 2)

  def row(self, i: int) -> np.ndarray:
    """K(x_i, x_j) for every training sample j, as an n x p x p array"""
    out = np.empty((self.n, self.p, self.p))
    missing = []
    for j in range(self.n):
      key = (i, j) if i <= j else (j, i)
      value = self.__lookup(key)
      if value is None:
        missing.append(j)
      else:
        out[j] = value if i <= j else value.T
    # end for each j
    if missing:
      computed = self.cross(self.patches[i], np.array(missing))
      for j, value in zip(missing, computed):
        out[j] = value
        if i <= j:
          self.__store((i, j), value)
        else:
          self.__store((j, i), value.T)
      # end for each computed
    # end if
    return out

  def weighted_cross(self, Zx: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """
    sum_j weights[b, j] K(x, x_j) for every block b

    :param weights: B x n signed dual weights
    :return: B x p x p array
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    active = np.flatnonzero(np.any(weights != 0.0, axis=0))
    if active.size == 0:
      return np.zeros((weights.shape[0], self.p, self.p))
    K = self.cross(Zx, active)
    return np.tensordot(weights[:, active], K, axes=(1, 0))

  def diag_lambda_max(self) -> np.ndarray:
    """lambda_max(K(x_i, x_i)) for every training sample"""
    return np.array([lambda_max(self.pair(i, i)) for i in range(self.n)])
# end class KernelSource


def median_heuristic_gamma(patches: np.ndarray, seed: int = 0, pairs: int = 1000) -> float:
  """
  gamma = 1 / median squared distance over random patch pairs

  Falls back to 1.0 when the median distance is zero.
  """
  patches = np.asarray(patches, dtype=np.float64)
  n, d1, p = patches.shape
  columns = patches.transpose(0, 2, 1).reshape(n * p, d1)
  rng = np.random.default_rng(seed)
  a = rng.integers(0, columns.shape[0], size=pairs)
  b = rng.integers(0, columns.shape[0], size=pairs)
  sq = np.sum((columns[a] - columns[b]) ** 2, axis=1)
  median = float(np.median(sq))
  if not median > 0:
    log.warning("median squared patch distance is %g, using gamma = 1.0", median)
    return 1.0
  return 1.0 / median

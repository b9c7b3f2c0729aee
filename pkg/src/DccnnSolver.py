"""
  DccnnSolver - coordinate ascent on the eigenvalue constrained dual

  Binary:      maximize  sum_i t(alpha_i)
               s.t.      lambda_max( sum_ij alpha_i alpha_j y_i y_j K(x_i, x_j) ) <= 1

  Multiclass:  the same with one coefficient alpha[i, k] per sample and
               class (alpha[i, y_i] = 0) and the quadratic form replaced by
               m diagonal blocks, block k built from the folded weights
               alpha'[k, i] = [k == y_i] * sum_s alpha[i, s] - alpha[i, k].

  Both are handled by one engine working on signed weights W (B x n):
  binary is B = 1 with W[0, i] = y_i alpha_i. Accumulations R_b are
  updated incrementally; a coordinate only touches the blocks it appears in.

  Coordinate ascent never lowers a coefficient, so it can stop short once
  lambda_max reaches 1. With refine_rounds > 0 a penalty refinement runs
  after the sweeps and the better of the two points is kept.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import fmin_l_bfgs_b

from DccnnErrors import EmptyDataset, InfeasibleStart, InvalidInput, NumericalError
from DccnnKernels import BlockDiagonal, KernelSource
from DccnnLosses import LossSpec, dual_objective, feasible_interval

log = logging.getLogger(__name__)

COORDINATE_ORDERS = ("ascending_lambda", "index")


@dataclass(frozen=True)
class SolverOptions:
  binary_search_tol: float = 1e-6  # relative to c
  feasibility_tol: float = 1e-8
  max_bisect_iters: int = 60
  sweeps: int = 1
  sweep_tol: float = 0.0  # > 0: stop sweeping once a pass gains no more than this
  coordinate_order: str = "ascending_lambda"
  kernel_cache_budget: int = 256
  refine_rounds: int = 0  # penalty stages after the sweeps, 0 keeps plain coordinate ascent
  refine_max_iters: int = 2000  # L-BFGS-B iterations per stage
  debug: bool = False

  def __post_init__(self):
    if not (self.binary_search_tol > 0 and self.feasibility_tol > 0):
      raise InvalidInput("solver tolerances must be > 0")
    if self.max_bisect_iters < 1 or self.sweeps < 1:
      raise InvalidInput("max_bisect_iters and sweeps must be >= 1")
    if self.sweep_tol < 0:
      raise InvalidInput("sweep_tol must be >= 0")
    if self.refine_rounds < 0 or self.refine_max_iters < 1:
      raise InvalidInput("refine_rounds must be >= 0 and refine_max_iters >= 1")
    if self.coordinate_order not in COORDINATE_ORDERS:
      raise InvalidInput("coordinate order must be one of " + ", ".join(COORDINATE_ORDERS))
# end class SolverOptions


def fold_multiclass(alpha: np.ndarray, labels: np.ndarray) -> np.ndarray:
  """
  :param alpha: n x m coefficients with alpha[i, labels[i]] = 0
  :return: m x n folded weights alpha'
  """
  alpha = np.asarray(alpha, dtype=np.float64)
  labels = np.asarray(labels, dtype=np.int64)
  folded = -alpha.T.copy()
  folded[labels, np.arange(alpha.shape[0])] += alpha.sum(axis=1)
  return folded


@dataclass(frozen=True)
class DualSolution:
  alpha: np.ndarray  # (n,) binary, (n, m) multiclass
  labels: np.ndarray
  c: float
  loss: LossSpec
  final_lambda_max: float
  objective: float
  sweep_count: int
  num_classes: int = None  # None for binary
  accumulation: np.ndarray = field(default=None, repr=False)  # B x p x p

  @property
  def is_multiclass(self) -> bool:
    return self.num_classes is not None

  @property
  def weights(self) -> np.ndarray:
    """signed block weights, B x n"""
    if self.is_multiclass:
      return fold_multiclass(self.alpha, self.labels)
    return (np.asarray(self.labels, dtype=np.float64) * self.alpha)[np.newaxis, :]
# end class DualSolution


def accumulate_block_quadratic(weights: np.ndarray, source: KernelSource) -> np.ndarray:
  """
  S_b = sum_ij W[b, i] W[b, j] K(x_i, x_j) for every block, recomputed from scratch

  :return: B x p x p, each block symmetrized
  """
  weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
  if weights.shape[1] != source.n:
    raise InvalidInput("%d dual weights for %d samples" % (weights.shape[1], source.n))
  B, p = weights.shape[0], source.p
  S = np.zeros((B, p, p))
  active = np.flatnonzero(np.any(weights != 0.0, axis=0))
  for i in active:
    K = source.cross(source.patches[i], active)
    S += weights[:, i, None, None] * np.tensordot(weights[:, active], K, axes=(1, 0))
  # end for each active sample
  if not np.all(np.isfinite(S)):
    raise NumericalError("non-finite entries in accumulated quadratic form")
  return 0.5 * (S + S.transpose(0, 2, 1))


def accumulate_quadratic(alpha: np.ndarray, labels: np.ndarray, source: KernelSource) -> np.ndarray:
  alpha = np.asarray(alpha, dtype=np.float64)
  labels = np.asarray(labels, dtype=np.float64)
  if alpha.shape != labels.shape:
    raise InvalidInput("alpha has shape %s, labels %s" % (alpha.shape, labels.shape))
  return accumulate_block_quadratic((labels * alpha)[np.newaxis, :], source)[0]


class _CoordinateAscent:
  """
  single-owner solver state

  A coordinate is described by its sample i, its current value and a list
  of (block, base, slope): the sample's weight in that block is
  base + slope * value.
  """

  def __init__(self, source: KernelSource, loss: LossSpec, c: float, opts: SolverOptions,
               num_blocks: int, progress: Callable = None):
    self.source = source
    self.loss = loss
    self.c = float(c)
    self.opts = opts
    self.progress = progress
    self.W = np.zeros((num_blocks, source.n))
    self.R = BlockDiagonal.zeros(num_blocks, source.p)
    self.block_lambda = np.zeros(num_blocks)
    self.objective = 0.0
    self.coordinate = 0
    self.lo, self.hi = feasible_interval(loss, c)
    self.tol = opts.binary_search_tol * self.c
    if self.R.lambda_max() > 1.0:
      raise InfeasibleStart("alpha = 0 violates lambda_max <= 1")

  def __forms(self, i, Krow, effects):
    """per affected block: (rest, T) with the sample's own contribution removed"""
    Kii = Krow[i]
    forms = []
    for b, _, _ in effects:
      X = np.tensordot(self.W[b], Krow, axes=(0, 0)) - self.W[b, i] * Kii
      T = X + X.T
      w = self.W[b, i]
      forms.append((self.R.blocks[b] - (w * w * Kii + w * T), T))
    # end for each block
    return forms

  def __matrices(self, a, Kii, forms, effects):
    out = []
    for (rest, T), (_, base, slope) in zip(forms, effects):
      w = base + slope * a
      out.append(rest + w * w * Kii + w * T)
    return out

  def __lambda(self, a, Kii, forms, effects) -> float:
    return BlockDiagonal(self.__matrices(a, Kii, forms, effects)).lambda_max()

  def __feasible(self, a, Kii, forms, effects) -> bool:
    return self.__lambda(a, Kii, forms, effects) <= 1.0

  def __bisect(self, good, bad, Kii, forms, effects):
    for _ in range(self.opts.max_bisect_iters):
      if abs(bad - good) <= self.tol:
        break
      mid = 0.5 * (good + bad)
      if self.__feasible(mid, Kii, forms, effects):
        good = mid
      else:
        bad = mid
    # end for
    return good

  def __grid_scan(self, start, target, Kii, forms, effects):
    best = start
    for a in np.linspace(start, target, 128)[1:]:
      if not self.__feasible(a, Kii, forms, effects):
        break
      best = a
    # end for
    return best

  def update(self, i: int, current: float, effects, Krow: np.ndarray) -> float:
    Kii = Krow[i]
    forms = self.__forms(i, Krow, effects)
    target = min(max(self.loss.peak(self.c), self.lo), self.hi)
    if target == current:
      return current

    if self.__feasible(target, Kii, forms, effects):
      new = target
    else:
      new = self.__bisect(current, target, Kii, forms, effects)
      samples = [current + (new - current) * f for f in (0.25, 0.5, 0.75)]
      if not all(self.__feasible(a, Kii, forms, effects) for a in samples):
        log.warning("sample %d: feasibility not monotone on [%g, %g], scanning grid", i, current, target)
        new = self.__grid_scan(current, target, Kii, forms, effects)
      # end if
      if self.opts.debug and abs(target - new) > self.tol:
        step = self.tol if target > new else -self.tol
        if self.__feasible(new + step, Kii, forms, effects):
          raise NumericalError("bisection bracket broken at sample %d: %r + %r still feasible" % (i, new, step))
      # end if debug
    # end if

    for (b, _, _), M in zip(effects, self.__matrices(new, Kii, forms, effects)):
      self.R.blocks[b] = M
      self.block_lambda[b] = BlockDiagonal(M[np.newaxis]).lambda_max()
    # end for
    for b, base, slope in effects:
      self.W[b, i] = base + slope * new

    gain = float(self.loss.dual_term(new, self.c) - self.loss.dual_term(current, self.c))
    self.objective += gain
    if self.opts.debug and self.block_lambda.max() > 1.0 + self.opts.feasibility_tol:
      raise NumericalError("lambda_max %r after update of sample %d" % (self.block_lambda.max(), i))
    return new
  # end update

  def report(self):
    self.coordinate += 1
    log.debug("coordinate %d: objective %.10g, lambda_max %.10g",
              self.coordinate, self.objective, self.block_lambda.max())
    if self.progress is not None:
      self.progress(self.coordinate, self.objective, float(self.block_lambda.max()))
# end class _CoordinateAscent


def _visit_order(source: KernelSource, opts: SolverOptions) -> np.ndarray:
  if opts.coordinate_order == "index":
    return np.arange(source.n)
  return np.argsort(source.diag_lambda_max(), kind="stable")


def _check_consistency(engine: _CoordinateAscent, source: KernelSource):
  recomputed = accumulate_block_quadratic(engine.W, source)
  scale = 1.0 + np.max(np.abs(engine.R.blocks))
  drift = np.max(np.abs(engine.R.blocks - recomputed))
  if drift > 1e-8 * scale:
    raise NumericalError("incremental accumulation drifted by %g" % drift)


def _run_sweeps(engine: _CoordinateAscent, order: np.ndarray, sweep, opts: SolverOptions) -> int:
  sweeps = 0
  for _ in range(opts.sweeps):
    before = engine.objective
    sweep(order)
    sweeps += 1
    log.info("sweep %d: objective %.10g, lambda_max %.10g", sweeps, engine.objective, engine.block_lambda.max())
    if opts.sweep_tol > 0 and engine.objective - before <= opts.sweep_tol:
      break
  # end for each sweep
  return sweeps


ROW_CACHE_ENTRIES = 4000000


class _PenaltyRefinement:
  """
  moves weight between coordinates after the sweeps

  Each stage maximizes

    sum_v t(x_v) - rho/2 sum_b sum_j max(0, lambda_j(S_b(x)) - 1)^2

  over the box with L-BFGS-B, rho growing by 100 per stage, warm started
  from the previous stage. The result is scaled back inside
  lambda_max <= 1; S_b is quadratic in x and the box starts at 0, so the
  scaled point stays in the box.

  Variable v belongs to sample owner[v] and adds slope[v, e] * x_v to
  W[block[v, e], owner[v]] for every e.
  """

  def __init__(self, source: KernelSource, loss: LossSpec, c: float, opts: SolverOptions,
               num_blocks: int, owner, block, slope):
    self.source = source
    self.loss = loss
    self.c = float(c)
    self.opts = opts
    self.num_blocks = num_blocks
    self.owner = np.asarray(owner, dtype=np.int64)
    self.block = np.asarray(block, dtype=np.int64)
    self.slope = np.asarray(slope, dtype=np.float64)
    lo, hi = feasible_interval(loss, c)
    if loss.mirrored:
      lo, hi = lo + 1e-12 * self.c, hi - 1e-12 * self.c
    self.lo, self.hi = lo, hi
    self.bounds = [(lo, None if np.isinf(hi) else hi)] * self.owner.size
    n, p = source.n, source.p
    self.rows = None
    if n * n * p * p <= ROW_CACHE_ENTRIES:
      self.rows = [source.row(i) for i in range(n)]

  def __row(self, i: int) -> np.ndarray:
    return self.rows[i] if self.rows is not None else self.source.row(i)

  def weights(self, x: np.ndarray) -> np.ndarray:
    W = np.zeros((self.num_blocks, self.source.n))
    for e in range(self.block.shape[1]):
      np.add.at(W, (self.block[:, e], self.owner), self.slope[:, e] * x)
    return W

  def __penalized(self, x: np.ndarray, rho: float):
    """value and gradient of the negated stage objective"""
    W = self.weights(x)
    X = [np.tensordot(W, self.__row(i), axes=(1, 0)) for i in range(self.source.n)]
    S = np.zeros((self.num_blocks, self.source.p, self.source.p))
    for i, Xi in enumerate(X):
      S += W[:, i, None, None] * Xi
    S = 0.5 * (S + S.transpose(0, 2, 1))
    values, vectors = np.linalg.eigh(S)
    excess = np.maximum(values - 1.0, 0.0)

    f = 0.5 * rho * float(np.sum(excess * excess)) - float(np.sum(self.loss.dual_term(x, self.c)))
    grad = -self.loss.dual_term_derivative(x, self.c)
    if np.any(excess > 0.0):
      Gamma = rho * np.einsum('bpk,bk,bqk->bpq', vectors, excess, vectors)
      dW = np.empty_like(W)
      for i, Xi in enumerate(X):
        dW[:, i] = 2.0 * np.einsum('bpq,bpq->b', Gamma, Xi)
      for e in range(self.block.shape[1]):
        grad += self.slope[:, e] * dW[self.block[:, e], self.owner]
    # end if penalty active
    return f, grad

  def feasible_point(self, x: np.ndarray) -> np.ndarray:
    lam = BlockDiagonal(accumulate_block_quadratic(self.weights(x), self.source)).lambda_max()
    if lam <= 1.0:
      return x
    return x / np.sqrt(lam * (1.0 + 1e-12))

  def run(self, x0: np.ndarray, start_value: float, to_alpha: Callable):
    """
    :param to_alpha: maps a variable vector to the coefficient layout of
                     dual_objective
    :return: coefficients of the best stage, None when none beat start_value
    """
    best, best_value = None, start_value
    x = np.clip(np.asarray(x0, dtype=np.float64), self.lo, self.hi)
    for stage in range(self.opts.refine_rounds):
      rho = 100.0 ** (stage + 1)
      x, _, info = fmin_l_bfgs_b(self.__penalized, x, args=(rho,), bounds=self.bounds, m=20,
                                 factr=10.0, pgtol=1e-10, maxiter=self.opts.refine_max_iters)
      candidate = to_alpha(self.feasible_point(x))
      value = dual_objective(self.loss, candidate, self.c)
      log.info("refinement stage %d: rho %.0e, objective %.10g after %d iterations",
               stage + 1, rho, value, info["nit"])
      if value > best_value:
        best, best_value = candidate, value
    # end for each stage
    return best
# end class _PenaltyRefinement


def _check_common(source: KernelSource, labels: np.ndarray, c: float):
  if source.n == 0:
    raise EmptyDataset("no training samples")
  if labels.shape != (source.n,):
    raise InvalidInput("%d labels for %d samples" % (labels.size, source.n))
  if not c > 0:
    raise InvalidInput("c must be > 0, got " + str(c))


def solve_dual(source: KernelSource, labels, loss: LossSpec = None, c: float = 1.0,
               opts: SolverOptions = None, progress: Callable = None) -> DualSolution:
  """
  binary dual by greedy coordinate ascent

  :param source: training patches plus kernel
  :param labels: length n, values in {-1, +1}
  :param progress: optional callable(coordinate, objective, lambda_max)
  """
  loss = loss or LossSpec()
  opts = opts or SolverOptions()
  labels = np.asarray(labels, dtype=np.float64)
  _check_common(source, labels, c)
  if not np.all(np.isin(labels, (-1.0, 1.0))):
    raise InvalidInput("binary labels must be -1 or +1")

  engine = _CoordinateAscent(source, loss, c, opts, 1, progress)
  alpha = np.zeros(source.n)

  def sweep(order):
    for i in order:
      Krow = source.row(int(i))
      alpha[i] = engine.update(int(i), alpha[i], [(0, 0.0, labels[i])], Krow)
      engine.report()
    # end for each sample

  sweeps = _run_sweeps(engine, _visit_order(source, opts), sweep, opts)
  if opts.debug:
    _check_consistency(engine, source)
  accumulation = engine.R
  if opts.refine_rounds > 0:
    refinement = _PenaltyRefinement(source, loss, c, opts, 1, np.arange(source.n),
                                    np.zeros((source.n, 1)), labels[:, np.newaxis])
    refined = refinement.run(alpha, dual_objective(loss, alpha, c), lambda x: x)
    if refined is not None:
      alpha = refined
      accumulation = BlockDiagonal(accumulate_block_quadratic(refinement.weights(alpha), source))
  # end if refining
  return DualSolution(alpha=alpha, labels=labels, c=float(c), loss=loss,
                      final_lambda_max=accumulation.lambda_max(),
                      objective=dual_objective(loss, alpha, c), sweep_count=sweeps,
                      accumulation=accumulation.blocks)
# end solve_dual


def solve_dual_multiclass(source: KernelSource, labels, num_classes: int, loss: LossSpec = None,
                          c: float = 1.0, opts: SolverOptions = None,
                          progress: Callable = None) -> DualSolution:
  """
  multiclass dual; labels are class indices 0..num_classes-1

  The coordinates of one sample are visited consecutively (classes in
  ascending order, skipping the sample's own class) so its kernel row is
  computed once per visit.
  """
  loss = loss or LossSpec()
  opts = opts or SolverOptions()
  labels = np.asarray(labels)
  _check_common(source, labels, c)
  if num_classes < 2:
    raise InvalidInput("multiclass needs at least 2 classes, got " + str(num_classes))
  if not np.all((labels >= 0) & (labels < num_classes) & (labels == np.round(labels))):
    raise InvalidInput("labels must be class indices in [0, %d)" % num_classes)
  labels = labels.astype(np.int64)

  engine = _CoordinateAscent(source, loss, c, opts, num_classes, progress)
  alpha = np.zeros((source.n, num_classes))

  def sweep(order):
    for i in order:
      i = int(i)
      y = labels[i]
      Krow = source.row(i)
      for k in range(num_classes):
        if k == y:
          continue
        base = float(alpha[i].sum() - alpha[i, k])
        alpha[i, k] = engine.update(i, alpha[i, k], [(k, 0.0, -1.0), (y, base, 1.0)], Krow)
        engine.report()
      # end for each class
    # end for each sample

  sweeps = _run_sweeps(engine, _visit_order(source, opts), sweep, opts)
  if opts.debug:
    _check_consistency(engine, source)
  accumulation = engine.R
  if opts.refine_rounds > 0:
    samples, classes = np.nonzero(np.arange(num_classes)[np.newaxis, :] != labels[:, np.newaxis])
    block = np.column_stack([classes, labels[samples]])
    slope = np.tile([-1.0, 1.0], (samples.size, 1))

    def to_alpha(x):
      out = np.zeros((source.n, num_classes))
      out[samples, classes] = x
      return out

    refinement = _PenaltyRefinement(source, loss, c, opts, num_classes, samples, block, slope)
    refined = refinement.run(alpha[samples, classes], dual_objective(loss, alpha, c), to_alpha)
    if refined is not None:
      alpha = refined
      accumulation = BlockDiagonal(accumulate_block_quadratic(fold_multiclass(alpha, labels), source))
  # end if refining
  return DualSolution(alpha=alpha, labels=labels, c=float(c), loss=loss,
                      final_lambda_max=accumulation.lambda_max(),
                      objective=dual_objective(loss, alpha, c), sweep_count=sweeps,
                      num_classes=int(num_classes), accumulation=accumulation.blocks)
# end solve_dual_multiclass


@dataclass(frozen=True)
class FeasibilityReport:
  lambda_max: float
  slack: float  # 1 - lambda_max
  box_violations: list
  block_lambda_max: np.ndarray = None

  def feasible(self, tol: float = 1e-8) -> bool:
    return self.slack >= -tol and not self.box_violations


def verify_feasibility(sol: DualSolution, source: KernelSource) -> FeasibilityReport:
  """recompute the quadratic form from scratch and check every constraint"""
  alpha = np.asarray(sol.alpha, dtype=np.float64)
  lo, hi = feasible_interval(sol.loss, sol.c)
  bad = ~((alpha >= lo) & (alpha <= hi))
  if sol.is_multiclass:
    own = np.zeros_like(bad)
    own[np.arange(alpha.shape[0]), sol.labels] = True
    bad |= own & (alpha != 0.0)
    violations = [(int(i), int(k)) for i, k in zip(*np.nonzero(bad))]
  else:
    violations = [int(i) for i in np.flatnonzero(bad)]
  # end if
  S = accumulate_block_quadratic(sol.weights, source)
  blocks = BlockDiagonal(S).block_lambda_max()
  lam = float(blocks.max())
  return FeasibilityReport(lam, 1.0 - lam, violations, blocks)

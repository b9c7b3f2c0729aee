"""
  DccnnOracle - finite-dimensional primal solver used to check the dual side

  Binary primal:      min_A  ||A||_* + c sum_i l( y_i Tr(Phi_i' A) )
  Multiclass primal:  min_A  sum_k ||A_k||_* + c sum_i sum_{k != y_i} l( f_{y_i}(x_i) - f_k(x_i) )
                      with f_k(x) = Tr(Phi(x)' A_k), A = [A_1, ..., A_m]

  The multiclass regularizer is the per-class nuclear norm because the
  block diagonal dual constraint (max over classes of lambda_max) is the
  dual norm ball of exactly that regularizer.

  Only explicit, small feature maps are supported (identity for the linear
  kernel, Kronecker powers for the polynomial kernel).
"""

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, subspace_angles

from DccnnErrors import InvalidInput, NoFiltersRecovered
from DccnnKernels import KernelSource, KernelSpec
from DccnnLosses import LossSpec
from DccnnRecovery import LinearWeight, recover_conv_output, recover_linear_weight
from DccnnSolver import DualSolution, SolverOptions, solve_dual, solve_dual_multiclass, verify_feasibility

log = logging.getLogger(__name__)

RANK_CUT = 1e-6
ORACLE_METHODS = ("admm", "subgradient")
ADMM_BALANCE_EVERY = 10
ADMM_BALANCE_UNTIL = 10000
# filters are eigenvalues at 1; anything clearly below it has no primal counterpart
VERIFY_THRESHOLD = 0.999
VERIFY_SOLVER_OPTIONS = SolverOptions(sweeps=50, sweep_tol=1e-10, refine_rounds=4)


class FeatureMapKind(str, enum.Enum):
  IDENTITY = "identity"
  POLYNOMIAL = "polynomial"


@dataclass(frozen=True)
class ExplicitFeatureMap:
  kind: FeatureMapKind = FeatureMapKind.IDENTITY
  degree: int = 2
  offset: float = 1.0

  def __post_init__(self):
    object.__setattr__(self, "kind", FeatureMapKind(self.kind))
    if self.kind == FeatureMapKind.POLYNOMIAL:
      if int(self.degree) < 1:
        raise InvalidInput("polynomial degree must be >= 1")
      if self.offset < 0:
        raise InvalidInput("an explicit polynomial map needs offset >= 0")

  @classmethod
  def identity(cls) -> "ExplicitFeatureMap":
    return cls(FeatureMapKind.IDENTITY)

  @classmethod
  def polynomial(cls, degree: int = 2, offset: float = 1.0) -> "ExplicitFeatureMap":
    return cls(FeatureMapKind.POLYNOMIAL, int(degree), float(offset))

  def output_dim(self, d1: int) -> int:
    """d2"""
    if self.kind == FeatureMapKind.IDENTITY:
      return d1
    return (d1 + 1) ** self.degree

  def kernel_spec(self) -> KernelSpec:
    if self.kind == FeatureMapKind.IDENTITY:
      return KernelSpec.linear()
    return KernelSpec.polynomial(self.degree, self.offset)

  def apply(self, Z: np.ndarray) -> np.ndarray:
    """
    :param Z: d1 x p patch matrix
    :return: d2 x p matrix Phi(x), column a = phi(z_a)
    """
    Z = np.asarray(Z, dtype=np.float64)
    if self.kind == FeatureMapKind.IDENTITY:
      return Z.copy()
    p = Z.shape[1]
    W = np.vstack([Z, np.full((1, p), math.sqrt(self.offset))])
    out = W
    for _ in range(self.degree - 1):
      out = (out[:, np.newaxis, :] * W[np.newaxis, :, :]).reshape(-1, p)
    return out

  def features(self, patches: np.ndarray) -> np.ndarray:
    """n x d1 x p patches -> n x d2 x p"""
    return np.array([self.apply(Z) for Z in patches])
# end class ExplicitFeatureMap


@dataclass(frozen=True)
class OracleOptions:
  max_iters: int = 200000
  method: str = "admm"
  rho: float = 1.0  # admm: starting penalty, rebalanced against the residuals
  tol: float = 1e-8  # admm: relative residual tolerance
  step0: float = None  # subgradient: None -> 0.05 / (1 + c * sum_i ||Phi_i||_F)
  plateau_tol: float = 1e-10  # subgradient: relative to 1 + |objective|
  plateau_window: int = 1000  # subgradient: 0 disables the plateau stop

  def __post_init__(self):
    if self.max_iters < 1:
      raise InvalidInput("max_iters must be >= 1")
    if self.method not in ORACLE_METHODS:
      raise InvalidInput("oracle method must be one of " + ", ".join(ORACLE_METHODS))
    if not (self.rho > 0 and self.tol > 0):
      raise InvalidInput("rho and tol must be > 0")
    if self.step0 is not None and not self.step0 > 0:
      raise InvalidInput("step0 must be > 0")


@dataclass(frozen=True)
class PrimalSolution:
  A_hat: np.ndarray  # d2 x p, or d2 x mp
  objective: float
  iterations: int
  converged: bool
  c: float
  loss: LossSpec
  labels: np.ndarray = field(repr=False)
  block_size: int = None
  num_classes: int = None

  @property
  def num_blocks(self) -> int:
    return 1 if self.num_classes is None else self.num_classes

  def blocks(self) -> np.ndarray:
    """B x d2 x p"""
    d2 = self.A_hat.shape[0]
    return self.A_hat.reshape(d2, self.num_blocks, self.block_size).transpose(1, 0, 2)


def prox_nuclear(M: np.ndarray, tau: float) -> np.ndarray:
  """argmin_X tau ||X||_* + 1/2 ||X - M||_F^2 (singular value soft-thresholding)"""
  U, s, Vt = np.linalg.svd(M, full_matrices=False)
  return (U * np.maximum(0.0, s - tau)) @ Vt


def nuclear_norm(M: np.ndarray) -> float:
  return float(np.sum(np.linalg.svd(M, compute_uv=False)))


def _split(A: np.ndarray, blocks: int) -> np.ndarray:
  d2, width = A.shape
  return A.reshape(d2, blocks, width // blocks).transpose(1, 0, 2)


def _join(parts: np.ndarray) -> np.ndarray:
  blocks, d2, p = parts.shape
  return parts.transpose(1, 0, 2).reshape(d2, blocks * p)


def _margins(A: np.ndarray, Phi: np.ndarray, labels: np.ndarray, num_classes):
  if num_classes is None:
    return labels * np.einsum('idp,dp->i', Phi, A)
  scores = np.einsum('idp,kdp->ik', Phi, _split(A, num_classes))
  n = Phi.shape[0]
  margins = scores[np.arange(n), labels][:, np.newaxis] - scores
  return margins


def primal_objective(A: np.ndarray, Phi: np.ndarray, labels, loss: LossSpec, c: float,
                     num_classes: int = None) -> float:
  labels = np.asarray(labels)
  margins = _margins(A, Phi, labels, num_classes)
  if num_classes is None:
    return nuclear_norm(A) + c * float(np.sum(loss.margin_loss(margins)))
  others = np.ones_like(margins, dtype=bool)
  others[np.arange(len(labels)), labels] = False
  reg = sum(nuclear_norm(B) for B in _split(A, num_classes))
  return reg + c * float(np.sum(loss.margin_loss(margins[others])))


def _loss_gradient(A, Phi, labels, loss, c, num_classes):
  margins = _margins(A, Phi, labels, num_classes)
  d = loss.margin_derivative(margins)
  if num_classes is None:
    return np.einsum('i,idp->dp', c * d * labels, Phi)
  n = Phi.shape[0]
  d[np.arange(n), labels] = 0.0
  coef = -c * d
  coef[np.arange(n), labels] = c * d.sum(axis=1)
  return _join(np.einsum('ik,idp->kdp', coef, Phi))


def _prox(A, tau, num_classes):
  if num_classes is None:
    return prox_nuclear(A, tau)
  return _join(np.array([prox_nuclear(B, tau) for B in _split(A, num_classes)]))


def _margin_matrix(Phi: np.ndarray, labels: np.ndarray, num_classes) -> np.ndarray:
  """
  rows map A.ravel() to the margins primal_objective charges the loss for

  Binary: one row per sample. Multiclass: one row per (sample, k != y_i),
  in row-major order of the pairs.
  """
  n, d2, p = Phi.shape
  if num_classes is None:
    return labels[:, np.newaxis] * Phi.reshape(n, d2 * p)
  rows = []
  for i in range(n):
    y = labels[i]
    for k in range(num_classes):
      if k == y:
        continue
      row = np.zeros((d2, num_classes * p))
      row[:, y * p:(y + 1) * p] += Phi[i]
      row[:, k * p:(k + 1) * p] -= Phi[i]
      rows.append(row.ravel())
  # end for each sample
  return np.array(rows)


def _admm(Phi, labels, loss, c, opts, num_classes, shape):
  """
  splitting B = A (nuclear norm) and z = P A (loss); A itself is a least
  squares step whose matrix does not depend on rho
  """
  P = _margin_matrix(Phi, labels, num_classes)
  D = P.shape[1]
  factor = cho_factor(np.eye(D) + P.T @ P)
  a = np.zeros(D)
  b = np.zeros(D)
  z = np.zeros(P.shape[0])
  U = np.zeros(D)
  u = np.zeros(P.shape[0])
  rho = opts.rho
  best = np.zeros(shape)
  best_obj = primal_objective(best, Phi, labels, loss, c, num_classes)
  scale = math.sqrt(D + P.shape[0])
  converged = False
  t = 0
  for t in range(1, opts.max_iters + 1):
    a = cho_solve(factor, (b - U) + P.T @ (z - u))
    Pa = P @ a
    b_old, z_old = b, z
    b = _prox((a + U).reshape(shape), 1.0 / rho, num_classes).ravel()
    z = loss.margin_prox(Pa + u, c / rho)
    U += a - b
    u += Pa - z

    B = b.reshape(shape)
    obj = primal_objective(B, Phi, labels, loss, c, num_classes)
    if obj < best_obj:
      best, best_obj = B, obj
    r = math.sqrt(float(np.sum((a - b) ** 2) + np.sum((Pa - z) ** 2)))
    s = rho * float(np.linalg.norm((b - b_old) + P.T @ (z - z_old)))
    eps_pri = opts.tol * (scale + max(math.hypot(np.linalg.norm(a), np.linalg.norm(Pa)),
                                      math.hypot(np.linalg.norm(b), np.linalg.norm(z))))
    eps_dual = opts.tol * (scale + rho * float(np.linalg.norm(U + P.T @ u)))
    if r <= eps_pri and s <= eps_dual:
      converged = True
      break
    if t % ADMM_BALANCE_EVERY == 0 and t <= ADMM_BALANCE_UNTIL:
      if r > 10.0 * s:
        rho, U, u = 2.0 * rho, 0.5 * U, 0.5 * u
      elif s > 10.0 * r:
        rho, U, u = 0.5 * rho, 2.0 * U, 2.0 * u
    # end if balancing
  # end for each iteration
  return best, best_obj, t, converged


def _subgradient(Phi, labels, loss, c, opts, num_classes, shape):
  """proximal subgradient descent with steps step0 / sqrt(t)"""
  step0 = opts.step0
  if step0 is None:
    step0 = 0.05 / (1.0 + c * float(np.sum(np.linalg.norm(Phi, axis=(1, 2)))))
  A = np.zeros(shape)
  best = A
  best_obj = primal_objective(A, Phi, labels, loss, c, num_classes)
  window_start = best_obj
  converged = False
  t = 0
  for t in range(1, opts.max_iters + 1):
    eta = step0 / math.sqrt(t)
    G = _loss_gradient(A, Phi, labels, loss, c, num_classes)
    A = _prox(A - eta * G, eta, num_classes)
    obj = primal_objective(A, Phi, labels, loss, c, num_classes)
    if obj < best_obj:
      best, best_obj = A, obj
    if opts.plateau_window and t % opts.plateau_window == 0:
      if window_start - best_obj < opts.plateau_tol * (1.0 + abs(best_obj)):
        converged = True
        break
      window_start = best_obj
    # end if
  # end for each iteration
  return best, best_obj, t, converged


def primal_solve(Phi: np.ndarray, labels, loss: LossSpec = None, c: float = 1.0,
                 opts: OracleOptions = None, num_classes: int = None) -> PrimalSolution:
  """
  ADMM (default) or proximal subgradient descent; returns the best iterate
  seen, A = 0 included

  :param Phi: n x d2 x p explicit features of the training samples
  """
  loss = loss or LossSpec()
  opts = opts or OracleOptions()
  Phi = np.asarray(Phi, dtype=np.float64)
  labels = np.asarray(labels)
  if num_classes is not None:
    labels = labels.astype(np.int64)
  n, d2, p = Phi.shape
  if labels.shape != (n,):
    raise InvalidInput("%d labels for %d samples" % (labels.size, n))
  blocks = 1 if num_classes is None else num_classes
  run = _admm if opts.method == "admm" else _subgradient
  best, best_obj, t, converged = run(Phi, labels, loss, float(c), opts, num_classes, (d2, blocks * p))

  if not converged:
    log.warning("primal oracle (%s) stopped after %d iterations without converging, objective %.10g",
                opts.method, t, best_obj)
  return PrimalSolution(best, best_obj, t, converged, float(c), loss, labels.copy(), p, num_classes)
# end primal_solve


def duality_gap(primal: PrimalSolution, dual: DualSolution) -> float:
  """primal minus dual objective; >= 0 up to rounding when both are feasible"""
  if (primal.c != dual.c or primal.loss != dual.loss or primal.num_classes != dual.num_classes
      or primal.labels.shape != np.shape(dual.labels)
      or not np.array_equal(primal.labels, np.asarray(dual.labels, dtype=primal.labels.dtype))):
    raise InvalidInput("primal and dual were solved on different instances")
  return primal.objective - dual.objective


def right_singular_subspace(primal: PrimalSolution, rank_cut: float = RANK_CUT):
  """
  per block SVD of A_hat, singular values > rank_cut

  :return: (V embedded at block rows, Bp x r; U stacked per block, list of d2 x r_k)
  """
  p, B = primal.block_size, primal.num_blocks
  V_cols, U_blocks = [], []
  for k, A in enumerate(primal.blocks()):
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > rank_cut
    U_blocks.append(U[:, keep])
    for v in Vt[keep]:
      column = np.zeros(B * p)
      column[k * p:(k + 1) * p] = v
      V_cols.append(column)
  # end for each block
  V = np.column_stack(V_cols) if V_cols else np.zeros((B * p, 0))
  return V, U_blocks


@dataclass(frozen=True)
class RecoveryComparison:
  primal_rank: int
  recovered_rank: int
  max_angle: float  # radians
  product_deviation: float  # max-norm
  degenerate_agreed: bool

  def passed(self, angle_tol: float = 1e-2, product_tol: float = 1e-3) -> bool:
    if self.degenerate_agreed:
      return True
    return self.max_angle <= angle_tol and self.product_deviation <= product_tol


def compare_recovery(primal: PrimalSolution, recovered: LinearWeight, conv_outputs, Phi: np.ndarray) -> RecoveryComparison:
  """
  :param recovered: recovered linear weight, None when recovery found no filters
  :param conv_outputs: recovered p x r conv outputs of the training samples
  :param Phi: n x d2 x p explicit training features
  """
  V, U_blocks = right_singular_subspace(primal)
  primal_rank = V.shape[1]
  recovered_rank = 0 if recovered is None else recovered.rank
  if primal_rank == 0 and recovered_rank == 0:
    return RecoveryComparison(0, 0, 0.0, 0.0, True)

  if primal_rank == recovered_rank:
    max_angle = float(np.max(subspace_angles(V, recovered.columns)))
  else:
    max_angle = math.pi / 2
  # end if

  Phi = np.asarray(Phi, dtype=np.float64)
  n, _, p = Phi.shape
  projector = sum((U @ U.T for U in U_blocks), np.zeros((Phi.shape[1], Phi.shape[1])))
  oracle = np.einsum('idp,de,jeq->ijpq', Phi, projector, Phi)
  if recovered_rank:
    conv = np.array(conv_outputs)
    dual = np.einsum('ipr,jqr->ijpq', conv, conv)
  else:
    dual = np.zeros((n, n, p, p))
  deviation = float(np.max(np.abs(oracle - dual)))
  return RecoveryComparison(primal_rank, recovered_rank, max_angle, deviation, False)
# end compare_recovery


@dataclass(frozen=True)
class VerificationResult:
  seed: int
  n: int
  d1: int
  p: int
  c: float
  primal_objective: float
  dual_objective: float
  gap: float
  lambda_max: float
  box_violations: list
  primal_converged: bool
  comparison: RecoveryComparison
  failures: list

  @property
  def passed(self) -> bool:
    return not self.failures


def verify_instance(instance, c: float, loss: LossSpec = None, fmap: ExplicitFeatureMap = None,
                    solver_opts: SolverOptions = None, oracle_opts: OracleOptions = None,
                    threshold: float = VERIFY_THRESHOLD, corrupt_alpha: bool = False,
                    gap_tol: float = 1e-3, angle_tol: float = 1e-2, product_tol: float = 1e-3,
                    feasibility_tol: float = 1e-8) -> VerificationResult:
  """
  solve one tiny instance on both sides and check feasibility, weak and
  strong duality and the recovered subspace and conv outputs

  :param instance: anything with patches (n x d1 x p), labels, num_classes and seed
  :param corrupt_alpha: push one coefficient out of its box before checking
  """
  loss = loss or LossSpec()
  fmap = fmap or ExplicitFeatureMap.identity()
  solver_opts = solver_opts or VERIFY_SOLVER_OPTIONS
  patches = np.asarray(instance.patches, dtype=np.float64)
  num_classes = instance.num_classes
  source = KernelSource(patches, fmap.kernel_spec(), solver_opts.kernel_cache_budget)

  if num_classes is None:
    dual = solve_dual(source, instance.labels, loss, c, solver_opts)
  else:
    dual = solve_dual_multiclass(source, instance.labels, num_classes, loss, c, solver_opts)
  if corrupt_alpha:
    alpha = dual.alpha.copy()
    alpha.flat[0] = 10.0 * c + 1.0
    dual = replace(dual, alpha=alpha)
  # end if

  failures = []
  report = verify_feasibility(dual, source)
  if report.box_violations:
    failures.append("box constraint violated at " + str(report.box_violations))
  if report.slack < -feasibility_tol:
    failures.append("lambda_max %.10g > 1" % report.lambda_max)

  Phi = fmap.features(patches)
  primal = primal_solve(Phi, instance.labels, loss, c, oracle_opts, num_classes)
  gap = duality_gap(primal, dual)
  if gap < -1e-8:
    failures.append("weak duality violated, gap %.3g" % gap)
  if abs(gap) > gap_tol * (1.0 + abs(primal.objective)):
    failures.append("duality gap %.3g" % gap)

  try:
    weight = recover_linear_weight(dual, source, threshold)
    convs = [recover_conv_output(dual, source, weight, Z).values for Z in patches]
  except NoFiltersRecovered:
    weight, convs = None, []
  # end try
  comparison = compare_recovery(primal, weight, convs, Phi)
  if not comparison.passed(angle_tol, product_tol):
    failures.append("recovery mismatch: angle %.3g, product deviation %.3g"
                    % (comparison.max_angle, comparison.product_deviation))

  n, d1, p = patches.shape
  return VerificationResult(int(instance.seed), n, d1, p, float(c), primal.objective, dual.objective,
                            gap, report.lambda_max, report.box_violations, primal.converged,
                            comparison, failures)
# end verify_instance

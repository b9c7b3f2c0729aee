"""
  DccnnLosses - classification losses and their Fenchel conjugates

  Conjugates are given for the losses in the form

    hinge          max(0, 1 - x)     conj(s) = s                      s in [-1, 0]
    squared hinge  max(0, 1 - x)^2   conj(s) = s + s^2/4              s <= 0
    logistic       log(1 + e^x)      conj(s) = s log s + (1-s) log(1-s)   s in [0, 1]
    exponential    e^x               conj(s) = -s + s log s           s >= 0

  The logistic conjugate is sometimes printed as "s log(s) + (1-s) log(s)";
  that expression is not the conjugate of log(1 + e^x) and is not used.

  hinge and squared hinge are non-increasing in the margin, the other two
  are increasing as written. For those two ("mirrored") losses the model
  trains on the margin loss l(-m) (log(1 + e^-m), e^-m), whose dual term is
  -c conj(alpha/c). Non-mirrored losses use -c conj(-alpha/c). Either way
  the dual coefficients are >= 0.
"""

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, xlogy

from DccnnErrors import InfeasibleDual, InvalidInput


class _Infeasible:
  """+infinity of the extended reals; arithmetic on it raises TypeError"""
  _instance = None

  def __new__(cls):
    if cls._instance is None:
      cls._instance = super().__new__(cls)
    return cls._instance

  def __repr__(self) -> str:
    return "INFEASIBLE"

  def __bool__(self) -> bool:
    raise TypeError("INFEASIBLE has no truth value")


INFEASIBLE = _Infeasible()


class LossKind(str, enum.Enum):
  HINGE = "hinge"
  SQUARED_HINGE = "squared_hinge"
  LOGISTIC = "logistic"
  EXPONENTIAL = "exponential"


# conjugate domain [lo, hi] for each kind
_DOMAINS = {
  LossKind.HINGE:         (-1.0, 0.0),
  LossKind.SQUARED_HINGE: (-np.inf, 0.0),
  LossKind.LOGISTIC:      (0.0, 1.0),
  LossKind.EXPONENTIAL:   (0.0, np.inf),
}


@dataclass(frozen=True)
class LossSpec:
  kind: LossKind = LossKind.HINGE

  def __post_init__(self):
    try:
      object.__setattr__(self, "kind", LossKind(self.kind))
    except ValueError:
      raise InvalidInput("unknown loss " + repr(self.kind)) from None

  @property
  def mirrored(self) -> bool:
    """True when the margin loss is base_loss(-m) rather than base_loss(m)"""
    return self.kind in (LossKind.LOGISTIC, LossKind.EXPONENTIAL)

  @property
  def domain(self):
    return _DOMAINS[self.kind]

  # ---- conjugates ----

  def conjugate_array(self, s) -> np.ndarray:
    """vectorized conjugate; +inf (float) outside the domain, internal use only"""
    s = np.asarray(s, dtype=np.float64)
    lo, hi = self.domain
    inside = (s >= lo) & (s <= hi)
    t = np.where(inside, s, 0.0)
    if self.kind == LossKind.HINGE:
      value = t
    elif self.kind == LossKind.SQUARED_HINGE:
      value = t + t * t / 4.0
    elif self.kind == LossKind.LOGISTIC:
      value = xlogy(t, t) + xlogy(1.0 - t, 1.0 - t)
    else:
      value = -t + xlogy(t, t)
    return np.where(inside, value, np.inf)

  def conjugate(self, xstar: float):
    value = float(self.conjugate_array(xstar))
    if np.isinf(value):
      return INFEASIBLE
    return value

  def base_loss(self, x) -> np.ndarray:
    """the loss in the form its conjugate is written for"""
    x = np.asarray(x, dtype=np.float64)
    if self.kind == LossKind.HINGE:
      return np.maximum(0.0, 1.0 - x)
    if self.kind == LossKind.SQUARED_HINGE:
      return np.maximum(0.0, 1.0 - x) ** 2
    if self.kind == LossKind.LOGISTIC:
      return np.logaddexp(0.0, x)
    return np.exp(x)

  # ---- primal side ----

  def margin_loss(self, margin) -> np.ndarray:
    """non-increasing loss of the margin y * score"""
    margin = np.asarray(margin, dtype=np.float64)
    if self.mirrored:
      return self.base_loss(-margin)
    return self.base_loss(margin)

  def margin_derivative(self, margin) -> np.ndarray:
    """a (sub)derivative of margin_loss; hinge uses -1 at the kink"""
    margin = np.asarray(margin, dtype=np.float64)
    if self.kind == LossKind.HINGE:
      return np.where(margin <= 1.0, -1.0, 0.0)
    if self.kind == LossKind.SQUARED_HINGE:
      return -2.0 * np.maximum(0.0, 1.0 - margin)
    if self.kind == LossKind.LOGISTIC:
      return -expit(-margin)
    return -np.exp(-margin)

  # ---- dual side ----

  def dual_term(self, alpha, c: float) -> np.ndarray:
    """per-coordinate dual term t(alpha); +inf outside the feasible interval"""
    alpha = np.asarray(alpha, dtype=np.float64)
    s = alpha / c if self.mirrored else -alpha / c
    return -c * self.conjugate_array(s)

  def dual_term_derivative(self, alpha, c: float) -> np.ndarray:
    """d t / d alpha inside the feasible interval; the mirrored kinds blow up at its ends"""
    alpha = np.asarray(alpha, dtype=np.float64)
    if self.kind == LossKind.HINGE:
      return np.ones_like(alpha)
    if self.kind == LossKind.SQUARED_HINGE:
      return 1.0 - alpha / (2.0 * c)
    with np.errstate(divide="ignore"):
      if self.kind == LossKind.LOGISTIC:
        return np.log(c - alpha) - np.log(alpha)
      return np.log(c) - np.log(alpha)

  def margin_prox(self, v, tau: float, iters: int = 100) -> np.ndarray:
    """
    argmin_z tau * margin_loss(z) + (z - v)^2 / 2, elementwise

    Closed form for the hinge kinds; the smooth kinds bisect on
    tau * l'(z) + z - v over [v, v + tau |l'(v)|].
    """
    v = np.asarray(v, dtype=np.float64)
    if self.kind == LossKind.HINGE:
      return np.where(v < 1.0 - tau, v + tau, np.maximum(v, np.minimum(1.0, v + tau)))
    if self.kind == LossKind.SQUARED_HINGE:
      return np.where(v >= 1.0, v, (v + 2.0 * tau) / (1.0 + 2.0 * tau))
    lo = v.copy()
    hi = v + tau * np.abs(self.margin_derivative(v))
    for _ in range(iters):
      mid = 0.5 * (lo + hi)
      above = tau * self.margin_derivative(mid) + mid - v > 0.0
      hi = np.where(above, mid, hi)
      lo = np.where(above, lo, mid)
    # end for
    return 0.5 * (lo + hi)

  def peak(self, c: float) -> float:
    """maximizer of the concave dual term t over alpha >= 0"""
    if self.kind == LossKind.SQUARED_HINGE:
      return 2.0 * c
    if self.kind == LossKind.LOGISTIC:
      return 0.5 * c
    return c
# end class LossSpec


def conjugate(spec: LossSpec, xstar: float):
  return spec.conjugate(xstar)


def feasible_interval(spec: LossSpec, c: float, cap: float = np.inf):
  """
  interval of admissible values for one dual coefficient

  :param cap: optional solver cap, only applied to the unbounded kinds
  :return: (lo, hi)
  """
  if not c > 0:
    raise InvalidInput("c must be > 0, got " + str(c))
  if spec.kind in (LossKind.HINGE, LossKind.LOGISTIC):
    return 0.0, float(c)
  return 0.0, float(cap)


def dual_objective(spec: LossSpec, alpha, c: float) -> float:
  """
  sum of t(alpha_i) over every coefficient; alpha may be a vector or an
  n x m matrix

  :raises InfeasibleDual: for the first coefficient outside the interval
  """
  alpha = np.asarray(alpha, dtype=np.float64)
  lo, hi = feasible_interval(spec, c)
  bad = ~((alpha >= lo) & (alpha <= hi))
  if np.any(bad):
    flat = int(np.flatnonzero(bad.ravel())[0])
    index = np.unravel_index(flat, alpha.shape)
    index = int(index[0]) if alpha.ndim == 1 else tuple(int(k) for k in index)
    raise InfeasibleDual(index, float(alpha.ravel()[flat]))
  if spec.kind == LossKind.HINGE:
    return float(np.sum(alpha))
  return float(np.sum(spec.dual_term(alpha, c)))

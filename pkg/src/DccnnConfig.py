import os

from DccnnErrors import ConfigError
from DccnnKernels import KernelKind, KernelSpec
from DccnnLosses import LossKind, LossSpec
from DccnnModel import LayerSpec
from DccnnSolver import SolverOptions


def _env(name: str):
  value = os.getenv(name)
  return value if value else None


def _number(flag: str, value, convert):
  try:
    return convert(value)
  except (TypeError, ValueError):
    raise ConfigError(flag, "expects a number, got " + repr(value)) from None


def parse_layers_spec(text: str):
  """
  "F:S:P[,F:S:P...]" -> one LayerSpec per layer (filter width, stride,
  padding)
  """
  layers = []
  for part in str(text).split(','):
    fields = part.strip().split(':')
    if len(fields) != 3:
      raise ConfigError("--layers-spec", "entries look like filter:stride:padding, got " + repr(part))
    f, s, p = [_number("--layers-spec", v, int) for v in fields]
    if f < 1 or s < 1 or p < 0:
      raise ConfigError("--layers-spec", "needs filter >= 1, stride >= 1, padding >= 0 in " + repr(part))
    layers.append(LayerSpec(f, s, p))
  # end for each layer
  return layers


def parse_pool(text: str):
  """ "W:S" -> (pool width, pool stride) """
  fields = str(text).split(':')
  if len(fields) != 2:
    raise ConfigError("--pool", "looks like width:stride, got " + repr(text))
  width, stride = [_number("--pool", v, int) for v in fields]
  if width < 1 or stride < 1:
    raise ConfigError("--pool", "width and stride must be >= 1")
  return width, stride


class RunConfig:
  """the patch kernel: gaussian_rbf, linear or polynomial"""
  kernel = KernelKind.GAUSSIAN_RBF.value
  """gaussian bandwidth; None picks it by the median heuristic"""
  gamma = None
  """polynomial kernel: (u.v + offset)^degree"""
  degree = 2
  offset = 1.0
  """the loss: hinge, squared_hinge, logistic or exponential"""
  loss = LossKind.HINGE.value
  """loss weight c"""
  c = 1.0
  """eigenvalues of the dual quadratic form >= threshold become filters"""
  threshold = 0.9
  """coordinate ascent passes per layer"""
  sweeps = 1
  """penalty refinement stages after the sweeps"""
  refine = 0
  seed = 0
  """prediction threads; None lets the thread pool decide"""
  workers = None
  """kernel generating matrices kept per layer"""
  cache_budget = 256
  layers_spec = "5:1:2"
  pool = None
  debug = False

  def __init__(self,
               dccnn_kernel       = None,
               dccnn_gamma        = None,
               dccnn_degree       = None,
               dccnn_offset       = None,
               dccnn_loss         = None,
               dccnn_c            = None,
               dccnn_threshold    = None,
               dccnn_sweeps       = None,
               dccnn_refine       = None,
               dccnn_seed         = None,
               dccnn_workers      = None,
               dccnn_cache_budget = None,
               layers_spec        = None,
               pool               = None,
               debug              = False,
               ):
    self.kernel = self.__pick(dccnn_kernel, 'dccnn_kernel', self.kernel)
    self.gamma = self.__pick(dccnn_gamma, 'dccnn_gamma', self.gamma)
    self.degree = self.__pick(dccnn_degree, 'dccnn_degree', self.degree)
    self.offset = self.__pick(dccnn_offset, 'dccnn_offset', self.offset)
    self.loss = self.__pick(dccnn_loss, 'dccnn_loss', self.loss)
    self.c = self.__pick(dccnn_c, 'dccnn_c', self.c)
    self.threshold = self.__pick(dccnn_threshold, 'dccnn_threshold', self.threshold)
    self.sweeps = self.__pick(dccnn_sweeps, 'dccnn_sweeps', self.sweeps)
    self.refine = self.__pick(dccnn_refine, 'dccnn_refine', self.refine)
    self.seed = self.__pick(dccnn_seed, 'dccnn_seed', self.seed)
    self.workers = self.__pick(dccnn_workers, 'dccnn_workers', self.workers)
    self.cache_budget = self.__pick(dccnn_cache_budget, 'dccnn_cache_budget', self.cache_budget)
    if layers_spec is not None:
      self.layers_spec = layers_spec
    if pool is not None:
      self.pool = pool
    self.debug = debug
  # end __init__

  @staticmethod
  def __pick(given, env_name, default):
    """command line value, then environment, then class default"""
    if given is not None:
      return given
    if _env(env_name) is not None:
      return _env(env_name)
    return default

  def validate(self):
    """convert and range-check every value; raises ConfigError naming the flag"""
    try:
      self.kernel = KernelKind(self.kernel).value
    except ValueError:
      raise ConfigError("--kernel", "must be one of " + ", ".join(k.value for k in KernelKind)) from None
    try:
      self.loss = LossKind(self.loss).value
    except ValueError:
      raise ConfigError("--loss", "must be one of " + ", ".join(k.value for k in LossKind)) from None

    if self.gamma is not None:
      self.gamma = _number("--gamma", self.gamma, float)
      if not self.gamma > 0:
        raise ConfigError("--gamma", "must be > 0")
    self.degree = _number("--degree", self.degree, int)
    if self.degree < 1:
      raise ConfigError("--degree", "must be >= 1")
    self.offset = _number("--offset", self.offset, float)
    self.c = _number("--c", self.c, float)
    if not self.c > 0:
      raise ConfigError("--c", "must be > 0")
    self.threshold = _number("--threshold", self.threshold, float)
    if not 0.0 < self.threshold <= 1.0:
      raise ConfigError("--threshold", "must be in (0, 1]")
    self.sweeps = _number("--sweeps", self.sweeps, int)
    if self.sweeps < 1:
      raise ConfigError("--sweeps", "must be >= 1")
    self.refine = _number("--refine", self.refine, int)
    if self.refine < 0:
      raise ConfigError("--refine", "must be >= 0")
    self.seed = _number("--seed", self.seed, int)
    if self.workers is not None:
      self.workers = _number("--workers", self.workers, int)
      if self.workers < 1:
        raise ConfigError("--workers", "must be >= 1")
    self.cache_budget = _number("dccnn_cache_budget", self.cache_budget, int)
    if self.cache_budget < 0:
      raise ConfigError("dccnn_cache_budget", "must be >= 0")
    self.layer_specs()
    return self
  # end validate

  def kernel_spec(self) -> KernelSpec:
    return KernelSpec(KernelKind(self.kernel), self.gamma, int(self.degree), float(self.offset))

  def loss_spec(self) -> LossSpec:
    return LossSpec(LossKind(self.loss))

  def solver_options(self, debug: bool = None) -> SolverOptions:
    return SolverOptions(sweeps=int(self.sweeps), refine_rounds=int(self.refine),
                         kernel_cache_budget=int(self.cache_budget),
                         debug=self.debug if debug is None else debug)

  def layer_specs(self):
    """parsed --layers-spec with --pool attached to every layer"""
    layers = parse_layers_spec(self.layers_spec)
    if self.pool is None:
      return layers
    width, stride = parse_pool(self.pool)
    return [LayerSpec(l.filter_width, l.stride, l.padding, width, stride) for l in layers]

  def as_dict(self) -> dict:
    return {
      'kernel': self.kernel, 'gamma': self.gamma, 'degree': self.degree, 'offset': self.offset,
      'loss': self.loss, 'c': self.c,
      'threshold': self.threshold, 'sweeps': self.sweeps, 'refine': self.refine, 'seed': self.seed,
      'workers': self.workers, 'cache_budget': self.cache_budget,
      'layers_spec': self.layers_spec, 'pool': self.pool,
    }
# end class RunConfig

"""
  DccnnModel - layerwise training and prediction of D-layer models

  Every layer keeps its own training inputs: predicting needs the kernel
  between a new input and each of them. A layer's conv output (p x r, or
  q x r after pooling) is vectorized column-major and fed to the next layer
  as an image with r channels.
"""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np

from DccnnErrors import DccnnError, InvalidInput
from DccnnKernels import KernelSource, KernelSpec, median_heuristic_gamma
from DccnnLosses import LossSpec
from DccnnPatches import PatchGeometry, PoolingMatrix, extract_patches_batch, normalize_columns, pooling_matrix
from DccnnRecovery import LinearWeight, apply_pooling, conv_output_from_cross, recover_linear_weight
from DccnnSolver import DualSolution, SolverOptions, solve_dual, solve_dual_multiclass

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
  filter_width: int = 5
  stride: int = 1
  padding: int = 2
  pool_width: int = None
  pool_stride: int = None

  @property
  def pooled(self) -> bool:
    return self.pool_width is not None


def prepare_patches(inputs: np.ndarray, geom: PatchGeometry, kernel: KernelSpec) -> np.ndarray:
  """patches of every row of inputs, unit-normalized for the gaussian kernel"""
  patches = extract_patches_batch(np.atleast_2d(inputs), geom)
  if kernel.needs_unit_patches:
    patches, degenerate = normalize_columns(patches)
    if np.any(degenerate):
      log.debug("%d degenerate patches replaced by e1", int(np.sum(degenerate)))
  # end if
  return patches


@dataclass(eq=False)
class LayerModel:
  kernel: KernelSpec
  geometry: PatchGeometry
  pooling: PoolingMatrix
  dual: DualSolution
  linear_weight: LinearWeight
  training_inputs: np.ndarray  # n x d0, rows are this layer's inputs
  cache_budget: int = 256
  wall_ms: float = None  # training time, not persisted
  _source: KernelSource = field(default=None, repr=False)
  _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

  def __post_init__(self):
    n = self.training_inputs.shape[0]
    if self.dual.alpha.shape[0] != n or self.dual.labels.shape[0] != n:
      raise InvalidInput("layer has %d training inputs but %d dual coefficients"
                         % (n, self.dual.alpha.shape[0]))
    p = self.geometry.num_patches
    if self.linear_weight.block_size != p:
      raise InvalidInput("linear weight has blocks of %d rows, geometry has %d patches"
                         % (self.linear_weight.block_size, p))
    self._weights = self.dual.weights
  # end __post_init__

  @property
  def labels(self) -> np.ndarray:
    return self.dual.labels

  @property
  def source(self) -> KernelSource:
    with self._lock:
      if self._source is None:
        patches = prepare_patches(self.training_inputs, self.geometry, self.kernel)
        self._source = KernelSource(patches, self.kernel, self.cache_budget)
      return self._source

  @property
  def output_height(self) -> int:
    return self.pooling.out_height if self.pooling is not None else self.geometry.out_height

  @property
  def output_width(self) -> int:
    return self.pooling.out_width if self.pooling is not None else self.geometry.out_width

  @property
  def output_dim(self) -> int:
    return self.output_height * self.output_width * self.linear_weight.rank

  def cross(self, x: np.ndarray) -> np.ndarray:
    """B x p x p weighted cross kernels between x and the training inputs"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != self.geometry.input_dim:
      raise InvalidInput("input of shape %s does not match layer input length %d"
                         % (x.shape, self.geometry.input_dim))
    Zx = prepare_patches(x, self.geometry, self.kernel)[0]
    return self.source.weighted_cross(Zx, self._weights)

  def forward(self, x: np.ndarray) -> np.ndarray:
    """vectorized (pooled) conv output of x, the next layer's input"""
    out = conv_output_from_cross(self.cross(x), self.linear_weight)
    if self.pooling is not None:
      out = apply_pooling(out, self.pooling)
    return out.vectorize()
# end class LayerModel


@dataclass(eq=False)
class Model:
  layers: List[LayerModel]
  num_classes: int = None  # None for binary
  format_version: int = FORMAT_VERSION

  def __post_init__(self):
    if not self.layers:
      raise InvalidInput("a model needs at least one layer")
    for index in range(1, len(self.layers)):
      expected = self.layers[index - 1].output_dim
      got = self.layers[index].geometry.input_dim
      if expected != got:
        raise InvalidInput("layer %d expects inputs of length %d, layer %d produces %d"
                           % (index, got, index - 1, expected))
    # end for each layer

  @property
  def task(self) -> str:
    return "binary" if self.num_classes is None else "multiclass"

  @property
  def depth(self) -> int:
    return len(self.layers)

  @property
  def input_dim(self) -> int:
    return self.layers[0].geometry.input_dim
# end class Model


def train_layerwise(inputs: np.ndarray, labels: np.ndarray, input_shape, layer_specs: List[LayerSpec],
                    kernel: KernelSpec = None, loss: LossSpec = None, c: float = 1.0,
                    threshold: float = 0.9, opts: SolverOptions = None, num_classes: int = None,
                    seed: int = 0, progress: Callable = None) -> Model:
  """
  train len(layer_specs) layers one after the other

  :param inputs: n x d0 flat inputs, channel-major
  :param labels: {-1, +1} (binary) or 0..num_classes-1 (multiclass)
  :param input_shape: (height, width, channels) of the first layer input
  :param kernel: per-layer kernel; gaussian gamma None is resolved per layer
                 by the median heuristic
  :param progress: optional callable(layer, coordinate, objective, lambda_max)
  """
  kernel = kernel or KernelSpec.gaussian()
  loss = loss or LossSpec()
  opts = opts or SolverOptions()
  if not layer_specs:
    raise InvalidInput("at least one layer is required")
  current = np.asarray(inputs, dtype=np.float64)
  labels = np.asarray(labels)
  height, width, channels = input_shape
  layers = []

  for index, spec in enumerate(layer_specs):
    final = index == len(layer_specs) - 1
    started = time.perf_counter()
    try:
      geom = PatchGeometry(height, width, channels, spec.filter_width, spec.stride, spec.padding)
      patches = prepare_patches(current, geom, kernel)
      layer_kernel = kernel
      if not kernel.resolved:
        layer_kernel = kernel.with_gamma(median_heuristic_gamma(patches, seed + index))
        log.info("layer %d: median heuristic gamma = %.6g", index, layer_kernel.gamma)
      # end if
      source = KernelSource(patches, layer_kernel, opts.kernel_cache_budget)
      callback = None
      if progress is not None:
        callback = lambda k, obj, lam, layer=index: progress(layer, k, obj, lam)

      if num_classes is None:
        dual = solve_dual(source, labels, loss, c, opts, callback)
      else:
        dual = solve_dual_multiclass(source, labels, num_classes, loss, c, opts, callback)
      weight = recover_linear_weight(dual, source, threshold)
      log.info("layer %d: lambda_max %.10g, objective %.10g, rank %d",
               index, dual.final_lambda_max, dual.objective, weight.rank)

      pooling = None
      if spec.pooled and not final:
        pooling = pooling_matrix(geom.out_height, geom.out_width, spec.pool_width, spec.pool_stride)
      layer = LayerModel(layer_kernel, geom, pooling, dual, weight, current,
                         opts.kernel_cache_budget,
                         wall_ms=1000.0 * (time.perf_counter() - started), _source=source)
      layers.append(layer)

      if not final:
        current = np.array([layer.forward(x) for x in current])
        height, width, channels = layer.output_height, layer.output_width, weight.rank
      # end if
    except DccnnError as e:
      e.layer_index = index
      raise
    # end try
  # end for each layer

  return Model(layers, num_classes)
# end train_layerwise


def decision_scores(model: Model, x: np.ndarray) -> np.ndarray:
  """
  trace scores of the final layer: one entry for binary, m for multiclass

  score_k = Tr( sum_j sum_l W[l, j] K(x, x_j) L_l L_k' )
  """
  v = np.asarray(x, dtype=np.float64)
  for layer in model.layers[:-1]:
    v = layer.forward(v)
  last = model.layers[-1]
  L = last.linear_weight
  conv = conv_output_from_cross(last.cross(v), L).values
  return np.array([np.sum(conv * L.block(b)) for b in range(L.num_blocks)])


def predict_binary(model: Model, x: np.ndarray) -> int:
  """sign of the trace score, sign(0) = +1"""
  if model.num_classes is not None:
    raise InvalidInput("predict_binary called on a multiclass model")
  return 1 if decision_scores(model, x)[0] >= 0.0 else -1


def predict_multiclass(model: Model, x: np.ndarray) -> int:
  """argmax of the class scores, ties to the smallest class index"""
  if model.num_classes is None:
    raise InvalidInput("predict_multiclass called on a binary model")
  return int(np.argmax(decision_scores(model, x)))


def predict(model: Model, x: np.ndarray) -> int:
  if model.num_classes is None:
    return predict_binary(model, x)
  return predict_multiclass(model, x)


def predict_batch(model: Model, X: np.ndarray, workers: int = None) -> np.ndarray:
  """predictions for every row of X, spread over a thread pool"""
  X = np.atleast_2d(np.asarray(X, dtype=np.float64))
  if workers is not None and workers <= 1:
    return np.array([predict(model, x) for x in X], dtype=np.int64)
  with ThreadPoolExecutor(max_workers=workers) as pool:
    return np.array(list(pool.map(lambda x: predict(model, x), X)), dtype=np.int64)

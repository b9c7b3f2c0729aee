#!/usr/bin/env python3
"""
  DccnnModelFile - versioned binary model format

  All integers are little-endian u32, all floats little-endian f64.

    "DCNN" | version | task (0 binary, 1 multiclass) [| m] | layer count
    per layer:
      kernel    tag (0 gaussian_rbf, 1 linear, 2 polynomial) | gamma f64 | degree | offset f64
      geometry  height | width | channels | filter width | stride | padding
      pooling   present | map height | map width | pool width | pool stride
      n
      labels    f64 x n (binary) or u32 x n (multiclass)
      dual      columns | alpha f64 n x columns | c f64 | loss tag | lambda_max f64 | objective f64 | sweeps
      inputs    d0 | f64 n x d0
      weight    rows | r | f64 rows x r | eigenvalues f64 x r | threshold f64
"""

import os
import struct

import numpy as np

from DccnnErrors import CorruptStream, DccnnError, UnsupportedVersion
from DccnnKernels import KernelKind, KernelSpec
from DccnnLosses import LossKind, LossSpec
from DccnnModel import LayerModel, Model
from DccnnPatches import PatchGeometry, pooling_matrix
from DccnnRecovery import LinearWeight
from DccnnSolver import DualSolution

MAGIC = b"DCNN"
SUPPORTED_VERSIONS = (1,)

_KERNEL_TAGS = [KernelKind.GAUSSIAN_RBF, KernelKind.LINEAR, KernelKind.POLYNOMIAL]
_LOSS_TAGS = [LossKind.HINGE, LossKind.SQUARED_HINGE, LossKind.LOGISTIC, LossKind.EXPONENTIAL]


class _Writer:

  def __init__(self):
    self.__parts = []

  def u32(self, *values):
    self.__parts.append(struct.pack("<%dI" % len(values), *[int(v) for v in values]))

  def f64(self, *values):
    self.__parts.append(struct.pack("<%dd" % len(values), *[float(v) for v in values]))

  def f64_array(self, a):
    self.__parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())

  def u32_array(self, a):
    self.__parts.append(np.ascontiguousarray(a, dtype="<u4").tobytes())

  def raw(self, data: bytes):
    self.__parts.append(data)

  def getvalue(self) -> bytes:
    return b"".join(self.__parts)


class _Reader:

  def __init__(self, data: bytes):
    self.__data = data
    self.offset = 0

  def __take(self, size: int, what: str) -> bytes:
    if self.offset + size > len(self.__data):
      raise CorruptStream(self.offset, "stream ends inside " + what)
    chunk = self.__data[self.offset:self.offset + size]
    self.offset += size
    return chunk

  def u32(self, what: str) -> int:
    return struct.unpack("<I", self.__take(4, what))[0]

  def f64(self, what: str) -> float:
    return struct.unpack("<d", self.__take(8, what))[0]

  def f64_array(self, count: int, what: str) -> np.ndarray:
    return np.frombuffer(self.__take(8 * count, what), dtype="<f8").astype(np.float64)

  def u32_array(self, count: int, what: str) -> np.ndarray:
    return np.frombuffer(self.__take(4 * count, what), dtype="<u4").astype(np.int64)

  def raw(self, size: int, what: str) -> bytes:
    return self.__take(size, what)

  def tag(self, table, what: str):
    at = self.offset
    value = self.u32(what)
    if value >= len(table):
      raise CorruptStream(at, "unknown " + what + " tag " + str(value))
    return table[value]

  @property
  def remaining(self) -> int:
    return len(self.__data) - self.offset
# end class _Reader


def _write_layer(w: _Writer, layer: LayerModel, multiclass: bool):
  k = layer.kernel
  w.u32(_KERNEL_TAGS.index(k.kind))
  w.f64(k.gamma if k.gamma is not None else 0.0)
  w.u32(k.degree)
  w.f64(k.offset)

  g = layer.geometry
  w.u32(g.input_height, g.input_width, g.channels, g.filter_width, g.stride, g.padding)
  if layer.pooling is None:
    w.u32(0, 0, 0, 0, 0)
  else:
    P = layer.pooling
    w.u32(1, P.map_height, P.map_width, P.pool_width, P.pool_stride)

  dual = layer.dual
  n = layer.training_inputs.shape[0]
  w.u32(n)
  if multiclass:
    w.u32_array(dual.labels)
  else:
    w.f64_array(dual.labels)
  alpha = dual.alpha.reshape(n, -1)
  w.u32(alpha.shape[1])
  w.f64_array(alpha)
  w.f64(dual.c)
  w.u32(_LOSS_TAGS.index(dual.loss.kind))
  w.f64(dual.final_lambda_max, dual.objective)
  w.u32(dual.sweep_count)

  w.u32(layer.training_inputs.shape[1])
  w.f64_array(layer.training_inputs)

  L = layer.linear_weight
  w.u32(L.columns.shape[0], L.rank)
  w.f64_array(L.columns)
  w.f64_array(L.eigenvalues)
  w.f64(L.threshold)
# end _write_layer


def serialize(model: Model) -> bytes:
  w = _Writer()
  w.raw(MAGIC)
  w.u32(model.format_version)
  if model.num_classes is None:
    w.u32(0)
  else:
    w.u32(1, model.num_classes)
  w.u32(len(model.layers))
  for layer in model.layers:
    _write_layer(w, layer, model.num_classes is not None)
  return w.getvalue()


def _read_layer(r: _Reader, num_classes):
  kind = r.tag(_KERNEL_TAGS, "kernel")
  gamma = r.f64("kernel gamma")
  degree = r.u32("kernel degree")
  offset = r.f64("kernel offset")
  kernel = KernelSpec(kind, gamma if kind == KernelKind.GAUSSIAN_RBF else None, degree, offset)

  geom = PatchGeometry(*[r.u32("geometry") for _ in range(6)])
  present, map_h, map_w, pool_w, pool_s = [r.u32("pooling") for _ in range(5)]
  pooling = pooling_matrix(map_h, map_w, pool_w, pool_s) if present else None

  n = r.u32("sample count")
  if num_classes is None:
    labels = r.f64_array(n, "labels")
  else:
    labels = r.u32_array(n, "labels")
  cols = r.u32("alpha columns")
  alpha = r.f64_array(n * cols, "alpha").reshape(n, cols)
  if num_classes is None:
    alpha = alpha[:, 0]
  c = r.f64("c")
  loss = LossSpec(r.tag(_LOSS_TAGS, "loss"))
  final_lambda = r.f64("lambda_max")
  objective = r.f64("objective")
  sweeps = r.u32("sweep count")
  dual = DualSolution(alpha, labels, c, loss, final_lambda, objective, sweeps, num_classes)

  d0 = r.u32("input length")
  inputs = r.f64_array(n * d0, "training inputs").reshape(n, d0)

  rows, rank = r.u32("weight rows"), r.u32("weight rank")
  columns = r.f64_array(rows * rank, "linear weight").reshape(rows, rank)
  eigenvalues = r.f64_array(rank, "eigenvalues")
  threshold = r.f64("threshold")
  blocks = 1 if num_classes is None else num_classes
  weight = LinearWeight(columns, eigenvalues, threshold, rows // blocks, blocks)
  return LayerModel(kernel, geom, pooling, dual, weight, inputs)
# end _read_layer


def deserialize(data: bytes) -> Model:
  r = _Reader(data)
  if r.raw(4, "magic") != MAGIC:
    raise CorruptStream(0, "bad magic, not a model file")
  at = r.offset
  version = r.u32("version")
  if version not in SUPPORTED_VERSIONS:
    raise UnsupportedVersion(version)
  task = r.u32("task")
  if task not in (0, 1):
    raise CorruptStream(at + 4, "unknown task tag " + str(task))
  num_classes = r.u32("class count") if task == 1 else None
  count = r.u32("layer count")

  layers = []
  for _ in range(count):
    at = r.offset
    try:
      layers.append(_read_layer(r, num_classes))
    except CorruptStream:
      raise
    except (DccnnError, ValueError, IndexError) as e:
      raise CorruptStream(at, "inconsistent layer record: " + str(e)) from e
  # end for each layer
  if r.remaining:
    raise CorruptStream(r.offset, "%d trailing bytes" % r.remaining)
  try:
    return Model(layers, num_classes, version)
  except DccnnError as e:
    raise CorruptStream(r.offset, str(e)) from e
# end deserialize


class ModelFile:
  """a model stored on disk; the directory is created on save"""

  def __init__(self, path: str):
    self.path = path

  def exists(self) -> bool:
    return os.path.exists(self.path)

  def save(self, model: Model):
    directory = os.path.dirname(os.path.abspath(self.path))
    if not os.path.exists(directory):
      os.makedirs(directory)
    with open(self.path, 'wb') as modelfile:
      modelfile.write(serialize(model))

  def load(self) -> Model:
    with open(self.path, 'rb') as modelfile:
      return deserialize(modelfile.read())


def save_model(model: Model, path: str):
  ModelFile(path).save(model)


def load_model(path: str) -> Model:
  return ModelFile(path).load()

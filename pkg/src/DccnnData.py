"""
  DccnnData - datasets: MNIST IDX files, CSV files, class subsets and
  seeded tiny instances for the primal oracle

  Inputs are flat rows of length channels*height*width, channel-major, with
  values in [0, 1].
"""

import logging
import math
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from DccnnErrors import BadMagic, CountMismatch, EmptyDataset, InsufficientSamples, InvalidInput, TruncatedFile

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TINY_MAX_N = 16
TINY_MAX_D1 = 8
TINY_MAX_P = 4


@dataclass(eq=False)
class Dataset:
  inputs: np.ndarray  # n x d0
  labels: np.ndarray  # n
  height: int
  width: int
  channels: int = 1

  def __post_init__(self):
    self.inputs = np.asarray(self.inputs, dtype=np.float64)
    self.labels = np.asarray(self.labels)
    if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
      raise InvalidInput("%d labels for inputs of shape %s" % (self.labels.shape[0], self.inputs.shape))
    if self.inputs.shape[1] != self.height * self.width * self.channels:
      raise InvalidInput("rows of length %d do not match %dx%dx%d inputs"
                         % (self.inputs.shape[1], self.channels, self.height, self.width))
    if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
      raise InvalidInput("input values must lie in [0, 1]")

  def __len__(self) -> int:
    return self.labels.shape[0]

  @property
  def input_shape(self):
    """(height, width, channels)"""
    return self.height, self.width, self.channels

  def subset(self, indices, labels=None) -> "Dataset":
    indices = np.asarray(indices, dtype=np.int64)
    return Dataset(self.inputs[indices], self.labels[indices] if labels is None else labels,
                   self.height, self.width, self.channels)
# end class Dataset


@dataclass(eq=False)
class TinyInstance:
  seed: int
  patches: np.ndarray  # n x d1 x p, unit-norm columns
  labels: np.ndarray
  num_classes: int = None  # None for binary {-1, +1}


# ---- IDX ----

def _read_idx(path: str, expected_magic: int) -> np.ndarray:
  with open(path, 'rb') as f:
    data = f.read()
  if len(data) < 4:
    raise TruncatedFile(path + ": no IDX header")
  magic, = struct.unpack('>I', data[:4])
  if magic != expected_magic:
    raise BadMagic(path, magic, expected_magic)
  ndim = magic & 0xff
  header = 4 + 4 * ndim
  if len(data) < header:
    raise TruncatedFile(path + ": IDX header cut short")
  dims = struct.unpack('>%dI' % ndim, data[4:header])
  size = int(np.prod(dims))
  if len(data) < header + size:
    raise TruncatedFile("%s: expected %d payload bytes, found %d" % (path, size, len(data) - header))
  return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path: str, labels_path: str) -> Dataset:
  images = _read_idx(images_path, IDX_IMAGES_MAGIC)
  labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
  if images.shape[0] != labels.shape[0]:
    raise CountMismatch("%d images but %d labels" % (images.shape[0], labels.shape[0]))
  n, height, width = images.shape
  log.info("loaded %d %dx%d images from %s", n, height, width, images_path)
  return Dataset(images.reshape(n, height * width) / 255.0, labels.astype(np.int64), height, width, 1)


def write_idx(ds: Dataset, images_path: str, labels_path: str):
  """write a single-channel dataset; pixels are rounded to bytes"""
  if ds.channels != 1:
    raise InvalidInput("IDX image files hold single-channel images")
  pixels = np.rint(ds.inputs * 255.0).astype(np.uint8)
  with open(images_path, 'wb') as f:
    f.write(struct.pack('>4I', IDX_IMAGES_MAGIC, len(ds), ds.height, ds.width))
    f.write(pixels.tobytes())
  with open(labels_path, 'wb') as f:
    f.write(struct.pack('>2I', IDX_LABELS_MAGIC, len(ds)))
    f.write(ds.labels.astype(np.uint8).tobytes())


# ---- CSV ----

def _has_header(path: str) -> bool:
  with open(path, 'r', encoding='utf-8') as f:
    first = f.readline().split(',')[0].strip()
  try:
    float(first)
    return False
  except ValueError:
    return True


def read_csv_rows(path: str) -> np.ndarray:
  """all numeric rows of a comma separated file, header line optional"""
  if not os.path.exists(path):
    raise InvalidInput("no such file: " + path)
  with warnings.catch_warnings():
    warnings.simplefilter("ignore", UserWarning)  # numpy warns on files without data rows
    rows = np.loadtxt(path, delimiter=",", skiprows=1 if _has_header(path) else 0,
                      ndmin=2, encoding="utf-8")
  if rows.size == 0:
    raise EmptyDataset(path + " holds no data rows")
  return rows


def _scale_pixels(values: np.ndarray) -> np.ndarray:
  if values.size and values.min() < 0:
    raise InvalidInput("negative input values")
  if values.size and values.max() > 1.0:
    return values / 255.0
  return values


def _square_side(d0: int, channels: int) -> int:
  side = int(math.isqrt(d0 // channels))
  if side * side * channels != d0:
    raise InvalidInput("cannot infer a square image from %d values and %d channels" % (d0, channels))
  return side


def load_csv(path: str, height: int = None, width: int = None, channels: int = 1) -> Dataset:
  """
  one sample per row, label in the first column

  Values above 1 are taken as 0..255 pixels and scaled. Without height and
  width the images are assumed square.
  """
  rows = read_csv_rows(path)
  labels = rows[:, 0].astype(np.int64)
  inputs = _scale_pixels(rows[:, 1:])
  if height is None or width is None:
    height = width = _square_side(inputs.shape[1], channels)
  return Dataset(inputs, labels, height, width, channels)


def load_feature_rows(path: str) -> np.ndarray:
  """CSV rows without a label column, scaled like load_csv"""
  return _scale_pixels(read_csv_rows(path))


# ---- subsets ----

def _balanced_counts(total: int, groups: int):
  return [total // groups + (1 if k < total % groups else 0) for k in range(groups)]


def _pick(ds: Dataset, classes, n_train: int, n_test: int, seed: int, relabel):
  rng = np.random.default_rng(seed)
  train_counts = _balanced_counts(n_train, len(classes))
  test_counts = _balanced_counts(n_test, len(classes))
  train_idx, test_idx = [], []
  for k, cls in enumerate(classes):
    available = np.flatnonzero(ds.labels == cls)
    needed = train_counts[k] + test_counts[k]
    if available.size < needed:
      raise InsufficientSamples("class %s has %d samples, %d requested" % (cls, available.size, needed))
    available = rng.permutation(available)
    train_idx.append(available[:train_counts[k]])
    test_idx.append(available[train_counts[k]:needed])
  # end for each class

  def build(parts):
    idx = rng.permutation(np.concatenate(parts).astype(np.int64))
    return ds.subset(idx, relabel(ds.labels[idx]))

  return build(train_idx), build(test_idx)


def filter_binary(ds: Dataset, class_a, class_b, n_train: int, n_test: int, seed: int = 0):
  """
  balanced two-class subset, class_a -> +1 and class_b -> -1

  :return: (train, test)
  """
  if class_a == class_b:
    raise InvalidInput("the two classes must differ")
  relabel = lambda y: np.where(y == class_a, 1, -1).astype(np.int64)
  return _pick(ds, [class_a, class_b], n_train, n_test, seed, relabel)


def filter_classes(ds: Dataset, classes, n_train: int, n_test: int, seed: int = 0):
  """balanced multiclass subset with labels remapped to 0..len(classes)-1"""
  classes = list(classes)
  if len(set(classes)) != len(classes) or len(classes) < 2:
    raise InvalidInput("need at least two distinct classes")
  lookup = {cls: k for k, cls in enumerate(classes)}
  relabel = lambda y: np.array([lookup[v] for v in y.tolist()], dtype=np.int64)
  return _pick(ds, classes, n_train, n_test, seed, relabel)


def train_validation_split(ds: Dataset, validation_fraction: float = 0.2, seed: int = 0):
  if not 0.0 <= validation_fraction < 1.0:
    raise InvalidInput("validation fraction must be in [0, 1)")
  order = np.random.default_rng(seed).permutation(len(ds))
  cut = len(ds) - int(round(validation_fraction * len(ds)))
  return ds.subset(order[:cut]), ds.subset(order[cut:])


def downsample(ds: Dataset, factor: int = 2) -> Dataset:
  """average factor x factor blocks of every channel"""
  if factor < 1 or ds.height % factor or ds.width % factor:
    raise InvalidInput("cannot downsample %dx%d images by %d" % (ds.height, ds.width, factor))
  h, w = ds.height // factor, ds.width // factor
  images = ds.inputs.reshape(len(ds), ds.channels, h, factor, w, factor).mean(axis=(3, 5))
  return Dataset(images.reshape(len(ds), ds.channels * h * w), ds.labels, h, w, ds.channels)


# ---- tiny instances ----

def make_tiny_instance(seed: int, n: int, d1: int, p: int, num_classes: int = None) -> TinyInstance:
  """
  seeded random patches with unit-norm columns; labels from random
  hyperplanes on the mean patch, every class present

  :param num_classes: None for a binary {-1, +1} task
  """
  if not (1 <= n <= TINY_MAX_N and 1 <= d1 <= TINY_MAX_D1 and 1 <= p <= TINY_MAX_P):
    raise InvalidInput("tiny instances need n <= %d, d1 <= %d, p <= %d"
                       % (TINY_MAX_N, TINY_MAX_D1, TINY_MAX_P))
  classes = 2 if num_classes is None else int(num_classes)
  if classes > n:
    raise InvalidInput("%d samples cannot cover %d classes" % (n, classes))
  rng = np.random.default_rng(seed)
  patches = rng.uniform(-1.0, 1.0, size=(n, d1, p))
  patches /= np.linalg.norm(patches, axis=1, keepdims=True)
  means = patches.mean(axis=2)

  labels = None
  for _ in range(100):
    if num_classes is None:
      proj = means @ rng.standard_normal(d1)
      candidate = np.where(proj >= np.median(proj), 1, -1)
      present = np.unique(candidate).size == 2
    else:
      candidate = np.argmax(means @ rng.standard_normal((d1, classes)), axis=1)
      present = np.unique(candidate).size == classes
    if present:
      labels = candidate
      break
  # end for each attempt
  if labels is None:
    # hyperplanes could not separate the samples; force every class in
    labels = candidate
    if num_classes is None:
      labels[0], labels[-1] = 1, -1
    else:
      labels[:classes] = np.arange(classes)
  # end if
  return TinyInstance(int(seed), patches, labels.astype(np.int64), num_classes)

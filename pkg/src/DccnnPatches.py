"""
  DccnnPatches - patch matrices and average pooling matrices

  A flat input vector of length channels*height*width (channel-major, C order)
  is cut into filter_width x filter_width windows. Column j of the patch
  matrix is the window at output position j (row-major over output
  positions); inside a column the entries run channel by channel, each
  channel row-major over the window, i.e. row index c*fw*fw + dy*fw + dx.
"""

from dataclasses import dataclass

import numpy as np

from DccnnErrors import InvalidInput


@dataclass(frozen=True)
class PatchGeometry:
  input_height: int
  input_width: int
  channels: int
  filter_width: int
  stride: int = 1
  padding: int = 0

  def __post_init__(self):
    for name in ("input_height", "input_width", "channels", "filter_width", "stride"):
      if int(getattr(self, name)) < 1:
        raise InvalidInput("geometry " + name + " must be >= 1, got " + str(getattr(self, name)))
    if self.padding < 0:
      raise InvalidInput("geometry padding must be >= 0, got " + str(self.padding))
    if self.out_height < 1 or self.out_width < 1:
      raise InvalidInput("filter width %d does not fit a %dx%d input with padding %d"
                         % (self.filter_width, self.input_height, self.input_width, self.padding))
  # end __post_init__

  @property
  def out_height(self) -> int:
    return (self.input_height + 2 * self.padding - self.filter_width) // self.stride + 1

  @property
  def out_width(self) -> int:
    return (self.input_width + 2 * self.padding - self.filter_width) // self.stride + 1

  @property
  def num_patches(self) -> int:
    """p, the number of sliding positions"""
    return self.out_height * self.out_width

  @property
  def patch_dim(self) -> int:
    """d1, the length of one vectorized patch"""
    return self.filter_width * self.filter_width * self.channels

  @property
  def input_dim(self) -> int:
    """d0, the length of a flat input vector"""
    return self.input_height * self.input_width * self.channels
# end class PatchGeometry


@dataclass(frozen=True)
class PatchMatrix:
  entries: np.ndarray  # d1 x p
  degenerate: np.ndarray = None  # length p bool, set by normalize_patches

  @property
  def shape(self):
    return self.entries.shape


@dataclass(frozen=True)
class PoolingMatrix:
  entries: np.ndarray  # q x p
  pool_width: int
  pool_stride: int
  map_height: int
  map_width: int

  @property
  def b(self) -> int:
    """number of feature map entries averaged per pooling window"""
    return self.pool_width * self.pool_width

  @property
  def out_height(self) -> int:
    return (self.map_height - self.pool_width) // self.pool_stride + 1

  @property
  def out_width(self) -> int:
    return (self.map_width - self.pool_width) // self.pool_stride + 1
# end class PoolingMatrix


def _as_images(inputs: np.ndarray, geom: PatchGeometry) -> np.ndarray:
  inputs = np.asarray(inputs, dtype=np.float64)
  if inputs.ndim != 2 or inputs.shape[1] != geom.input_dim:
    raise InvalidInput("input length %s does not match geometry %dx%dx%d = %d"
                       % (inputs.shape[1:] if inputs.ndim == 2 else inputs.shape,
                          geom.channels, geom.input_height, geom.input_width, geom.input_dim))
  return inputs.reshape(-1, geom.channels, geom.input_height, geom.input_width)


def extract_patches_batch(inputs: np.ndarray, geom: PatchGeometry) -> np.ndarray:
  """
  im2col over a batch of flat inputs

  :param inputs: n x d0 matrix, one flat input per row
  :param geom: convolution geometry
  :return: n x d1 x p array, [i] is the patch matrix of input i
  """
  images = _as_images(inputs, geom)
  n = images.shape[0]
  fw, s, pad = geom.filter_width, geom.stride, geom.padding
  out_h, out_w = geom.out_height, geom.out_width

  padded = np.pad(images, [(0, 0), (0, 0), (pad, pad), (pad, pad)], 'constant')
  col = np.zeros((n, geom.channels, fw, fw, out_h, out_w))
  for dy in range(fw):
    y_max = dy + s * out_h
    for dx in range(fw):
      x_max = dx + s * out_w
      col[:, :, dy, dx, :, :] = padded[:, :, dy:y_max:s, dx:x_max:s]
    # end for dx
  # end for dy
  return col.reshape(n, geom.patch_dim, geom.num_patches)
# end extract_patches_batch


def extract_patches(x: np.ndarray, geom: PatchGeometry) -> PatchMatrix:
  x = np.asarray(x, dtype=np.float64)
  if x.ndim != 1:
    raise InvalidInput("expected a flat input vector, got shape " + str(x.shape))
  return PatchMatrix(extract_patches_batch(x[np.newaxis, :], geom)[0])


def normalize_columns(Z: np.ndarray, eps: float = 1e-12):
  """
  scale every column of Z (d1 x p, or n x d1 x p) to unit norm

  Columns with norm <= eps become e1.

  :return: (normalized array, boolean mask of degenerate columns)
  """
  Z = np.asarray(Z, dtype=np.float64)
  norms = np.linalg.norm(Z, axis=-2, keepdims=True)
  degenerate = norms <= eps
  out = Z / np.where(degenerate, 1.0, norms)
  if np.any(degenerate):
    mask = np.broadcast_to(degenerate, Z.shape)
    out = np.where(mask, 0.0, out)
    first_row = [slice(None)] * Z.ndim
    first_row[-2] = 0
    out[tuple(first_row)] = np.where(degenerate[..., 0, :], 1.0, out[tuple(first_row)])
  # end if
  return out, degenerate[..., 0, :]


def normalize_patches(Z: PatchMatrix, eps: float = 1e-12) -> PatchMatrix:
  entries, degenerate = normalize_columns(Z.entries, eps)
  return PatchMatrix(entries, degenerate)


def pooling_matrix(map_height: int, map_width: int, pool_width: int, pool_stride: int) -> PoolingMatrix:
  """
  average pooling matrix G with G[s, t] = 1/b when window s covers map entry t

  Map entries and pooling windows are both numbered row-major.
  """
  if pool_width < 1 or pool_stride < 1:
    raise InvalidInput("pool width and stride must be >= 1")
  if pool_width > map_height or pool_width > map_width:
    raise InvalidInput("pool width %d exceeds feature map %dx%d" % (pool_width, map_height, map_width))
  if (map_height - pool_width) % pool_stride or (map_width - pool_width) % pool_stride:
    raise InvalidInput("pool %d:%d leaves a partial window on a %dx%d feature map"
                       % (pool_width, pool_stride, map_height, map_width))
  # end if

  out_h = (map_height - pool_width) // pool_stride + 1
  out_w = (map_width - pool_width) // pool_stride + 1
  b = pool_width * pool_width
  G = np.zeros((out_h * out_w, map_height * map_width))
  for oy in range(out_h):
    for ox in range(out_w):
      rows = np.arange(oy * pool_stride, oy * pool_stride + pool_width)
      cols = np.arange(ox * pool_stride, ox * pool_stride + pool_width)
      G[oy * out_w + ox, (rows[:, None] * map_width + cols[None, :]).ravel()] = 1.0 / b
  # end for each window
  return PoolingMatrix(G, pool_width, pool_stride, map_height, map_width)
# end pooling_matrix

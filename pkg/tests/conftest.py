import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "src"))

from DccnnKernels import KernelSource, KernelSpec  # noqa: E402


def unit_patches(rng, n, d1, p):
  Z = rng.uniform(-1.0, 1.0, size=(n, d1, p))
  return Z / np.linalg.norm(Z, axis=1, keepdims=True)


@pytest.fixture
def rng():
  return np.random.default_rng(1234)


@pytest.fixture
def linear_source(rng):
  """8 samples, d1 = 4, p = 3, linear kernel"""
  return KernelSource(unit_patches(rng, 8, 4, 3), KernelSpec.linear())


@pytest.fixture
def binary_labels():
  return np.array([1, -1, 1, 1, -1, -1, 1, -1], dtype=np.float64)


def striped_images(seed, n, side=6, classes=2):
  """
  n flat side x side images; class k has a bright band at rows 2k and 2k+1

  :return: inputs (n x side^2), class indices 0..classes-1
  """
  rng = np.random.default_rng(seed)
  classes_of = np.arange(n) % classes
  images = rng.uniform(0.0, 0.3, size=(n, side, side))
  for i, k in enumerate(classes_of):
    images[i, 2 * k:2 * k + 2, :] += 0.7
  return images.reshape(n, side * side), classes_of


@pytest.fixture
def striped_binary():
  inputs, classes = striped_images(41, 8)
  return inputs, np.where(classes == 0, 1.0, -1.0)

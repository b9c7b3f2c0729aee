import struct

import numpy as np
import pytest

from conftest import striped_images
from DccnnErrors import CorruptStream, UnsupportedVersion
from DccnnKernels import KernelSpec
from DccnnLosses import LossKind, LossSpec
from DccnnModel import LayerSpec, decision_scores, train_layerwise
from DccnnModelFile import MAGIC, ModelFile, deserialize, load_model, save_model, serialize


@pytest.fixture
def binary_model(striped_binary):
  inputs, labels = striped_binary
  return train_layerwise(inputs, labels, (6, 6, 1), [LayerSpec(3, 1, 1, 2, 2), LayerSpec(3, 1, 1)], c=5.0)


@pytest.fixture
def multiclass_model():
  inputs, classes = striped_images(45, 6, classes=3)
  return train_layerwise(inputs, classes, (6, 6, 1), [LayerSpec(3, 1, 1)], kernel=KernelSpec.polynomial(2, 1.0),
                         loss=LossSpec(LossKind.SQUARED_HINGE), c=5.0, num_classes=3)


class TestSerialize:

  def test_binary_predictions_identical(self, binary_model):
    data = serialize(binary_model)
    assert data[:4] == MAGIC
    restored = deserialize(data)
    assert restored.task == "binary" and restored.depth == 2
    fresh, _ = striped_images(46, 5)
    for x in fresh:
      np.testing.assert_array_equal(decision_scores(restored, x), decision_scores(binary_model, x))
    assert serialize(restored) == data

  def test_multiclass_fields(self, multiclass_model):
    restored = deserialize(serialize(multiclass_model))
    assert restored.num_classes == 3
    layer, original = restored.layers[0], multiclass_model.layers[0]
    assert layer.kernel == original.kernel
    assert layer.dual.loss.kind == LossKind.SQUARED_HINGE
    np.testing.assert_array_equal(layer.dual.alpha, original.dual.alpha)
    np.testing.assert_array_equal(layer.dual.labels, original.dual.labels)
    np.testing.assert_array_equal(layer.linear_weight.columns, original.linear_weight.columns)
    assert layer.linear_weight.num_blocks == 3
    x = striped_images(47, 1)[0][0]
    np.testing.assert_array_equal(decision_scores(restored, x), decision_scores(multiclass_model, x))

  def test_bad_magic(self, binary_model):
    data = b"XXXX" + serialize(binary_model)[4:]
    with pytest.raises(CorruptStream) as excinfo:
      deserialize(data)
    assert excinfo.value.offset == 0

  def test_unsupported_version(self, binary_model):
    data = serialize(binary_model)
    data = data[:4] + struct.pack("<I", 7) + data[8:]
    with pytest.raises(UnsupportedVersion) as excinfo:
      deserialize(data)
    assert excinfo.value.version == 7

  def test_truncated(self, binary_model):
    data = serialize(binary_model)
    with pytest.raises(CorruptStream):
      deserialize(data[:-5])
    with pytest.raises(CorruptStream):
      deserialize(data[:10])

  def test_trailing_bytes(self, binary_model):
    with pytest.raises(CorruptStream) as excinfo:
      deserialize(serialize(binary_model) + b"\0\0")
    assert "trailing" in str(excinfo.value)

  def test_unknown_kernel_tag(self, binary_model):
    data = serialize(binary_model)
    # magic, version, task, layer count
    data = data[:16] + struct.pack("<I", 9) + data[20:]
    with pytest.raises(CorruptStream) as excinfo:
      deserialize(data)
    assert excinfo.value.offset == 16


class TestModelFile:

  def test_creates_directory(self, tmp_path, binary_model):
    path = tmp_path / "models" / "nested" / "m.dcnn"
    model_file = ModelFile(str(path))
    assert not model_file.exists()
    model_file.save(binary_model)
    assert model_file.exists()
    assert path.read_bytes() == serialize(binary_model)

  def test_save_and_load(self, tmp_path, binary_model):
    path = str(tmp_path / "m.dcnn")
    save_model(binary_model, path)
    restored = load_model(path)
    assert restored.format_version == 1
    assert restored.input_dim == binary_model.input_dim

from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import ortho_group

from conftest import striped_images
from DccnnErrors import InvalidInput, NoFiltersRecovered
from DccnnKernels import KernelSpec
from DccnnModel import (LayerSpec, Model, decision_scores, predict, predict_batch, predict_binary,
                        predict_multiclass, train_layerwise)
from DccnnModelFile import serialize
from DccnnRecovery import LinearWeight
from DccnnSolver import SolverOptions


def train_binary(inputs, labels, specs, **kwargs):
  kwargs.setdefault("c", 5.0)
  return train_layerwise(inputs, labels, (6, 6, 1), specs, **kwargs)


class TestTrainLayerwise:

  def test_single_layer(self, striped_binary):
    inputs, labels = striped_binary
    model = train_binary(inputs, labels, [LayerSpec(3, 1, 1)])
    assert model.task == "binary" and model.depth == 1
    layer = model.layers[0]
    assert layer.kernel.gamma > 0
    assert layer.geometry.num_patches == 36
    assert layer.linear_weight.rank >= 1
    assert layer.dual.final_lambda_max <= 1.0 + 1e-8
    assert layer.wall_ms >= 0.0
    assert model.input_dim == 36

  def test_two_layers_with_pooling(self, striped_binary):
    inputs, labels = striped_binary
    specs = [LayerSpec(3, 1, 1, 2, 2), LayerSpec(3, 1, 1, 2, 2)]
    model = train_binary(inputs, labels, specs, kernel=KernelSpec.gaussian(1.0))
    first, second = model.layers
    assert (first.output_height, first.output_width) == (3, 3)
    assert first.output_dim == 9 * first.linear_weight.rank
    assert second.geometry.input_dim == first.output_dim
    assert second.geometry.channels == first.linear_weight.rank
    assert second.pooling is None
    np.testing.assert_allclose(second.training_inputs[0], first.forward(inputs[0]), rtol=1e-12)

  def test_progress_reports_layer(self, striped_binary):
    inputs, labels = striped_binary
    seen = []
    train_binary(inputs, labels, [LayerSpec(3, 1, 1, 2, 2), LayerSpec(3, 1, 1)],
                 progress=lambda layer, k, obj, lam: seen.append(layer))
    assert seen.count(0) == 8 and seen.count(1) == 8

  def test_linear_kernel(self, striped_binary):
    inputs, labels = striped_binary
    model = train_binary(inputs, labels, [LayerSpec(3, 1, 1)], kernel=KernelSpec.linear())
    assert model.layers[0].kernel.gamma is None

  def test_no_layers(self, striped_binary):
    inputs, labels = striped_binary
    with pytest.raises(InvalidInput):
      train_binary(inputs, labels, [])

  def test_error_names_first_layer(self, striped_binary):
    inputs, labels = striped_binary
    with pytest.raises(InvalidInput) as excinfo:
      train_binary(inputs, labels, [LayerSpec(9, 1, 0)])
    assert excinfo.value.layer_index == 0

  def test_error_names_second_layer(self, striped_binary):
    inputs, labels = striped_binary
    with pytest.raises(InvalidInput) as excinfo:
      train_binary(inputs, labels, [LayerSpec(3, 1, 1, 2, 2), LayerSpec(5, 1, 0)])
    assert excinfo.value.layer_index == 1
    assert str(excinfo.value).startswith("layer 1: ")

  def test_tiny_c_recovers_nothing(self, striped_binary):
    inputs, labels = striped_binary
    with pytest.raises(NoFiltersRecovered) as excinfo:
      train_binary(inputs, labels, [LayerSpec(3, 1, 1)], c=1e-4)
    assert excinfo.value.layer_index == 0

  def test_dimension_chain_checked(self, striped_binary):
    inputs, labels = striped_binary
    six = train_binary(inputs, labels, [LayerSpec(3, 1, 1)])
    small, _ = striped_images(42, 8, side=5)
    five = train_layerwise(small, labels, (5, 5, 1), [LayerSpec(3, 1, 1)], c=5.0)
    with pytest.raises(InvalidInput):
      Model([six.layers[0], five.layers[0]])
    with pytest.raises(InvalidInput):
      Model([])


class TestPredict:

  def test_binary_labels(self, striped_binary):
    inputs, labels = striped_binary
    model = train_binary(inputs, labels, [LayerSpec(3, 1, 1)])
    predictions = predict_batch(model, inputs)
    assert set(predictions.tolist()) <= {-1, 1}
    assert predictions.dtype == np.int64
    for x, expected in zip(inputs, predictions):
      score = decision_scores(model, x)[0]
      assert expected == (1 if score >= 0 else -1)

  def test_batch_matches_sequential(self, striped_binary):
    inputs, labels = striped_binary
    model = train_binary(inputs, labels, [LayerSpec(3, 1, 1, 2, 2), LayerSpec(3, 1, 1)])
    sequential = np.array([predict(model, x) for x in inputs])
    np.testing.assert_array_equal(predict_batch(model, inputs, workers=3), sequential)
    np.testing.assert_array_equal(predict_batch(model, inputs, workers=1), sequential)

  def test_wrong_input_length(self, striped_binary):
    inputs, labels = striped_binary
    model = train_binary(inputs, labels, [LayerSpec(3, 1, 1)])
    with pytest.raises(InvalidInput):
      predict(model, np.zeros(35))

  def test_task_mismatch(self, striped_binary):
    inputs, labels = striped_binary
    model = train_binary(inputs, labels, [LayerSpec(3, 1, 1)])
    with pytest.raises(InvalidInput):
      predict_multiclass(model, inputs[0])

  def test_multiclass(self):
    inputs, classes = striped_images(43, 9, classes=3)
    model = train_layerwise(inputs, classes, (6, 6, 1), [LayerSpec(3, 1, 1)], c=5.0, num_classes=3)
    assert model.task == "multiclass"
    assert model.layers[0].linear_weight.num_blocks == 3
    scores = decision_scores(model, inputs[0])
    assert scores.shape == (3,)
    assert predict(model, inputs[0]) == int(np.argmax(scores))
    assert set(predict_batch(model, inputs).tolist()) <= {0, 1, 2}
    with pytest.raises(InvalidInput):
      predict_binary(model, inputs[0])

  def test_two_class_multiclass_agrees_with_binary(self, striped_binary):
    inputs, labels = striped_binary
    kernel = KernelSpec.gaussian(1.0)
    opts = SolverOptions(sweeps=2)
    binary = train_binary(inputs, labels, [LayerSpec(3, 1, 1)], kernel=kernel, opts=opts)
    classes = np.where(labels > 0, 0, 1)
    multi = train_binary(inputs, classes, [LayerSpec(3, 1, 1)], kernel=kernel, opts=opts, num_classes=2)
    np.testing.assert_allclose(multi.layers[0].dual.alpha.sum(axis=1), binary.layers[0].dual.alpha,
                               rtol=0, atol=1e-12)
    extra, _ = striped_images(44, 6)
    for x in np.vstack([inputs, extra]):
      b = predict_binary(binary, x)
      m = predict_multiclass(multi, x)
      assert m == (0 if b == 1 else 1)

  @pytest.mark.parametrize("seed", range(5))
  def test_two_class_agreement_on_fresh_points(self, seed):
    inputs, classes = striped_images(70 + seed, 8)
    labels = np.where(classes == 0, 1.0, -1.0)
    kernel = KernelSpec.gaussian(1.0)
    binary = train_binary(inputs, labels, [LayerSpec(3, 1, 1)], kernel=kernel)
    multi = train_binary(inputs, classes, [LayerSpec(3, 1, 1)], kernel=kernel, num_classes=2)
    fresh, _ = striped_images(80 + seed, 100)
    b = predict_batch(binary, fresh, workers=1)
    m = predict_batch(multi, fresh, workers=1)
    assert np.mean(m == np.where(b == 1, 0, 1)) >= 0.95


class TestInvariances:

  def test_rotated_filters_give_same_scores(self, striped_binary):
    inputs, labels = striped_binary
    model = train_binary(inputs, labels, [LayerSpec(3, 1, 1)])
    layer = model.layers[0]
    L = layer.linear_weight
    Q = ortho_group.rvs(L.rank, random_state=7) if L.rank > 1 else -np.ones((1, 1))
    rotated = LinearWeight(L.columns @ Q, L.eigenvalues, L.threshold, L.block_size, L.num_blocks)
    turned = Model([replace(layer, linear_weight=rotated)])
    for x in inputs:
      np.testing.assert_allclose(decision_scores(turned, x), decision_scores(model, x), rtol=1e-9, atol=1e-12)
      assert np.linalg.norm(turned.layers[0].forward(x)) == pytest.approx(np.linalg.norm(layer.forward(x)))

  def test_negated_labels_negate_scores(self, striped_binary):
    inputs, labels = striped_binary
    model = train_binary(inputs, labels, [LayerSpec(3, 1, 1)])
    flipped = train_binary(inputs, -labels, [LayerSpec(3, 1, 1)])
    extra, _ = striped_images(45, 6)
    for x in np.vstack([inputs, extra]):
      np.testing.assert_array_equal(decision_scores(flipped, x), -decision_scores(model, x))

  def test_relabeled_classes_permute_scores(self):
    inputs, classes = striped_images(46, 9, classes=3)
    permutation = np.array([1, 2, 0])
    opts = SolverOptions(sweeps=50, sweep_tol=1e-10, refine_rounds=4)
    model = train_layerwise(inputs, classes, (6, 6, 1), [LayerSpec(3, 1, 1)], c=5.0, num_classes=3, opts=opts)
    relabeled = train_layerwise(inputs, permutation[classes], (6, 6, 1), [LayerSpec(3, 1, 1)], c=5.0,
                                num_classes=3, opts=opts)
    assert relabeled.layers[0].dual.objective == pytest.approx(model.layers[0].dual.objective, rel=1e-4)
    agreement = np.mean([predict(relabeled, x) == permutation[predict(model, x)] for x in inputs])
    assert agreement >= 0.8

  def test_retraining_is_byte_identical(self, striped_binary):
    inputs, labels = striped_binary
    specs = [LayerSpec(3, 1, 1, 2, 2), LayerSpec(3, 1, 1)]
    assert serialize(train_binary(inputs, labels, specs)) == serialize(train_binary(inputs, labels, specs))

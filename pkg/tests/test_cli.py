import json

import numpy as np
import pytest

import dccnn
from conftest import striped_images
from DccnnModelFile import load_model


def write_striped_csv(path, n=8, side=6, seed=61, with_label=True):
  inputs, classes = striped_images(seed, n, side=side)
  with open(path, 'w') as f:
    for x, k in zip(inputs, classes):
      values = ["%.6f" % v for v in x]
      f.write(",".join(([str(k)] if with_label else []) + values) + "\n")
  return str(path)


@pytest.fixture
def trained(tmp_path, capsys):
  data = write_striped_csv(tmp_path / "train.csv")
  model = str(tmp_path / "out" / "m.dcnn")
  code = dccnn.main(["train", "--data", data, "--classes", "0,1", "--c", "5", "--gamma", "1.0",
                     "--layers-spec", "3:1:1", "--out", model])
  assert code == dccnn.EXIT_OK
  capsys.readouterr()
  return data, model


class TestTrain:

  def test_writes_model_and_report(self, trained):
    data, model = trained
    with open(model + ".json") as f:
      report = json.load(f)
    assert report['task'] == "binary"
    assert report['classes'] == [0, 1]
    assert report['samples'] == 8
    assert len(report['layers']) == 1
    assert report['layers'][0]['rank'] >= 1
    assert report['layers'][0]['lambda_max'] <= 1.0 + 1e-8
    assert report['config']['c'] == 5.0

  def test_prints_report(self, tmp_path, capsys):
    data = write_striped_csv(tmp_path / "d.csv")
    report = str(tmp_path / "r.json")
    code = dccnn.main(["train", "--data", data, "--c", "5", "--layers-spec", "3:1:1",
                       "--out", str(tmp_path / "m.dcnn"), "--report", report])
    assert code == 0
    out = capsys.readouterr().out
    assert "layer 0: kernel gaussian_rbf" in out
    with open(report) as f:
      assert json.load(f)['layers'][0]['gamma'] > 0

  def test_missing_data(self, tmp_path, capsys):
    code = dccnn.main(["train", "--out", str(tmp_path / "m.dcnn")])
    assert code == dccnn.EXIT_ERROR
    assert "--data" in capsys.readouterr().err

  def test_missing_out(self, tmp_path, capsys):
    data = write_striped_csv(tmp_path / "d.csv")
    assert dccnn.main(["train", "--data", data]) == 1
    assert "--out" in capsys.readouterr().err

  def test_threshold_out_of_range(self, tmp_path, capsys):
    data = write_striped_csv(tmp_path / "d.csv")
    code = dccnn.main(["train", "--data", data, "--threshold", "1.5", "--out", str(tmp_path / "m.dcnn")])
    assert code == 1
    err = capsys.readouterr().err
    assert "Couldn't train" in err and "--threshold" in err
    assert not (tmp_path / "m.dcnn").exists()

  def test_usage_error(self, capsys):
    assert dccnn.main(["fly"]) == 1
    assert dccnn.main([]) == 1

  def test_polynomial_and_refine_flags(self, tmp_path, capsys):
    data = write_striped_csv(tmp_path / "d.csv")
    model = str(tmp_path / "p.dcnn")
    code = dccnn.main(["train", "--data", data, "--c", "5", "--layers-spec", "3:1:1", "--kernel", "polynomial",
                       "--degree", "3", "--offset", "0.5", "--refine", "1", "--out", model])
    assert code == dccnn.EXIT_OK
    with open(model + ".json") as f:
      config = json.load(f)['config']
    assert (config['degree'], config['offset'], config['refine']) == (3, 0.5, 1)
    kernel = load_model(model).layers[0].kernel
    assert (kernel.degree, kernel.offset) == (3, 0.5)


class TestEval:

  def test_accuracy_and_report(self, trained, tmp_path, capsys):
    data, model = trained
    report = tmp_path / "results.csv"
    args = ["eval", "--model", model, "--data", data, "--classes", "0,1", "--report", str(report)]
    assert dccnn.main(args) == 0
    out = capsys.readouterr().out
    assert out.startswith("accuracy ")
    assert "of 8)" in out
    assert dccnn.main(args) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == ",".join(dccnn.REPORT_HEADER)
    assert lines[0] == "dataset,layers,kernel,gamma,c,threshold,rank,accuracy,wall_ms"
    assert len(lines) == 3
    row = lines[1].split(",")
    assert row[0] == "train.csv" and row[1] == "1" and row[2] == "gaussian_rbf"

  def test_no_matching_samples(self, trained, capsys):
    data, model = trained
    assert dccnn.main(["eval", "--model", model, "--data", data, "--classes", "5,6"]) == 1
    assert "Couldn't evaluate" in capsys.readouterr().err

  def test_geometry_mismatch(self, trained, tmp_path, capsys):
    _, model = trained
    small = write_striped_csv(tmp_path / "small.csv", side=5)
    assert dccnn.main(["eval", "--model", model, "--data", small, "--classes", "0,1"]) == 1
    assert "model expects" in capsys.readouterr().err

  def test_task_mismatch(self, trained, capsys):
    data, model = trained
    assert dccnn.main(["eval", "--model", model, "--data", data, "--classes", "0,1", "--multiclass"]) == 1
    assert "binary" in capsys.readouterr().err

  def test_missing_model(self, tmp_path, capsys):
    data = write_striped_csv(tmp_path / "d.csv")
    assert dccnn.main(["eval", "--model", str(tmp_path / "none.dcnn"), "--data", data]) == 1
    assert "--model" in capsys.readouterr().err


class TestPredict:

  def test_one_label_per_row(self, trained, tmp_path, capsys):
    _, model = trained
    rows = write_striped_csv(tmp_path / "rows.csv", n=5, seed=62, with_label=False)
    assert dccnn.main(["predict", "--model", model, "--input", rows, "--workers", "2"]) == 0
    labels = capsys.readouterr().out.split()
    assert len(labels) == 5
    assert set(labels) <= {"1", "-1"}

  def test_wrong_row_length(self, trained, tmp_path, capsys):
    _, model = trained
    rows = write_striped_csv(tmp_path / "rows.csv", side=5, with_label=False)
    assert dccnn.main(["predict", "--model", model, "--input", rows]) == 1


class TestVerify:

  def test_corrupt_alpha_fails(self, capsys):
    code = dccnn.main(["verify", "--seed", "0", "--corrupt-alpha", "--max-iters", "200"])
    assert code == dccnn.EXIT_VERIFY_FAILED
    captured = capsys.readouterr()
    assert "seed 0 failed" in captured.err
    assert "box constraint" in captured.err

  def test_single_seed_deterministic(self):
    first = dccnn.verify_seeds([4], 8, max_iters=200, workers=1)[0]
    second = dccnn.verify_seeds([4], 8, max_iters=200, workers=1)[0]
    assert (first.n, first.d1, first.p, first.c) == (6, 3, 2, 1.0)
    assert first.dual_objective == second.dual_objective
    assert first.primal_objective == second.primal_objective

  def test_instance_parameters_cycle(self):
    results = dccnn.verify_seeds([0, 1, 2], 3, max_iters=50)
    assert [r.n for r in results] == [2, 3, 2]
    assert [r.c for r in results] == [0.5, 1.0, 5.0]
    assert all(np.isfinite(r.gap) for r in results)

  def test_max_n_range(self, capsys):
    assert dccnn.main(["verify", "--max-n", "17"]) == 1
    assert "--max-n" in capsys.readouterr().err

#!/usr/bin/env python3
"""
  dccnn - train, evaluate and verify dual convexified convolutional networks

  Subcommands:
    train    --data --labels --classes --multiclass --downsample --n-train
             --kernel --gamma --degree --offset --loss --c --layers-spec
             --threshold --pool --sweeps --refine --seed --out --report
    eval     --model --data --labels --classes --n-test --report --workers
    verify   --seeds --seed --max-n --corrupt-alpha --max-iters --workers
    predict  --model --input --workers

  Data is either a pair of MNIST IDX files (--data images, --labels labels)
  or a CSV file with the label in the first column (--data file.csv).

  Settings not given on the command line are read from the environment:

  dccnn_kernel dccnn_gamma dccnn_degree dccnn_offset dccnn_loss dccnn_c
  dccnn_threshold dccnn_sweeps dccnn_refine dccnn_seed dccnn_workers
  dccnn_cache_budget

  Exit codes: 0 success, 1 usage or data error, 2 verification failure.
"""

import argparse
import csv
import json
import logging
import os
import pprint
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from DccnnConfig import RunConfig
from DccnnData import downsample, filter_binary, filter_classes, load_csv, load_feature_rows, load_idx, make_tiny_instance
from DccnnErrors import ConfigError, DccnnError, EmptyDataset, InvalidInput
from DccnnModel import predict_batch, train_layerwise
from DccnnModelFile import load_model, save_model
from DccnnOracle import OracleOptions, verify_instance

log = logging.getLogger("dccnn")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VERIFY_FAILED = 2

REPORT_HEADER = ["dataset", "layers", "kernel", "gamma", "c", "threshold", "rank", "accuracy", "wall_ms"]
VERIFY_C_VALUES = (0.5, 1.0, 5.0)


class _ArgumentParser(argparse.ArgumentParser):
  """usage errors leave with exit code 1"""

  def error(self, message):
    self.print_usage(sys.stderr)
    self.exit(EXIT_ERROR, "%s: error: %s\n" % (self.prog, message))


# ---- data selection ----

def load_dataset(data: str, labels: str = None, channels: int = 1):
  if not data or not os.path.exists(data):
    raise ConfigError("--data", "file not found: " + str(data))
  if data.lower().endswith(".csv"):
    return load_csv(data, channels=channels)
  if not labels or not os.path.exists(labels):
    raise ConfigError("--labels", "file not found: " + str(labels))
  return load_idx(data, labels)


def parse_classes(text: str):
  try:
    return [int(v) for v in text.split(",")]
  except ValueError:
    raise ConfigError("--classes", "expects comma separated class labels, got " + repr(text)) from None


def select_task(ds, classes=None, multiclass=False, n=None, seed=0):
  """
  restrict a dataset to the chosen classes and relabel it

  Two classes give a binary task (first class -> +1) unless multiclass is
  set; more classes are remapped to 0..m-1 in the given order.

  :return: (dataset, num_classes or None, classes)
  """
  if classes is None:
    present = sorted(np.unique(ds.labels).tolist())
    classes = [1, -1] if present == [-1, 1] else present
  if len(set(classes)) < 2:
    raise ConfigError("--classes", "needs at least two distinct classes")
  binary = len(classes) == 2 and not multiclass
  num_classes = None if binary else len(classes)

  if n is not None:
    if binary:
      subset, _ = filter_binary(ds, classes[0], classes[1], n, 0, seed)
    else:
      subset, _ = filter_classes(ds, classes, n, 0, seed)
    return subset, num_classes, classes
  # end if

  keep = np.flatnonzero(np.isin(ds.labels, classes))
  picked = ds.labels[keep]
  if binary:
    relabeled = np.where(picked == classes[0], 1, -1)
  else:
    lookup = {cls: k for k, cls in enumerate(classes)}
    relabeled = np.array([lookup[v] for v in picked.tolist()], dtype=np.int64)
  return ds.subset(keep, relabeled), num_classes, classes
# end select_task


def _prepare(args, n, seed):
  ds = load_dataset(args.data, args.labels, args.channels)
  if args.downsample and args.downsample > 1:
    ds = downsample(ds, args.downsample)
  classes = parse_classes(args.classes) if args.classes else None
  return select_task(ds, classes, args.multiclass, n, seed)


# ---- train ----

def training_report(model, config: RunConfig, classes, n: int, wall_ms: float) -> dict:
  layers = []
  for index, layer in enumerate(model.layers):
    layers.append({
      'layer': index,
      'kernel': layer.kernel.kind.value,
      'gamma': layer.kernel.gamma,
      'filter_width': layer.geometry.filter_width,
      'stride': layer.geometry.stride,
      'padding': layer.geometry.padding,
      'pooled': layer.pooling is not None,
      'rank': layer.linear_weight.rank,
      'lambda_max': layer.dual.final_lambda_max,
      'dual_objective': layer.dual.objective,
      'sweeps': layer.dual.sweep_count,
      'wall_ms': layer.wall_ms,
    })
  # end for each layer
  return {
    'task': model.task,
    'classes': classes,
    'samples': n,
    'config': config.as_dict(),
    'layers': layers,
    'wall_ms': wall_ms,
  }


def print_training_report(report: dict):
  print("task %s, %d samples, classes %s" % (report['task'], report['samples'], report['classes']))
  for entry in report['layers']:
    gamma = "-" if entry['gamma'] is None else "%.6g" % entry['gamma']
    print("layer %d: kernel %s gamma %s rank %d lambda_max %.10f dual %.8g sweeps %d wall %.0f ms"
          % (entry['layer'], entry['kernel'], gamma, entry['rank'], entry['lambda_max'],
             entry['dual_objective'], entry['sweeps'], entry['wall_ms'] or 0.0))
  print("total wall %.0f ms" % report['wall_ms'])


def cmd_train(args, config: RunConfig) -> int:
  if not args.out:
    raise ConfigError("--out", "is required")
  train, num_classes, classes = _prepare(args, args.n_train, config.seed)
  if len(train) == 0:
    raise EmptyDataset("no training samples for classes " + str(classes))

  started = time.perf_counter()
  model = train_layerwise(train.inputs, train.labels, train.input_shape, config.layer_specs(),
                          config.kernel_spec(), config.loss_spec(), config.c, config.threshold,
                          config.solver_options(), num_classes, config.seed)
  wall_ms = 1000.0 * (time.perf_counter() - started)
  save_model(model, args.out)

  report = training_report(model, config, classes, len(train), wall_ms)
  print_training_report(report)
  report_path = args.report or args.out + ".json"
  with open(report_path, 'w', encoding='utf-8') as reportfile:
    json.dump(report, reportfile, indent=2)
  log.info("model written to %s, report to %s", args.out, report_path)
  return EXIT_OK
# end cmd_train


# ---- eval ----

def confusion_counts(truth: np.ndarray, predicted: np.ndarray, labels):
  counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
  index = {label: k for k, label in enumerate(labels)}
  for t, p in zip(truth.tolist(), predicted.tolist()):
    counts[index[t], index[p]] += 1
  return counts


def append_report_row(path: str, row: dict):
  new = not os.path.exists(path) or os.path.getsize(path) == 0
  with open(path, 'a', newline='', encoding='utf-8') as reportfile:
    writer = csv.DictWriter(reportfile, fieldnames=REPORT_HEADER)
    if new:
      writer.writeheader()
    writer.writerow(row)


def cmd_eval(args, config: RunConfig) -> int:
  if not args.model or not os.path.exists(args.model):
    raise ConfigError("--model", "file not found: " + str(args.model))
  model = load_model(args.model)
  test, num_classes, classes = _prepare(args, args.n_test, config.seed)
  if len(test) == 0:
    raise EmptyDataset("no test samples for classes " + str(classes))
  if test.inputs.shape[1] != model.input_dim:
    g = model.layers[0].geometry
    raise InvalidInput("data rows are %dx%dx%d (%d values), model expects %dx%dx%d (%d values)"
                       % (test.height, test.width, test.channels, test.inputs.shape[1],
                          g.input_height, g.input_width, g.channels, model.input_dim))
  if num_classes != model.num_classes:
    raise InvalidInput("data selects a %s task, model is %s"
                       % ("binary" if num_classes is None else "%d-class" % num_classes, model.task))

  started = time.perf_counter()
  predicted = predict_batch(model, test.inputs, config.workers)
  wall_ms = 1000.0 * (time.perf_counter() - started)
  accuracy = float(np.mean(predicted == test.labels))

  labels = [1, -1] if num_classes is None else list(range(num_classes))
  counts = confusion_counts(test.labels, predicted, labels)
  print("accuracy %.4f (%d of %d)" % (accuracy, int(np.sum(predicted == test.labels)), len(test)))
  print("confusion (rows true, columns predicted): " + " ".join(str(l) for l in labels))
  for label, row in zip(labels, counts):
    print("%6s " % label + " ".join("%6d" % v for v in row))

  if args.report:
    first = model.layers[0]
    append_report_row(args.report, {
      'dataset': os.path.basename(args.data),
      'layers': model.depth,
      'kernel': first.kernel.kind.value,
      'gamma': "" if first.kernel.gamma is None else "%.6g" % first.kernel.gamma,
      'c': "%g" % first.dual.c,
      'threshold': "%g" % first.linear_weight.threshold,
      'rank': "/".join(str(layer.linear_weight.rank) for layer in model.layers),
      'accuracy': "%.4f" % accuracy,
      'wall_ms': "%.0f" % wall_ms,
    })
  # end if
  return EXIT_OK
# end cmd_eval


# ---- verify ----

def verify_seeds(seeds, max_n: int, corrupt_alpha: bool = False, max_iters: int = 200000,
                 workers: int = None):
  """run the duality and recovery checks on one tiny linear-kernel instance per seed"""

  def run(seed):
    n = 2 + seed % (max_n - 1)
    d1 = 2 + seed % 3
    p = 1 + seed % 3
    c = VERIFY_C_VALUES[seed % len(VERIFY_C_VALUES)]
    instance = make_tiny_instance(seed, n, d1, p)
    return verify_instance(instance, c, oracle_opts=OracleOptions(max_iters=max_iters), corrupt_alpha=corrupt_alpha)

  if workers is not None and workers <= 1:
    return [run(s) for s in seeds]
  with ThreadPoolExecutor(max_workers=workers) as pool:
    return list(pool.map(run, seeds))


def cmd_verify(args, config: RunConfig) -> int:
  if args.max_n < 2 or args.max_n > 16:
    raise ConfigError("--max-n", "must be in [2, 16]")
  if args.seeds < 1:
    raise ConfigError("--seeds", "must be >= 1")
  seeds = [args.seed] if args.seed is not None else list(range(args.seeds))
  results = verify_seeds(seeds, args.max_n, args.corrupt_alpha, args.max_iters, config.workers)

  failed = []
  print("seed  n d1  p      c        primal          dual           gap     angle  deviation")
  for r in results:
    print("%4d %2d %2d %2d %6.2f %13.8f %13.8f %13.3e %9.2e %10.2e %s"
          % (r.seed, r.n, r.d1, r.p, r.c, r.primal_objective, r.dual_objective, r.gap,
             r.comparison.max_angle, r.comparison.product_deviation, "ok" if r.passed else "FAILED"))
    if not r.passed:
      failed.append(r)
  # end for each result
  if failed:
    for r in failed:
      print("seed %d failed: %s" % (r.seed, "; ".join(r.failures)), file=sys.stderr)
    return EXIT_VERIFY_FAILED
  print("all %d instances passed" % len(results))
  return EXIT_OK
# end cmd_verify


# ---- predict ----

def cmd_predict(args, config: RunConfig) -> int:
  if not args.model or not os.path.exists(args.model):
    raise ConfigError("--model", "file not found: " + str(args.model))
  if not args.input or not os.path.exists(args.input):
    raise ConfigError("--input", "file not found: " + str(args.input))
  model = load_model(args.model)
  rows = load_feature_rows(args.input)
  if rows.shape[1] != model.input_dim:
    raise InvalidInput("input rows have %d values, model expects %d" % (rows.shape[1], model.input_dim))
  for label in predict_batch(model, rows, config.workers):
    print(int(label))
  return EXIT_OK


# ---- command line ----

def _add_data_flags(parser, with_counts: str):
  parser.add_argument("--data", help="IDX image file or CSV file (label first)")
  parser.add_argument("--labels", help="IDX label file, not used for CSV data")
  parser.add_argument("--channels", type=int, default=1, help="channels of CSV rows")
  parser.add_argument("--classes", help="comma separated labels to keep, e.g. 0,1")
  parser.add_argument("--multiclass", action="store_true", help="treat two classes as a multiclass task")
  parser.add_argument("--downsample", type=int, default=None, help="average FxF pixel blocks")
  parser.add_argument(with_counts, type=int, default=None, help="balanced number of samples to draw")


def build_parser() -> argparse.ArgumentParser:
  parser = _ArgumentParser(prog="dccnn", description="dual convexified convolutional networks")
  parser.add_argument("--debug", "-d", action="store_true", help="debug logging and configuration dump")
  sub = parser.add_subparsers(dest="command", required=True)

  train = sub.add_parser("train", help="train a layerwise model")
  _add_data_flags(train, "--n-train")
  train.add_argument("--kernel", help="gaussian_rbf, linear or polynomial")
  train.add_argument("--gamma", help="gaussian bandwidth, median heuristic if omitted")
  train.add_argument("--degree", help="polynomial kernel degree")
  train.add_argument("--offset", help="polynomial kernel offset")
  train.add_argument("--loss", help="hinge, squared_hinge, logistic or exponential")
  train.add_argument("--c", help="loss weight")
  train.add_argument("--layers-spec", help="filter:stride:padding per layer, comma separated")
  train.add_argument("--threshold", help="eigenvalue threshold in (0, 1]")
  train.add_argument("--pool", help="width:stride of average pooling after non-final layers")
  train.add_argument("--sweeps", help="coordinate ascent passes")
  train.add_argument("--refine", help="penalty refinement stages after the sweeps, 0 for none")
  train.add_argument("--seed", help="seed for sampling and the median heuristic")
  train.add_argument("--out", help="model file to write")
  train.add_argument("--report", help="JSON training report, default <out>.json")

  evaluate = sub.add_parser("eval", help="accuracy of a model on labeled data")
  _add_data_flags(evaluate, "--n-test")
  evaluate.add_argument("--model", help="model file")
  evaluate.add_argument("--report", help="CSV file the result row is appended to")
  evaluate.add_argument("--seed", help="seed for --n-test sampling")
  evaluate.add_argument("--workers", help="prediction threads")

  verify = sub.add_parser("verify", help="check duality and recovery on tiny instances")
  verify.add_argument("--seeds", type=int, default=20, help="number of seeded instances")
  verify.add_argument("--max-n", type=int, default=8, help="largest sample count")
  verify.add_argument("--seed", type=int, default=None, help="run this single seed only")
  verify.add_argument("--corrupt-alpha", action="store_true", help="break one dual coefficient on purpose")
  verify.add_argument("--max-iters", type=int, default=200000, help="primal oracle iterations")
  verify.add_argument("--workers", help="instances checked in parallel")

  predict = sub.add_parser("predict", help="predict labels of CSV feature rows")
  predict.add_argument("--model", help="model file")
  predict.add_argument("--input", help="CSV file, one input per row")
  predict.add_argument("--workers", help="prediction threads")
  return parser
# end build_parser


def make_config(args) -> RunConfig:
  get = lambda name: getattr(args, name, None)
  seed = get("seed") if args.command != "verify" else None
  return RunConfig(dccnn_kernel=get("kernel"), dccnn_gamma=get("gamma"), dccnn_degree=get("degree"),
                   dccnn_offset=get("offset"), dccnn_loss=get("loss"),
                   dccnn_c=get("c"), dccnn_threshold=get("threshold"), dccnn_sweeps=get("sweeps"),
                   dccnn_refine=get("refine"), dccnn_seed=seed, dccnn_workers=get("workers"),
                   layers_spec=get("layers_spec"), pool=get("pool"), debug=args.debug).validate()


COMMANDS = {
  "train": ("train", cmd_train),
  "eval": ("evaluate", cmd_eval),
  "verify": ("verify", cmd_verify),
  "predict": ("predict", cmd_predict),
}


def main(argv=None) -> int:
  try:
    args = build_parser().parse_args(argv)
  except SystemExit as e:
    return e.code if isinstance(e.code, int) else EXIT_ERROR

  logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO,
                      format="%(asctime)s %(name)s %(levelname)s %(message)s")
  verb, command = COMMANDS[args.command]
  try:
    config = make_config(args)
    if args.debug:
      pp = pprint.PrettyPrinter(indent=4)
      pp.pprint(vars(args))
      pp.pprint(config.as_dict())
    return command(args, config)
  except (DccnnError, OSError, ValueError) as e:
    print("Couldn't " + verb + ": " + str(e), file=sys.stderr)
    return EXIT_ERROR
# end main


if __name__ == "__main__":
  sys.exit(main())

"""Command-line front end.

Subcommands: gen, skew, train, eval, sweep, replay. Each command writes its
outputs into ``--out-dir`` together with a ``manifest.json`` from which
``basefair replay`` regenerates the same files byte for byte.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from basefair import __version__
from basefair.data import (
    CsvSchema,
    SkewSpec,
    SyntheticSpec,
    apply_skew,
    balanced_test_split,
    generate_synthetic,
    load_csv,
    skew_matrix,
    write_csv,
)
from basefair.errors import (
    ConfigurationError,
    DegenerateGroupError,
    MissingGroupError,
    NumericError,
    ParseError,
)
from basefair.io import atomic_write_text, file_digest, read_json, write_json
from basefair.model import ModelSpec, load_checkpoint, save_checkpoint
from basefair.objective import SURROGATE_INPUTS, ObjectiveConfig
from basefair.trainer import METRIC_NAMES, TrainConfig, evaluate, run_experiment, train

log = logging.getLogger("basefair")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MODES = ("naive", "naive-balanced", "base")
AGGREGATE_HEADER = [
    "axis_value", "mode",
    "acc_mean", "acc_std", "sigma_acc_mean", "sigma_acc_std",
    "deo_max_mean", "deo_max_std", "deo_avg_mean", "deo_avg_std",
]

GEN_DEFAULTS = {
    "classes": 2,
    "demographics": 2,
    "samples": 4000,
    "feature_dim": None,  # defaults to the number of classes
    "separation": 2.0,
    "noise": None,
    "shift": None,
    "pair_distribution": None,
    "seed": 0,
}
SKEW_DEFAULTS = {"skew": 0.0, "seed": 0, "class_order": None, "demographic_order": None}
TRAIN_DEFAULTS = {
    "mode": "base",
    "gamma": 1.0,
    "kappa": 10.0,
    "surrogate": "softmax_probabilities",
    "balance": None,  # resolved from mode
    "stratified": None,  # resolved from gamma
    "epochs": 50,
    "batch_size": 512,
    "lr": 1e-4,
    "lr_schedule": "cosine",
    "lr_granularity": "epoch",
    "weight_decay": 0.02,
    "hidden": "",
    "activation": "relu",
    "seed": 0,
    "test_fraction": 0.2,
    "eval_every": 0,
}
SWEEP_DEFAULTS = {**TRAIN_DEFAULTS, "axis": "gamma", "values": "", "modes": "base", "splits": 3, "jobs": 1}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- flag parsing helpers -------------------------------------------------------


def _floats(text):
    if text is None or text == "":
        return None
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    vals = _floats(text)
    return None if vals is None else [int(v) for v in vals]


def _matrix(text):
    """``"1,0.3;1,0.3"`` (rows separated by ';') or a nested list from a config file."""
    if text is None or text == "":
        return None
    if isinstance(text, list):
        return [[float(v) for v in row] for row in text]
    return [_floats(row) for row in str(text).split(";")]


def _resolve(args, defaults):
    """Flags beat the config file, which beats the defaults."""
    file_cfg = read_json(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown keys in config file: {', '.join(sorted(unknown))}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else file_cfg.get(key, default)
    return out


# --- manifests ------------------------------------------------------------------


def _now():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch is not None else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _manifest(command, config, inputs, seeds, outputs):
    return {
        "command": command,
        "config": config,
        "inputs": {name: {"path": str(Path(p).resolve()), "digest": file_digest(p)} for name, p in inputs.items()},
        "seeds": seeds,
        "tool_version": __version__,
        "outputs": sorted(outputs),
    }


def _write_manifest(out_dir, manifest, started, timestamps=None):
    doc = dict(manifest)
    doc["timestamps"] = timestamps or {"started": started, "finished": _now()}
    write_json(Path(out_dir) / "manifest.json", doc)


def _report_doc(manifest, metrics, history=None):
    doc = {"schema_version": SCHEMA_VERSION, "manifest": manifest, "metrics": metrics}
    if history is not None:
        doc["history"] = history
    return doc


# --- commands -------------------------------------------------------------------


def cmd_gen(cfg, out_dir):
    feature_dim = cfg["feature_dim"] or cfg["classes"]
    shift = _matrix(cfg["shift"])
    try:
        spec = SyntheticSpec(
            num_samples=int(cfg["samples"]),
            num_classes=int(cfg["classes"]),
            num_demographics=int(cfg["demographics"]),
            feature_dim=int(feature_dim),
            group_separation=float(cfg["separation"]),
            demographic_noise=tuple(_floats(cfg["noise"]) or ()),
            demographic_shift=tuple(tuple(r) for r in shift) if shift else (),
            seed=int(cfg["seed"]),
        )
        dataset = generate_synthetic(spec, _matrix(cfg["pair_distribution"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_csv(dataset, Path(out_dir) / "dataset.csv", extra_meta={"synthetic_spec": spec.to_dict()})
    manifest = _manifest("gen", cfg, {}, {"seed": spec.seed}, ["dataset.csv", "dataset.meta.json"])
    return manifest


def cmd_skew(cfg, out_dir, dataset_path):
    dataset = load_csv(dataset_path)
    try:
        spec = SkewSpec(
            skew=float(cfg["skew"]),
            num_targets=dataset.num_classes,
            num_demographics=dataset.num_demographics,
            class_order=tuple(_ints(cfg["class_order"])) if cfg["class_order"] else None,
            demographic_order=tuple(_ints(cfg["demographic_order"])) if cfg["demographic_order"] else None,
            seed=int(cfg["seed"]),
        )
        matrix = skew_matrix(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    skewed = apply_skew(dataset, matrix, spec.seed)
    counts = skewed.count_matrix()
    write_csv(
        skewed,
        Path(out_dir) / "dataset.csv",
        extra_meta={
            "skew": spec.skew,
            "skew_matrix": matrix.tolist(),
            "realized_pair_counts": counts.tolist(),
        },
    )
    return _manifest("skew", cfg, {"dataset": dataset_path}, {"seed": spec.seed}, ["dataset.csv", "dataset.meta.json"])


def _resolve_mode(cfg):
    mode = cfg["mode"]
    if mode not in MODES:
        raise UsageError(f"--mode must be one of {', '.join(MODES)}")
    gamma = float(cfg["gamma"])
    balance = cfg["balance"]
    if mode == "naive":
        gamma, balance = 0.0, False
    elif mode == "naive-balanced":
        gamma, balance = 0.0, True
    elif balance is None:
        # the method oversamples its training set by default
        balance = True
    return gamma, bool(balance)


def build_train_config(cfg, seed=None):
    gamma, balance = _resolve_mode(cfg)
    if cfg["surrogate"] not in SURROGATE_INPUTS:
        raise UsageError(f"--surrogate must be one of {', '.join(SURROGATE_INPUTS)}")
    try:
        objective = ObjectiveConfig(kappa=float(cfg["kappa"]), gamma=gamma, surrogate_input=cfg["surrogate"])
        return TrainConfig(
            epochs=int(cfg["epochs"]),
            batch_size=int(cfg["batch_size"]),
            base_lr=float(cfg["lr"]),
            lr_schedule=cfg["lr_schedule"],
            lr_granularity=cfg["lr_granularity"],
            weight_decay=float(cfg["weight_decay"]),
            objective=objective,
            balance_training_set=balance,
            stratified_batches=cfg["stratified"],
            seed=int(cfg["seed"] if seed is None else seed),
            eval_every=int(cfg["eval_every"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def build_model_spec(cfg, dataset):
    try:
        return ModelSpec(
            input_dim=dataset.feature_dim,
            num_classes=dataset.num_classes,
            hidden_dims=tuple(_ints(cfg["hidden"]) or ()),
            activation=cfg["activation"],
            init_seed=int(cfg["seed"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(cfg, out_dir, dataset_path):
    out_dir = Path(out_dir)
    dataset = load_csv(dataset_path)
    config = build_train_config(cfg)
    spec = build_model_spec(cfg, dataset)
    seed = int(cfg["seed"])
    train_set, test_set = balanced_test_split(dataset, float(cfg["test_fraction"]), seed)
    manifest = _manifest(
        "train", cfg, {"dataset": dataset_path},
        {"seed": seed, "split_seed": seed, "init_seed": spec.init_seed, "train_seed": config.seed},
        ["checkpoint.json", "history.json", "report.json", "test.csv", "test.meta.json"],
    )
    try:
        params, history = train(train_set, spec, config, test=test_set)
    except NumericError as exc:
        if exc.last_good is not None:
            epoch, good = exc.last_good
            save_checkpoint(out_dir / "last_good.json", spec, good, extra={"epoch": epoch})
            log.error("last good parameters (after epoch %d) saved to %s", epoch, out_dir / "last_good.json")
        raise
    report = evaluate(params, spec, test_set)
    write_csv(test_set, out_dir / "test.csv")
    save_checkpoint(out_dir / "checkpoint.json", spec, params, extra={"train_config": config.to_dict()})
    hist = history.to_dict()
    write_json(out_dir / "history.json", hist)
    write_json(out_dir / "report.json", _report_doc(manifest, report.to_dict(), hist))
    return manifest


def _metrics_csv(metrics):
    row = ",".join(repr(float(metrics[m])) for m in METRIC_NAMES)
    return ",".join(METRIC_NAMES) + "\n" + row + "\n"


def cmd_eval(cfg, out_dir, checkpoint_path, dataset_path):
    out_dir = Path(out_dir)
    if not Path(checkpoint_path).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}")
    spec, params, _, _ = load_checkpoint(checkpoint_path)
    dataset = load_csv(dataset_path, CsvSchema(num_classes=spec.num_classes, feature_dim=spec.input_dim))
    report = evaluate(params, spec, dataset, on_missing=cfg["on_missing"])
    metrics = report.to_dict()
    manifest = _manifest(
        "eval", cfg, {"checkpoint": checkpoint_path, "dataset": dataset_path}, {}, ["report.json", "metrics.csv"]
    )
    write_json(out_dir / "report.json", _report_doc(manifest, metrics))
    atomic_write_text(out_dir / "metrics.csv", _metrics_csv(metrics))
    return manifest


def _sweep_point(args):
    dataset, spec, config, splits, test_fraction = args
    return run_experiment(dataset, spec, config, splits, test_fraction)


def cmd_sweep(cfg, out_dir, dataset_path):
    out_dir = Path(out_dir)
    dataset = load_csv(dataset_path)
    axis = cfg["axis"]
    if axis not in ("gamma", "kappa", "skew"):
        raise UsageError("--axis must be gamma, kappa or skew")
    values = _floats(cfg["values"])
    if not values:
        raise UsageError("--values must list at least one value")
    modes = [m.strip() for m in str(cfg["modes"]).split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise UsageError(f"--modes must be drawn from {', '.join(MODES)}")
    seed = int(cfg["seed"])
    spec = build_model_spec(cfg, dataset)

    jobs = []
    for value in sorted(values):
        point_data = dataset
        if axis == "skew":
            try:
                matrix = skew_matrix(SkewSpec(value, dataset.num_classes, dataset.num_demographics, seed=seed))
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
            point_data = apply_skew(dataset, matrix, seed)
        for mode in modes:
            point_cfg = dict(cfg, mode=mode)
            if axis in ("gamma", "kappa"):
                point_cfg[axis] = value
            config = build_train_config(point_cfg)
            jobs.append((value, mode, config, (point_data, spec, config, int(cfg["splits"]), float(cfg["test_fraction"]))))

    n_jobs = int(cfg["jobs"])
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_sweep_point, [j[3] for j in jobs]))
    else:
        results = [_sweep_point(j[3]) for j in jobs]

    outputs = ["sweep.csv"]
    lines = [",".join(AGGREGATE_HEADER)]
    for (value, mode, config, _), result in zip(jobs, results):
        agg = result.aggregate()
        cells = [repr(float(value)), mode]
        for m in METRIC_NAMES:
            cells += [repr(agg[m][0]), repr(agg[m][1])]
        lines.append(",".join(cells))
        name = f"points/{axis}={value!r}__{mode}.json"
        doc = {"axis": axis, "axis_value": value, "mode": mode, "train_config": config.to_dict(), **result.to_dict()}
        write_json(out_dir / name, doc)
        outputs.append(name)
    atomic_write_text(out_dir / "sweep.csv", "\n".join(lines) + "\n")
    return _manifest("sweep", cfg, {"dataset": dataset_path}, {"seed": seed}, outputs)


# --- argument parser ------------------------------------------------------------


def _add_common(p):
    p.add_argument("--out-dir", required=True, help="directory for all outputs")
    p.add_argument("--config", help="JSON file of option values; flags take precedence")


def _add_train_flags(p):
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--gamma", type=float, help="fairness weight (mode base)")
    p.add_argument("--kappa", type=float, help="soft accuracy sharpness")
    p.add_argument("--surrogate", choices=SURROGATE_INPUTS, help="soft accuracy input")
    p.add_argument("--balance", dest="balance", action="store_const", const=True,
                   help="oversample so every (protected, target) pair is equally sized")
    p.add_argument("--no-balance", dest="balance", action="store_const", const=False)
    p.add_argument("--stratified", dest="stratified", action="store_const", const=True)
    p.add_argument("--no-stratified", dest="stratified", action="store_const", const=False)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-schedule", choices=("cosine", "constant"))
    p.add_argument("--lr-granularity", choices=("epoch", "step"))
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--hidden", help="comma-separated hidden layer widths; empty for a linear model")
    p.add_argument("--activation", choices=("relu", "tanh"))
    p.add_argument("--seed", type=int)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--eval-every", type=int)


def build_parser():
    parser = _Parser(prog="basefair", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"basefair {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--demographics", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--separation", type=float, help="distance between class centroids")
    p.add_argument("--noise", help="per-demographic noise scales, comma-separated")
    p.add_argument("--shift", help="per-demographic offsets, rows separated by ';'")
    p.add_argument("--pair-distribution", help="[target][protected] relative rates, rows separated by ';'")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("skew", help="undersample a dataset to a skewed pair distribution")
    _add_common(p)
    p.add_argument("dataset")
    p.add_argument("--skew", type=float)
    p.add_argument("--class-order")
    p.add_argument("--demographic-order")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train on a balanced train/test split")
    _add_common(p)
    p.add_argument("dataset")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--on-missing", choices=("error", "skip"))

    p = sub.add_parser("sweep", help="grid over gamma, kappa or skew")
    _add_common(p)
    p.add_argument("dataset")
    _add_train_flags(p)
    p.add_argument("--axis", choices=("gamma", "kappa", "skew"))
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--modes", help="comma-separated modes to run at each point")
    p.add_argument("--splits", type=int)
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir", required=True)
    return parser


def _execute(command, cfg, inputs, out_dir):
    if command == "gen":
        return cmd_gen(cfg, out_dir)
    if command == "skew":
        return cmd_skew(cfg, out_dir, inputs["dataset"])
    if command == "train":
        return cmd_train(cfg, out_dir, inputs["dataset"])
    if command == "eval":
        return cmd_eval(cfg, out_dir, inputs["checkpoint"], inputs["dataset"])
    if command == "sweep":
        return cmd_sweep(cfg, out_dir, inputs["dataset"])
    raise UsageError(f"unknown command {command!r}")


_DEFAULTS = {
    "gen": GEN_DEFAULTS,
    "skew": SKEW_DEFAULTS,
    "train": TRAIN_DEFAULTS,
    "eval": {"on_missing": "error"},
    "sweep": SWEEP_DEFAULTS,
}


def _replay(manifest_path, out_dir):
    doc = read_json(manifest_path)
    inputs = {}
    for name, rec in doc["inputs"].items():
        path = rec["path"]
        if not Path(path).exists():
            raise FileNotFoundError(f"input {name} missing: {path}")
        if file_digest(path) != rec["digest"]:
            raise ParseError(f"input {name} at {path} no longer matches its recorded digest")
        inputs[name] = path
    if doc["tool_version"] != __version__:
        log.warning("manifest written by basefair %s, replaying with %s", doc["tool_version"], __version__)
    return doc["command"], doc["config"], inputs, doc.get("timestamps")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    started = _now()
    timestamps = None
    try:
        if args.command == "replay":
            # a replay is the same run, so its manifest keeps the recorded timestamps
            command, cfg, inputs, timestamps = _replay(args.manifest, args.out_dir)
        else:
            command = args.command
            cfg = _resolve(args, _DEFAULTS[command])
            inputs = {k: getattr(args, k) for k in ("dataset", "checkpoint") if hasattr(args, k)}
        for name, path in inputs.items():
            if not Path(path).exists():
                raise FileNotFoundError(f"{name} not found: {path}")
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = _execute(command, cfg, inputs, out_dir)
        _write_manifest(out_dir, manifest, started, timestamps)
    except UsageError as exc:
        print(f"basefair: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"basefair: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, DegenerateGroupError, MissingGroupError, ConfigurationError, FileNotFoundError, ValueError) as exc:
        print(f"basefair: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

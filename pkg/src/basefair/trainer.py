"""Mini-batch training with the fairness objective, and split-level experiments."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from basefair.data import Dataset, balanced_test_split, oversample_balance
from basefair.errors import ConfigurationError, DegenerateGroupError, NumericError
from basefair.metrics import MetricsReport, OutputBatch, compute_report, correct_mask
from basefair.model import (
    ModelParams,
    ModelSpec,
    OptimizerState,
    adamw_step,
    backward,
    forward,
    init_params,
)
from basefair.objective import ObjectiveConfig, total_loss

log = logging.getLogger(__name__)

LR_SCHEDULES = ("cosine", "constant")
LR_GRANULARITY = ("epoch", "step")
METRIC_NAMES = ("acc", "sigma_acc", "deo_max", "deo_avg")

# Fixed sub-stream ids so each random consumer gets an independent generator.
_STREAMS = {"balance": 1, "batches": 2}


def stream_seed(seed: int, stream: str, *extra: int) -> int:
    """Derive the seed of a named random sub-stream from the run seed."""
    ss = np.random.SeedSequence([int(seed), _STREAMS[stream], *[int(e) for e in extra]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 512
    base_lr: float = 1e-4
    lr_schedule: str = "cosine"
    lr_granularity: str = "epoch"
    weight_decay: float = 0.02
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    balance_training_set: bool = False
    # None: stratify exactly when the fairness term is active
    stratified_batches: Optional[bool] = None
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if not self.base_lr > 0:
            raise ConfigurationError("base_lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.lr_granularity not in LR_GRANULARITY:
            raise ConfigurationError(f"lr_granularity must be one of {LR_GRANULARITY}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.eval_every < 0:
            raise ConfigurationError("eval_every must be non-negative")

    @property
    def use_stratified(self) -> bool:
        if self.stratified_batches is None:
            return self.objective.gamma > 0
        return self.stratified_batches

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "lr_schedule": self.lr_schedule,
            "lr_granularity": self.lr_granularity,
            "weight_decay": self.weight_decay,
            "objective": {
                "kappa": self.objective.kappa,
                "gamma": self.objective.gamma,
                "surrogate_input": self.objective.surrogate_input,
                "sigma_epsilon": self.objective.sigma_epsilon,
            },
            "balance_training_set": self.balance_training_set,
            "stratified_batches": self.use_stratified,
            "seed": self.seed,
            "eval_every": self.eval_every,
        }


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    ce: float
    sigma_soft: float
    train_accuracy: float
    lr: float
    batches: int
    skipped_batches: int = 0


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    evaluations: List[Tuple[int, MetricsReport]] = field(default_factory=list)

    @property
    def skipped_batches(self) -> int:
        return sum(r.skipped_batches for r in self.epochs)

    def to_dict(self) -> dict:
        return {
            "epochs": [vars(r).copy() for r in self.epochs],
            "evaluations": [{"epoch": e, "metrics": rep.to_dict()} for e, rep in self.evaluations],
            "skipped_batches": self.skipped_batches,
        }


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from ``base_lr`` towards zero; no warmup, no restarts."""
    if total_steps < 1 or not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _schedule(config: TrainConfig, step: int, total: int) -> float:
    if config.lr_schedule == "constant":
        return config.base_lr
    return cosine_lr(step, total, config.base_lr)


def stratified_batches(dataset: Dataset, batch_size: int, seed: int) -> List[np.ndarray]:
    """One epoch of index batches with (nearly) equal draws from every (protected, target) pair.

    Each batch takes ``batch_size // P`` samples from each of the P non-empty
    pairs; the leftover slots rotate across pairs from batch to batch. Pairs
    are walked in reshuffled passes, so smaller pairs repeat and every sample
    is drawn at least once per epoch.
    """
    groups = [v for _, v in sorted(dataset.pair_indices().items()) if len(v)]
    P = len(groups)
    if P == 0:
        raise ConfigurationError("cannot batch an empty dataset")
    if batch_size < P:
        raise ConfigurationError(
            f"batch_size {batch_size} is smaller than the number of (protected, target) pairs {P}"
        )
    per_pair, spare = divmod(batch_size, P)
    n_batches = max(math.ceil(len(g) / per_pair) for g in groups)

    rng = np.random.default_rng(seed)
    streams = []
    for g in groups:
        need = n_batches * (per_pair + 1)
        passes = [rng.permutation(g) for _ in range(math.ceil(need / len(g)))]
        streams.append(np.concatenate(passes))

    cursor = [0] * P
    batches = []
    for b in range(n_batches):
        extra = {(b * spare + j) % P for j in range(spare)}
        parts = []
        for p in range(P):
            take = per_pair + (p in extra)
            parts.append(streams[p][cursor[p] : cursor[p] + take])
            cursor[p] += take
        batches.append(np.concatenate(parts))
    return batches


def shuffled_batches(n: int, batch_size: int, seed: int) -> List[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def predict_logits(params: ModelParams, spec: ModelSpec, features) -> np.ndarray:
    return forward(params, features, spec.activation)[0]


def evaluate(params: ModelParams, spec: ModelSpec, dataset: Dataset, on_missing: str = "error") -> MetricsReport:
    logits = predict_logits(params, spec, dataset.features)
    return compute_report(OutputBatch(logits, dataset.targets, dataset.protected), on_missing)


def _epoch_batches(dataset, config, batch_size, epoch):
    seed = stream_seed(config.seed, "batches", epoch)
    if config.use_stratified:
        return stratified_batches(dataset, batch_size, seed)
    return shuffled_batches(len(dataset), batch_size, seed)


def train(
    dataset: Dataset,
    spec: ModelSpec,
    config: TrainConfig,
    test: Optional[Dataset] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[ModelParams, TrainHistory]:
    """Train a fresh model; deterministic in ``(dataset, spec, config)``.

    When ``config.balance_training_set`` is set the training set is
    oversampled first, with a seed derived from ``config.seed``.
    """
    if dataset.num_classes != spec.num_classes:
        raise ConfigurationError(
            f"dataset has {dataset.num_classes} classes but model expects {spec.num_classes}"
        )
    if dataset.feature_dim != spec.input_dim:
        raise ConfigurationError(
            f"dataset has {dataset.feature_dim} features but model expects {spec.input_dim}"
        )
    if len(dataset) == 0:
        raise ConfigurationError("empty training set")

    if config.balance_training_set:
        dataset = oversample_balance(dataset, stream_seed(config.seed, "balance"))

    batch_size = min(config.batch_size, len(dataset))
    demographics = np.unique(dataset.protected).tolist()
    obj = config.objective

    params = init_params(spec)
    state = OptimizerState.for_params(params, lr=config.base_lr, weight_decay=config.weight_decay)
    history = TrainHistory()
    last_good = (0, params.copy())

    steps_per_epoch = len(_epoch_batches(dataset, config, batch_size, 0))
    total_steps = config.epochs * steps_per_epoch
    step = 0

    for epoch in range(config.epochs):
        epoch_lr = _schedule(config, epoch, config.epochs)
        totals, ces, sigmas = [], [], []
        skipped = 0
        batches = _epoch_batches(dataset, config, batch_size, epoch)
        for idx in batches:
            if config.lr_granularity == "step":
                lr = _schedule(config, min(step, total_steps - 1), total_steps)
            else:
                lr = epoch_lr
            step += 1
            logits, cache = forward(params, dataset.features[idx], spec.activation)
            batch = OutputBatch(logits, dataset.targets[idx], dataset.protected[idx])
            try:
                # only unstratified batches can miss a demographic
                loss = total_loss(batch, obj, None if config.use_stratified else demographics)
            except DegenerateGroupError as exc:
                log.warning("epoch %d: skipping batch, %s", epoch, exc)
                skipped += 1
                continue
            if not (math.isfinite(loss.total) and np.all(np.isfinite(loss.grad_outputs))):
                raise NumericError(f"non-finite loss at epoch {epoch}", last_good=last_good)
            grads = backward(params, cache, loss.grad_outputs, spec.activation)
            try:
                adamw_step(params, grads, state, lr)
            except NumericError as exc:
                raise NumericError(str(exc), last_good=last_good) from exc
            totals.append(loss.total)
            ces.append(loss.ce_component)
            sigmas.append(loss.sigma_soft_component)

        n = len(totals)
        logits = predict_logits(params, spec, dataset.features)
        train_acc = float(correct_mask(logits, dataset.targets).mean())
        record = EpochRecord(
            epoch=epoch,
            total_loss=math.fsum(totals) / n if n else float("nan"),
            ce=math.fsum(ces) / n if n else float("nan"),
            sigma_soft=math.fsum(sigmas) / n if n else float("nan"),
            train_accuracy=train_acc,
            lr=epoch_lr,
            batches=len(batches),
            skipped_batches=skipped,
        )
        history.epochs.append(record)
        if on_epoch:
            on_epoch(record)
        last_good = (epoch + 1, params.copy())

        if test is not None and config.eval_every and (
            (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs
        ):
            history.evaluations.append((epoch, evaluate(params, spec, test, on_missing="skip")))

    return params, history


@dataclass
class SplitResult:
    seed: int
    report: Optional[MetricsReport] = None
    error: Optional[str] = None
    params: Optional[ModelParams] = None
    history: Optional[TrainHistory] = None


@dataclass
class ExperimentResult:
    splits: List[SplitResult]

    @property
    def reports(self) -> List[MetricsReport]:
        return [s.report for s in self.splits if s.report is not None]

    @property
    def partial(self) -> bool:
        return any(s.error is not None for s in self.splits)

    def values(self, metric: str) -> List[float]:
        return [report_value(r, metric) for r in self.reports]

    def aggregate(self) -> Dict[str, Tuple[float, float]]:
        """Mean and population std of each headline metric over successful splits."""
        out = {}
        for m in METRIC_NAMES:
            vals = np.array(self.values(m))
            out[m] = (float(vals.mean()), float(vals.std())) if len(vals) else (float("nan"), float("nan"))
        return out

    def to_dict(self) -> dict:
        return {
            "splits": [
                {
                    "seed": s.seed,
                    "metrics": s.report.to_dict() if s.report else None,
                    "error": s.error,
                    "history": s.history.to_dict() if s.history else None,
                }
                for s in self.splits
            ],
            "aggregate": {m: {"mean": mu, "std": sd} for m, (mu, sd) in self.aggregate().items()},
            "partial": self.partial,
        }


def report_value(report: MetricsReport, metric: str) -> float:
    return {
        "acc": report.overall_accuracy,
        "sigma_acc": report.sigma_acc,
        "deo_max": report.deo_max,
        "deo_avg": report.deo_avg,
    }[metric]


def run_split(dataset: Dataset, spec: ModelSpec, config: TrainConfig, test_fraction: float, index: int,
              keep_params: bool = False) -> SplitResult:
    """Train and evaluate split ``index``; split, training and init seeds all shift by ``index``."""
    seed = config.seed + index
    train_set, test_set = balanced_test_split(dataset, test_fraction, seed)
    params, history = train(train_set, replace(spec, init_seed=spec.init_seed + index), replace(config, seed=seed))
    report = evaluate(params, spec, test_set)
    return SplitResult(seed, report, params=params if keep_params else None, history=history)


def run_experiment(
    dataset: Dataset,
    spec: ModelSpec,
    config: TrainConfig,
    splits: int = 3,
    test_fraction: float = 0.2,
) -> ExperimentResult:
    """Train on each balanced split and collect the test-set reports.

    A split that fails is recorded with its error and left out of the aggregate.
    """
    results = []
    for i in range(splits):
        try:
            results.append(run_split(dataset, spec, config, test_fraction, i))
        except (NumericError, DegenerateGroupError, ConfigurationError) as exc:
            log.error("split %d failed: %s", i, exc)
            results.append(SplitResult(config.seed + i, error=f"{type(exc).__name__}: {exc}"))
    return ExperimentResult(results)

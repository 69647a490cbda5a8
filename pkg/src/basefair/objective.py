"""Differentiable fairness loss: soft accuracy, its spread across demographics,
and the combination with cross-entropy.

Every gradient here is with respect to the model outputs so it can be fed
straight into ``model.backward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from basefair.errors import DegenerateGroupError, EmptyInputError
from basefair.metrics import OutputBatch

SURROGATE_INPUTS = ("softmax_probabilities", "raw_logits")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Hyperparameters of the fairness objective.

    ``kappa`` sets the sigmoid sharpness, ``gamma`` the weight of the
    fairness term. ``surrogate_input`` chooses whether soft accuracy is
    computed on softmax probabilities or directly on logits.
    """

    kappa: float = 10.0
    gamma: float = 0.0
    surrogate_input: str = "softmax_probabilities"
    sigma_epsilon: float = 1e-12

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if not self.sigma_epsilon > 0:
            raise ValueError(f"sigma_epsilon must be positive, got {self.sigma_epsilon}")
        if self.surrogate_input not in SURROGATE_INPUTS:
            raise ValueError(
                f"surrogate_input must be one of {SURROGATE_INPUTS}, got {self.surrogate_input!r}"
            )


@dataclass
class LossValue:
    total: float
    ce_component: float
    sigma_soft_component: float
    grad_outputs: np.ndarray


def largest_non_target(output: Sequence[float], target_index: int) -> Tuple[float, int]:
    """Largest entry other than the target; ties go to the lowest index."""
    output = np.asarray(output, dtype=float)
    if output.ndim != 1 or output.size < 2:
        raise ValueError("output must be a vector with at least 2 elements")
    if not 0 <= target_index < output.size:
        raise ValueError(f"target index {target_index} out of range")
    masked = output.copy()
    masked[target_index] = -np.inf
    idx = int(np.argmax(masked))
    return float(output[idx]), idx


def _largest_non_target_batch(outputs: np.ndarray, targets: np.ndarray):
    rows = np.arange(len(outputs))
    masked = outputs.copy()
    masked[rows, targets] = -np.inf
    idx = np.argmax(masked, axis=1)
    return outputs[rows, idx], idx


def _sigmoid(z):
    # two-branch form: exp() only ever sees non-positive arguments
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def soft_accuracy(y_t, y_m, kappa: float):
    """Sigmoid of the scaled margin between the target output and its largest rival.

    Works elementwise on arrays; returns a float for scalar inputs.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    s = _sigmoid(kappa * (np.asarray(y_t, dtype=float) - np.asarray(y_m, dtype=float)))
    return float(s) if s.ndim == 0 else s


def soft_accuracy_grad(y_t, y_m, kappa: float):
    """Partial derivatives of ``soft_accuracy`` w.r.t. ``y_t`` and ``y_m``."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    z = kappa * (np.asarray(y_t, dtype=float) - np.asarray(y_m, dtype=float))
    # s(1-s) == sigmoid(z) * sigmoid(-z); avoids cancellation when s rounds to 1
    d = kappa * _sigmoid(z) * _sigmoid(-z)
    if d.ndim == 0:
        return float(d), float(-d)
    return d, -d


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. softmax outputs back onto the logits."""
    inner = np.sum(grad_probs * probs, axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def sigma_acc_soft(
    batch: OutputBatch,
    config: ObjectiveConfig,
    demographics: Optional[Sequence[int]] = None,
) -> Tuple[float, np.ndarray]:
    """Smoothed population std of per-demographic mean soft accuracy.

    ``batch.outputs`` are used as given (callers pick probabilities or
    logits). Without ``demographics`` the spread is taken over whichever
    demographics occur in the batch; with it, every listed demographic must
    be present.

    Returns the value and its gradient w.r.t. ``batch.outputs``.
    """
    n = len(batch)
    if n == 0:
        raise EmptyInputError("sigma_acc_soft on an empty batch")
    outputs, targets, protected = batch.outputs, batch.targets, batch.protected

    present, group_idx, counts = np.unique(protected, return_inverse=True, return_counts=True)
    if demographics is not None:
        missing = sorted(set(int(a) for a in demographics) - set(present.tolist()))
        if missing:
            raise DegenerateGroupError(missing[0], f"demographic {missing[0]} has no samples in batch")

    rows = np.arange(n)
    y_t = outputs[rows, targets]
    y_m, m_idx = _largest_non_target_batch(outputs, targets)
    s = soft_accuracy(y_t, y_m, config.kappa)
    ds_dt, ds_dm = soft_accuracy_grad(y_t, y_m, config.kappa)

    num_groups = len(present)
    group_mean = np.bincount(group_idx, weights=s, minlength=num_groups) / counts
    mu = group_mean.mean()
    centred = group_mean - mu
    variance = max(float(np.dot(centred, centred)) / num_groups, 0.0)

    eps = config.sigma_epsilon
    root = math.sqrt(variance + eps)
    value = root - math.sqrt(eps)

    grad = np.zeros_like(outputs)
    if num_groups > 1:
        # d value / d group_mean[a]; the mean term drops out because centred sums to zero
        d_group = (centred * (2.0 / num_groups)) / (2.0 * root)
        d_s = d_group[group_idx] / counts[group_idx]
        np.add.at(grad, (rows, targets), d_s * ds_dt)
        np.add.at(grad, (rows, m_idx), d_s * ds_dm)
    return value, grad


def cross_entropy(batch: OutputBatch) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the targets; outputs are logits."""
    n = len(batch)
    if n == 0:
        raise EmptyInputError("cross_entropy on an empty batch")
    logits = batch.outputs
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = lse - shifted[rows, batch.targets]
    value = math.fsum(losses.tolist()) / n
    grad = np.exp(shifted - lse[:, None])
    grad[rows, batch.targets] -= 1.0
    return value, grad / n


def total_loss(
    batch: OutputBatch,
    config: ObjectiveConfig,
    demographics: Optional[Sequence[int]] = None,
) -> LossValue:
    """Cross-entropy plus ``gamma`` times the soft accuracy spread.

    ``batch.outputs`` are logits; the returned gradient is w.r.t. logits in
    both surrogate modes. With ``gamma == 0`` the fairness term is not
    evaluated at all.
    """
    ce, grad = cross_entropy(batch)
    if config.gamma == 0:
        return LossValue(ce, ce, 0.0, grad)

    if config.surrogate_input == "softmax_probabilities":
        probs = softmax(batch.outputs)
        sigma, g_probs = sigma_acc_soft(batch.with_outputs(probs), config, demographics)
        g_sigma = softmax_backward(probs, g_probs)
    else:
        sigma, g_sigma = sigma_acc_soft(batch, config, demographics)

    return LossValue(
        total=ce + config.gamma * sigma,
        ce_component=ce,
        sigma_soft_component=sigma,
        grad_outputs=grad + config.gamma * g_sigma,
    )

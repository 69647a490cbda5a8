"""Small multilayer perceptron with hand-written backprop and an AdamW optimiser."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from basefair.errors import NumericError
from basefair.io import atomic_write_text

ACTIVATIONS = ("relu", "tanh")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden_dims: Tuple[int, ...] = ()
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer dimensions must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_dims(self) -> List[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass
class ModelParams:
    """Weights ``(fan_in, fan_out)`` and biases per layer.

    ``version`` is bumped on every optimiser update so stale forward caches
    can be detected.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    version: int = 0

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.version)

    def num_layers(self) -> int:
        return len(self.weights)


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]  # input to each layer
    pre_activations: List[np.ndarray]  # hidden layers only
    param_version: int
    param_id: int


def init_params(spec: ModelSpec) -> ModelParams:
    """Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights, zero biases."""
    rng = np.random.default_rng(spec.init_seed)
    dims = spec.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases)


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z, activation):
    if activation == "relu":
        return (z > 0).astype(float)
    t = np.tanh(z)
    return 1.0 - t * t


def forward(params: ModelParams, features, activation: str = "relu"):
    """Logits for a batch of feature rows, plus the cache ``backward`` needs."""
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"feature dimension mismatch: expected {params.weights[0].shape[0]}, got shape {x.shape}"
        )
    inputs, pre = [], []
    h = x
    last = params.num_layers() - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        if i == last:
            h = z
        else:
            pre.append(z)
            h = _activate(z, activation)
    return h, ForwardCache(inputs, pre, params.version, id(params))


def backward(params: ModelParams, cache: ForwardCache, grad_logits, activation: str = "relu"):
    """Gradients ``[(dW, db), ...]`` per layer given d loss / d logits."""
    if cache.param_id != id(params) or cache.param_version != params.version:
        raise ValueError("forward cache is stale or belongs to different parameters")
    g = np.asarray(grad_logits, dtype=float)
    n_out = params.weights[-1].shape[1]
    if g.shape != (len(cache.inputs[0]), n_out):
        raise ValueError(f"grad_logits shape {g.shape} does not match forward output")
    grads = [None] * params.num_layers()
    for i in reversed(range(params.num_layers())):
        grads[i] = (cache.inputs[i].T @ g, g.sum(axis=0))
        if i > 0:
            g = (g @ params.weights[i].T) * _activate_grad(cache.pre_activations[i - 1], activation)
    return grads


@dataclass
class OptimizerState:
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.02

    @classmethod
    def for_params(cls, params: ModelParams, **kwargs) -> "OptimizerState":
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls(zeros, [z.copy() for z in zeros], **kwargs)


def adamw_step(params: ModelParams, grads, state: OptimizerState, lr: Optional[float] = None):
    """One AdamW update, in place. Decay is applied to the parameters directly."""
    flat_grads = []
    for gw, gb in grads:
        flat_grads += [gw, gb]
    arrays = params.arrays()
    if len(flat_grads) != len(arrays):
        raise ValueError("gradient list does not match parameter layout")
    for g, p in zip(flat_grads, arrays):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at optimiser step {state.step_count + 1}")

    if lr is not None:
        state.lr = lr
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    decay = 1.0 - state.lr * state.weight_decay
    for p, g, m, v in zip(arrays, flat_grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= decay
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    params.version += 1
    return params, state


def save_checkpoint(path, spec: ModelSpec, params: ModelParams, state: Optional[OptimizerState] = None, extra=None):
    """Write a JSON checkpoint atomically. Floats round-trip exactly."""
    doc = {
        "format": "basefair-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "params": {
            "weights": [w.tolist() for w in params.weights],
            "biases": [b.tolist() for b in params.biases],
        },
        "optimizer": None,
    }
    if state is not None:
        doc["optimizer"] = {
            "step_count": state.step_count,
            "lr": state.lr,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
            "weight_decay": state.weight_decay,
            "first_moment": [m.tolist() for m in state.first_moment],
            "second_moment": [v.tolist() for v in state.second_moment],
        }
    if extra:
        doc["extra"] = extra
    atomic_write_text(path, json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(spec, params, state_or_None, extra)``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "basefair-checkpoint":
        raise ValueError(f"{path} is not a checkpoint file")
    if doc["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc['version']}")
    spec = ModelSpec(**doc["spec"])
    params = ModelParams(
        [np.array(w, dtype=float).reshape(a, b) for w, (a, b) in zip(doc["params"]["weights"], zip(spec.layer_dims[:-1], spec.layer_dims[1:]))],
        [np.array(b, dtype=float) for b in doc["params"]["biases"]],
    )
    state = None
    opt = doc.get("optimizer")
    if opt:
        state = OptimizerState(
            first_moment=[np.array(m, dtype=float).reshape(p.shape) for m, p in zip(opt["first_moment"], params.arrays())],
            second_moment=[np.array(v, dtype=float).reshape(p.shape) for v, p in zip(opt["second_moment"], params.arrays())],
            step_count=opt["step_count"],
            lr=opt["lr"],
            beta1=opt["beta1"],
            beta2=opt["beta2"],
            eps=opt["eps"],
            weight_decay=opt["weight_decay"],
        )
    return spec, params, state, doc.get("extra", {})

"""Small numpy feedforward network: forward pass, backprop, Adam and the plateau schedule.

Networks map one standardized atom descriptor to one output vector. Structure-level
targets are handled by ``SupervisedSet.owner``: atom outputs are summed per owning
sample before the squared error is taken, so the same code path trains atom-wise
heads (owner = identity) and atom-sum energy heads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ScalerStats, atomic_write_text

log = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-12


@dataclass(frozen=True)
class MlpLayout:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    output_softplus: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"invalid layout {self}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims),
                "output_dim": self.output_dim, "hidden_activation": "relu",
                "output_softplus": self.output_softplus}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpLayout":
        if d.get("hidden_activation", "relu") != "relu":
            raise ValueError("only relu hidden activations are supported")
        return cls(int(d["input_dim"]), tuple(d["hidden_dims"]), int(d["output_dim"]),
                   bool(d["output_softplus"]))


@dataclass
class MlpModel:
    layout: MlpLayout
    weights: list[np.ndarray]  # layer l: (dims[l+1], dims[l])
    biases: list[np.ndarray]
    scaler: ScalerStats

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: list[np.ndarray]) -> "MlpModel":
        return replace(self, weights=[p.copy() for p in params[0::2]],
                       biases=[p.copy() for p in params[1::2]])


@dataclass(frozen=True)
class TrainSchedule:
    initial_lr: float = 1e-3
    patience: int = 10
    lr_decay: float = 0.5
    min_lr: float = 1e-7
    max_epochs: int = 1000
    batch_size: int = 64

    def __post_init__(self):
        if not 0 < self.lr_decay < 1:
            raise ValueError("lr_decay must lie in (0, 1)")
        if not 0 < self.min_lr < self.initial_lr:
            raise ValueError("need 0 < min_lr < initial_lr")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be positive")


@dataclass
class SupervisedSet:
    """Atom inputs ``x`` and per-sample targets ``y``.

    ``owner[i]`` is the sample that atom ``i`` belongs to; atoms of one sample are
    contiguous. ``owner=None`` means every atom is its own sample.
    """

    x: np.ndarray
    y: np.ndarray
    owner: np.ndarray | None = None
    _starts: np.ndarray = field(init=False, repr=False)
    _counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.owner is None:
            if len(self.x) != len(self.y):
                raise ValueError("x and y lengths differ")
            self._counts = np.ones(len(self.y), dtype=int)
        else:
            self.owner = np.asarray(self.owner, dtype=int)
            if len(self.owner) != len(self.x) or np.any(np.diff(self.owner) < 0):
                raise ValueError("owner must be a sorted sample index per atom")
            self._counts = np.bincount(self.owner, minlength=len(self.y))
            if len(self._counts) != len(self.y) or np.any(self._counts == 0):
                raise ValueError("every sample needs at least one atom")
        self._starts = np.concatenate([[0], np.cumsum(self._counts)[:-1]]).astype(int)

    @property
    def n_samples(self) -> int:
        return len(self.y)

    def subset(self, idx: np.ndarray) -> "SupervisedSet":
        idx = np.asarray(idx, dtype=int)
        if self.owner is None:
            return SupervisedSet(self.x[idx], self.y[idx])
        counts = self._counts[idx]
        owner = np.repeat(np.arange(len(idx)), counts)
        atom_idx = np.repeat(self._starts[idx], counts) + (np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts))
        return SupervisedSet(self.x[atom_idx], self.y[idx], owner)


# ----------------------------------------------------------------------------
# forward / backward
# ----------------------------------------------------------------------------


def softplus(z):
    # floored so the output stays strictly positive where exp(z) underflows
    return np.maximum(np.logaddexp(0.0, z), np.finfo(float).tiny)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mlp_init(layout: MlpLayout, seed: int, scaler: ScalerStats | None = None) -> MlpModel:
    """Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dims = layout.dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(layout, weights, biases, scaler or ScalerStats.identity(layout.input_dim))


def _affine_rowwise(h, w, b, chunk=256):
    # each row reduced independently of its position in the batch
    out = np.empty((len(h), w.shape[0]))
    for s in range(0, len(h), chunk):
        out[s:s + chunk] = (h[s:s + chunk, None, :] * w[None, :, :]).sum(axis=2) + b
    return out


def _forward(model: MlpModel, x: np.ndarray, rowwise: bool = False):
    acts = [x]
    pre = []
    h = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = _affine_rowwise(h, w, b) if rowwise else h @ w.T + b
        pre.append(z)
        if l < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = softplus(z) if model.layout.output_softplus else z
    return h, (acts, pre)


def mlp_forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Network output for one input vector or a (batch, input_dim) matrix.

    Inputs are expected already standardized with ``model.scaler``. Each row's
    output is independent of the other rows, bit for bit.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.layout.input_dim:
        raise ValueError(f"input dimension {x.shape[-1]} != {model.layout.input_dim}")
    out, _ = _forward(model, np.atleast_2d(x), rowwise=True)
    return out[0] if x.ndim == 1 else out


def _backward(model: MlpModel, cache, dout: np.ndarray) -> list[np.ndarray]:
    acts, pre = cache
    grads: list[np.ndarray] = []
    g = dout * _sigmoid(pre[-1]) if model.layout.output_softplus else dout
    for l in range(len(model.weights) - 1, -1, -1):
        grads.append(g.sum(axis=0))  # bias
        grads.append(g.T @ acts[l])  # weight
        if l > 0:
            g = (g @ model.weights[l]) * (pre[l - 1] > 0)
    grads.reverse()
    return grads


def _sample_outputs(out: np.ndarray, data: SupervisedSet) -> np.ndarray:
    if data.owner is None:
        return out
    summed = np.zeros((data.n_samples, out.shape[1]))
    np.add.at(summed, data.owner, out)
    return summed


def mlp_loss(model: MlpModel, data: SupervisedSet) -> float:
    """Mean over samples of the squared Euclidean error of the (atom-summed) output."""
    out, _ = _forward(model, data.x)
    err = _sample_outputs(out, data) - data.y
    return float(np.mean(np.sum(err * err, axis=1)))


def mlp_gradient(model: MlpModel, data: SupervisedSet) -> tuple[float, list[np.ndarray]]:
    """Loss and exact parameter gradients, ordered like ``model.params``."""
    if data.n_samples == 0:
        raise ValueError("empty batch")
    out, cache = _forward(model, data.x)
    err = _sample_outputs(out, data) - data.y
    loss = float(np.mean(np.sum(err * err, axis=1)))
    dsample = 2.0 * err / data.n_samples
    datom = dsample if data.owner is None else dsample[data.owner]
    return loss, _backward(model, cache, datom)


# ----------------------------------------------------------------------------
# optimizer and training
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def optimizer_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray],
                   lr: float) -> tuple[list[np.ndarray], AdamState]:
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    return new, replace(state, m=m, v=v, t=t)


@dataclass(frozen=True)
class HistoryEntry:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float


def train_loop(model: MlpModel, train_set: SupervisedSet, val_set: SupervisedSet,
               schedule: TrainSchedule, seed: int) -> tuple[MlpModel, list[HistoryEntry]]:
    """Minibatch Adam with plateau halving and early stopping.

    Epoch 0 in the history is the untrained model. Stops after ``max_epochs`` or
    once the learning rate falls below ``min_lr``; returns the parameters with the
    lowest validation loss seen.
    """
    if train_set.n_samples == 0 or val_set.n_samples == 0:
        raise ValueError("train and validation sets must be nonempty")
    if train_set.x.shape[1] != model.layout.input_dim or val_set.x.shape[1] != model.layout.input_dim:
        raise ValueError("input dimension mismatch")
    rng = np.random.Generator(np.random.PCG64(seed))
    params = [p.copy() for p in model.params]
    state = AdamState.fresh(params)
    lr = schedule.initial_lr
    current = model.with_params(params)
    best_val = mlp_loss(current, val_set)
    best_params = params
    history = [HistoryEntry(0, mlp_loss(current, train_set), best_val, lr)]
    stale = 0
    n = train_set.n_samples
    for epoch in range(1, schedule.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            batch = train_set.subset(order[start:start + schedule.batch_size])
            _, grads = mlp_gradient(current, batch)
            params, state = optimizer_step(state, params, grads, lr)
            current = model.with_params(params)
        val = mlp_loss(current, val_set)
        history.append(HistoryEntry(epoch, mlp_loss(current, train_set), val, lr))
        if val < best_val - IMPROVEMENT_TOL:
            best_val, best_params, stale = val, params, 0
        else:
            stale += 1
            if stale >= schedule.patience:
                lr *= schedule.lr_decay
                stale = 0
                log.debug("epoch %d: lr -> %g", epoch, lr)
                if lr < schedule.min_lr:
                    break
    return model.with_params(best_params), history


# ----------------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------------


def model_to_dict(model: MlpModel) -> dict:
    return {
        "layout": model.layout.to_dict(),
        "scaler": model.scaler.to_dict(),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "optimizer": {"name": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    }


def model_from_dict(d: dict) -> MlpModel:
    layout = MlpLayout.from_dict(d["layout"])
    weights = [np.asarray(w, dtype=float) for w in d["weights"]]
    biases = [np.asarray(b, dtype=float) for b in d["biases"]]
    dims = layout.dims
    if len(weights) != len(dims) - 1 or len(biases) != len(weights):
        raise ValueError("parameter count does not match layout")
    for l, (w, b) in enumerate(zip(weights, biases)):
        if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
            raise ValueError(f"layer {l} has shapes {w.shape}, {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite parameters")
    return MlpModel(layout, weights, biases, ScalerStats.from_dict(d["scaler"]))


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False) + "\n"


def save_model(model: MlpModel, path, **extra) -> None:
    atomic_write_text(path, dumps_json({**model_to_dict(model), **extra}))


def load_model(path) -> MlpModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))

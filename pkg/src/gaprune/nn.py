"""Small dense MLPs with hand-written reverse-mode gradients and masked SGD.

Parameters are float64 numpy arrays.  A Linear layer stores its weight as
``(out_features, in_features)`` and computes ``x @ W.T + b``.  Weight arrays
are the only prunable tensors; biases are never masked.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UsageError

LOSSES = ("xent", "mse")
SCHEDULES = ("constant", "cosine")


class Linear:
    kind = "linear"

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray):
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"{name}: weight {weight.shape} / bias {bias.shape}")
        self.name = name
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __repr__(self):
        return f"Linear({self.name}, {self.in_features}->{self.out_features})"


class ReLU:
    kind = "relu"

    def __repr__(self):
        return "ReLU()"


class MLP:
    """Feed-forward stack of Linear/ReLU layers with a loss head.

    ``loss="xent"`` is softmax cross-entropy over integer labels; ``loss="mse"``
    is the per-sample sum of squared errors averaged over the batch, used for
    regression-style probes and toy checks.
    """

    def __init__(self, layers: Sequence, loss: str = "xent"):
        if loss not in LOSSES:
            raise ConfigError(f"unknown loss head {loss!r}")
        self.layers = list(layers)
        self.loss = loss
        # momentum buffers keyed like parameters(); owned by sgd_step
        self.velocity: dict[str, np.ndarray] = {}
        self.version = 0
        prev = None
        for lin in self.linears():
            if prev is not None and prev.out_features != lin.in_features:
                raise ShapeError(f"{prev.name} -> {lin.name}: {prev.out_features} != {lin.in_features}")
            prev = lin
        if prev is None:
            raise ConfigError("model needs at least one Linear layer")

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], seed: int = 0, loss: str = "xent") -> "MLP":
        """Build ``Linear -> ReLU -> ... -> Linear`` with Kaiming-uniform weights."""
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ConfigError(f"bad layer sizes {list(sizes)}")
        rng = np.random.default_rng(seed)
        layers: list = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layers.append(Linear(f"fc{i}", w, np.zeros(fan_out)))
            if i < len(sizes) - 2:
                layers.append(ReLU())
        return cls(layers, loss=loss)

    def linears(self) -> list[Linear]:
        return [layer for layer in self.layers if layer.kind == "linear"]

    def layer(self, name: str) -> Linear:
        for lin in self.linears():
            if lin.name == name:
                return lin
        raise KeyError(name)

    @property
    def sizes(self) -> list[int]:
        lins = self.linears()
        return [lins[0].in_features] + [lin.out_features for lin in lins]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for lin in self.linears():
            params[f"{lin.name}.weight"] = lin.weight
            params[f"{lin.name}.bias"] = lin.bias
        return params

    def weights(self) -> dict[str, np.ndarray]:
        return {lin.name: lin.weight for lin in self.linears()}

    def touch(self):
        """Mark parameters as modified; invalidates outstanding caches."""
        self.version += 1

    def copy(self) -> "MLP":
        return copy.deepcopy(self)

    def __repr__(self):
        return f"MLP({self.sizes}, loss={self.loss})"


@dataclass
class Cache:
    model: MLP
    version: int
    inputs: list  # input to each layer, in layer order
    output: np.ndarray  # logits
    targets: np.ndarray
    probs: np.ndarray | None = None
    used: bool = False


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def forward(model: MLP, batch_x: np.ndarray, batch_y: np.ndarray) -> tuple[float, Cache]:
    x = np.asarray(batch_x, dtype=np.float64)
    y = np.asarray(batch_y)
    first = model.linears()[0]
    if x.ndim != 2 or x.shape[1] != first.in_features:
        raise ShapeError(f"input shape {x.shape} does not fit {first!r}")
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} samples but {y.shape[0]} targets")
    n_out = model.linears()[-1].out_features
    if model.loss == "xent":
        if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
            raise ShapeError("cross-entropy targets must be a 1-d integer array")
        if y.size and (y.min() < 0 or y.max() >= n_out):
            raise ShapeError(f"labels outside [0, {n_out})")
    elif y.reshape(len(y), -1).shape[1] != n_out:
        raise ShapeError(f"mse targets must have {n_out} columns")
    if x.shape[0] == 0:
        raise ShapeError("empty batch")

    inputs = []
    h = x
    for layer in model.layers:
        inputs.append(h)
        if layer.kind == "linear":
            h = h @ layer.weight.T + layer.bias
        else:
            h = np.maximum(h, 0.0)
        _check_finite(h, repr(layer))

    cache = Cache(model, model.version, inputs, h, y)
    n = x.shape[0]
    if model.loss == "xent":
        shifted = h - h.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        sums = expz.sum(axis=1, keepdims=True)
        cache.probs = expz / sums
        logp = shifted[np.arange(n), y] - np.log(sums[:, 0])
        loss = float(-logp.mean())
    else:
        diff = h - y.reshape(n, -1)
        loss = float((diff * diff).sum() / n)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, cache


def backward(cache: Cache) -> dict[str, np.ndarray]:
    """Exact gradients of the batch loss for every parameter array."""
    model = cache.model
    if cache.version != model.version:
        raise UsageError("cache is stale: model parameters changed after forward")
    if cache.used:
        raise UsageError("cache already consumed by backward")
    cache.used = True

    n = cache.output.shape[0]
    if model.loss == "xent":
        delta = cache.probs.copy()
        delta[np.arange(n), cache.targets] -= 1.0
        delta /= n
    else:
        delta = 2.0 * (cache.output - cache.targets.reshape(n, -1)) / n

    grads: dict[str, np.ndarray] = {}
    for layer, h_in in zip(reversed(model.layers), reversed(cache.inputs)):
        if layer.kind == "linear":
            grads[f"{layer.name}.weight"] = delta.T @ h_in
            grads[f"{layer.name}.bias"] = delta.sum(axis=0)
            delta = delta @ layer.weight
        else:
            delta = delta * (h_in > 0.0)
    return {k: grads[k] for k in model.parameters()}


def loss_and_grads(model: MLP, batch_x, batch_y) -> tuple[float, dict[str, np.ndarray]]:
    loss, cache = forward(model, batch_x, batch_y)
    return loss, backward(cache)


def finite_diff_grad(model: MLP, batch_x, batch_y, epsilon: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, one scalar parameter at a time."""
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    probe = model.copy()
    out = {}
    for key, param in probe.parameters().items():
        est = np.zeros_like(param)
        flat = param.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up, _ = forward(probe, batch_x, batch_y)
            flat[idx] = orig - epsilon
            down, _ = forward(probe, batch_x, batch_y)
            flat[idx] = orig
            est.reshape(-1)[idx] = (up - down) / (2.0 * epsilon)
        out[key] = est
    return out


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: str = "constant"
    warmup_epochs: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be nonnegative")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be nonnegative")


def lr_at(opt: OptimizerConfig, epoch: int, total_epochs: int) -> float:
    """Per-epoch learning rate: optional linear warm-up, then cosine annealing."""
    if total_epochs <= 0:
        raise UsageError(f"total_epochs must be positive, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise UsageError(f"epoch {epoch} outside [0, {total_epochs})")
    if opt.schedule == "constant":
        return opt.lr
    warm = opt.warmup_epochs
    if epoch < warm:
        return opt.lr * (epoch + 1) / warm
    progress = (epoch - warm) / (total_epochs - warm)
    return opt.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(
    model: MLP,
    grads: Mapping[str, np.ndarray],
    masks: Mapping[str, np.ndarray],
    opt: OptimizerConfig,
    lr_now: float,
):
    """One SGD-with-momentum update of ``model`` in place.

    Layers named in ``masks`` have their weight, momentum buffer and update
    zeroed wherever the mask is 0.  Weight decay touches weights only.
    """
    if not lr_now > 0:
        raise UsageError(f"lr_now must be positive, got {lr_now}")
    for lin in model.linears():
        mask = masks.get(lin.name)
        if mask is not None and mask.shape != lin.weight.shape:
            raise ShapeError(f"mask for {lin.name} has shape {mask.shape}, weight {lin.weight.shape}")
        for kind, param in (("weight", lin.weight), ("bias", lin.bias)):
            key = f"{lin.name}.{kind}"
            g = grads[key]
            if g.shape != param.shape:
                raise ShapeError(f"gradient {key} has shape {g.shape}, expected {param.shape}")
            if kind == "weight" and opt.weight_decay:
                g = g + opt.weight_decay * param
            if opt.momentum:
                buf = model.velocity.get(key)
                buf = g.copy() if buf is None else opt.momentum * buf + g
            else:
                buf = g
            if kind == "weight" and mask is not None:
                buf = np.where(mask, buf, 0.0)
            if opt.momentum:
                model.velocity[key] = buf
            param -= lr_now * buf
            if kind == "weight" and mask is not None:
                np.copyto(param, 0.0, where=~mask.astype(bool))
    model.touch()


def reset_momentum(model: MLP):
    model.velocity.clear()


def predict(model: MLP, x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    for layer in model.layers:
        h = h @ layer.weight.T + layer.bias if layer.kind == "linear" else np.maximum(h, 0.0)
    return h


def evaluate(model: MLP, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Return ``(mean loss, accuracy)``; accuracy is NaN for the mse head."""
    loss, cache = forward(model, x, y)
    if model.loss != "xent":
        return loss, float("nan")
    acc = float(np.mean(cache.output.argmax(axis=1) == y))
    return loss, acc

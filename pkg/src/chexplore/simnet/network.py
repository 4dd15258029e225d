"""Channelized feed-forward network with a batch-norm surrogate.

Hidden layer ``l`` maps ``C[l-1]`` inputs to ``C[l]`` channels::

    z = a @ (w * m)          # w has shape (C[l-1], C[l]); columns are channels
    xhat = standardize(z)    # per channel over the batch (or identity in scale_only)
    a' = relu((gamma * xhat + beta) * out_mask)

followed by a linear head. Parameters live in ``net.params`` under the names
``w{l}``, ``gamma{l}``, ``beta{l}``, ``head_w`` and ``head_b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import InvalidArgumentError, InvalidInputError, ShapeError
from ..explore import ChannelMask

BN_EPS = 1e-5
BN_MODES = ("standardize", "scale_only")


class SimNetwork:
    def __init__(self, widths, params, masks=None, bn_mode="standardize"):
        if bn_mode not in BN_MODES:
            raise InvalidArgumentError(f"unknown bn_mode {bn_mode!r}")
        self.widths = [int(c) for c in widths]
        if len(self.widths) < 3:
            raise InvalidArgumentError("need at least input, one hidden layer and classes")
        self.params = params
        self.bn_mode = bn_mode
        if masks is None:
            masks = [ChannelMask(l, c) for l, c in enumerate(self.hidden_widths)]
        self.masks = masks
        self._check_shapes()

    @classmethod
    def initialize(cls, widths, rng: np.random.Generator, bn_mode="standardize") -> "SimNetwork":
        """He-normal weights, gamma = 1, beta = 0."""
        widths = [int(c) for c in widths]
        params = {}
        for l in range(len(widths) - 2):
            k, c = widths[l], widths[l + 1]
            params[f"w{l}"] = rng.normal(0.0, math.sqrt(2.0 / k), size=(k, c))
            params[f"gamma{l}"] = np.ones(c)
            params[f"beta{l}"] = np.zeros(c)
        params["head_w"] = rng.normal(0.0, math.sqrt(1.0 / widths[-2]), size=(widths[-2], widths[-1]))
        params["head_b"] = np.zeros(widths[-1])
        return cls(widths, params, bn_mode=bn_mode)

    def _check_shapes(self):
        for l in range(self.n_layers):
            k, c = self.widths[l], self.widths[l + 1]
            if self.params[f"w{l}"].shape != (k, c):
                raise ShapeError(f"w{l} has shape {self.params[f'w{l}'].shape}, expected {(k, c)}")
            for name in (f"gamma{l}", f"beta{l}"):
                if self.params[name].shape != (c,):
                    raise ShapeError(f"{name} has shape {self.params[name].shape}, expected {(c,)}")
        if self.params["head_w"].shape != (self.widths[-2], self.widths[-1]):
            raise ShapeError("head_w shape does not match widths")
        if self.params["head_b"].shape != (self.widths[-1],):
            raise ShapeError("head_b shape does not match widths")
        if len(self.masks) != self.n_layers:
            raise ShapeError("one mask per hidden layer is required")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 2

    @property
    def hidden_widths(self) -> list[int]:
        return self.widths[1:-1]

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    def next_weight_name(self, layer: int) -> str:
        """Name of the matrix whose rows are the inputs fed by ``layer``'s channels."""
        return "head_w" if layer == self.n_layers - 1 else f"w{layer + 1}"

    def input_mask(self, layer: int) -> np.ndarray:
        if layer == 0:
            return np.ones(self.widths[0], dtype=bool)
        return self.masks[layer - 1].as_bool()

    def param_masks(self) -> dict[str, np.ndarray]:
        """Boolean mask per parameter: True where the coordinate is live."""
        out = {}
        for l in range(self.n_layers):
            om = self.masks[l].as_bool()
            out[f"w{l}"] = np.outer(self.input_mask(l), om)
            out[f"gamma{l}"] = om
            out[f"beta{l}"] = om
        out["head_w"] = np.outer(self.masks[-1].as_bool(), np.ones(self.n_classes, dtype=bool))
        out["head_b"] = np.ones(self.n_classes, dtype=bool)
        return out

    def copy(self) -> "SimNetwork":
        return SimNetwork(
            list(self.widths),
            {k: v.copy() for k, v in self.params.items()},
            [m.copy() for m in self.masks],
            self.bn_mode,
        )


@dataclass
class ForwardTrace:
    logits: np.ndarray
    activations: list  # a^0 (input), a^1, ..., a^L
    pre_bn: list = field(default_factory=list)  # z per layer
    xhat: list = field(default_factory=list)
    y: list = field(default_factory=list)
    sigma: list = field(default_factory=list)  # sqrt(var + eps) per layer, standardize only


def _as_batch(net: SimNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.widths[0]:
        raise ShapeError(f"batch must have shape (n, {net.widths[0]}), got {x.shape}")
    if net.bn_mode == "standardize" and x.shape[0] < 2:
        raise InvalidInputError("batch standardization needs at least 2 samples")
    return x


def forward(net: SimNetwork, x, stats=None) -> ForwardTrace:
    """Forward pass; ``stats`` optionally supplies per-layer (mean, var) to use
    instead of the batch statistics."""
    a = _as_batch(net, x)
    p = net.params
    pm = net.param_masks()
    trace = ForwardTrace(logits=None, activations=[a])
    for l in range(net.n_layers):
        om = pm[f"gamma{l}"]
        z = a @ (p[f"w{l}"] * pm[f"w{l}"])
        if net.bn_mode == "standardize":
            if stats is None:
                mu, var = z.mean(axis=0), z.var(axis=0)
            else:
                mu, var = stats[l]
            sigma = np.sqrt(var + BN_EPS)
            xhat = (z - mu) / sigma
            trace.sigma.append(sigma)
        else:
            xhat = z
        y = (p[f"gamma{l}"] * xhat + p[f"beta{l}"]) * om
        a = np.maximum(y, 0.0)
        trace.pre_bn.append(z)
        trace.xhat.append(xhat)
        trace.y.append(y)
        trace.activations.append(a)
    trace.logits = a @ (p["head_w"] * pm["head_w"]) + p["head_b"]
    return trace


def batch_statistics(net: SimNetwork, x) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer (mean, var) of the pre-normalization values over ``x``."""
    trace = forward(net, x)
    return [(z.mean(axis=0), z.var(axis=0)) for z in trace.pre_bn]


def _targets(labels, n_classes, label_smoothing):
    y = np.asarray(labels, dtype=np.int64)
    t = np.full((y.size, n_classes), label_smoothing / n_classes)
    t[np.arange(y.size), y] += 1.0 - label_smoothing
    return t


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(net: SimNetwork, x, labels, label_smoothing: float = 0.0) -> float:
    """Mean cross-entropy."""
    logits = forward(net, x).logits
    t = _targets(labels, net.n_classes, label_smoothing)
    return float(-(t * _log_softmax(logits)).sum(axis=1).mean())


def backward(net: SimNetwork, x, labels, label_smoothing: float = 0.0):
    """Mean cross-entropy and its exact gradient for every parameter.

    The forward pass uses ``w * m``, so gradients at masked coordinates are
    exactly zero.
    """
    x = _as_batch(net, x)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"labels must have shape ({x.shape[0]},), got {labels.shape}")
    p = net.params
    pm = net.param_masks()
    tr = forward(net, x)
    n = x.shape[0]
    t = _targets(labels, net.n_classes, label_smoothing)
    logp = _log_softmax(tr.logits)
    value = float(-(t * logp).sum(axis=1).mean())

    grads = {}
    dlogits = (np.exp(logp) - t) / n
    a_top = tr.activations[-1]
    grads["head_w"] = (a_top.T @ dlogits) * pm["head_w"]
    grads["head_b"] = dlogits.sum(axis=0)
    da = dlogits @ (p["head_w"] * pm["head_w"]).T
    for l in reversed(range(net.n_layers)):
        om = pm[f"gamma{l}"]
        dy = da * (tr.y[l] > 0.0) * om
        xhat = tr.xhat[l]
        grads[f"gamma{l}"] = (dy * xhat).sum(axis=0)
        grads[f"beta{l}"] = dy.sum(axis=0)
        dxhat = dy * p[f"gamma{l}"]
        if net.bn_mode == "standardize":
            dz = (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)) / tr.sigma[l]
        else:
            dz = dxhat
        wm = pm[f"w{l}"]
        grads[f"w{l}"] = (tr.activations[l].T @ dz) * wm
        da = dz @ (p[f"w{l}"] * wm).T
    return value, grads


def predict(net: SimNetwork, x, stats=None) -> np.ndarray:
    return np.argmax(forward(net, x, stats).logits, axis=1)


# --------------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0.0:
            raise InvalidArgumentError(f"learning rate must be positive, got {self.lr}")


def sgd_step_masked(state: OptimizerState, net: SimNetwork, grads: dict) -> SimNetwork:
    """Momentum SGD on live coordinates only; masked coordinates are left untouched."""
    pm = net.param_masks()
    for name, param in net.params.items():
        g = grads[name]
        if g.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {param.shape}")
        m = pm[name]
        if state.weight_decay:
            g = g + state.weight_decay * param
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        v = np.where(m, v, 0.0)
        state.velocity[name] = v
        param -= state.lr * v
    return net


# --------------------------------------------------------------------------- FLOPs


@dataclass
class FlopsReport:
    per_layer: list  # multiply-adds per hidden layer
    head: int
    total: int
    dense_total: int

    @property
    def reduction_vs_dense(self) -> float:
        return 1.0 - self.total / self.dense_total


def count_flops(net: SimNetwork) -> FlopsReport:
    """Multiply-adds per example, one operation per multiply-add pair."""
    retained = [int(m.retained.size) for m in net.masks]
    ins = [net.widths[0]] + retained[:-1]
    per_layer = [i * o for i, o in zip(ins, retained)]
    head = retained[-1] * net.n_classes
    w = net.widths
    dense = sum(w[i] * w[i + 1] for i in range(len(w) - 1))
    return FlopsReport(per_layer=per_layer, head=head, total=sum(per_layer) + head, dense_total=dense)

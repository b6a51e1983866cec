"""Small feedforward feature networks with hand-written backpropagation and AdamW.

Hidden layers use Swish, the output layer is linear. Dropout is inverted
(masks are rescaled during training) so evaluation needs no correction.
"""

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import InvalidInput, NumericalFailure

_version_counter = itertools.count()


def swish(x):
    return x * expit(x)


def swish_grad(x):
    s = expit(x)
    return s + x * s * (1.0 - s)


class FeatureNet:
    """Multilayer perceptron mapping ``widths[0]`` inputs to ``widths[-1]`` features."""

    activation = "swish"

    def __init__(self, widths, weights, biases, dropout=0.0):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise InvalidInput(f"bad layer widths {widths}")
        if not 0.0 <= dropout < 1.0:
            raise InvalidInput("dropout rate must lie in [0, 1)")
        if len(weights) != len(widths) - 1 or len(biases) != len(weights):
            raise InvalidInput("one weight matrix and bias vector per layer expected")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise InvalidInput(f"layer {i} has shapes {w.shape}, {b.shape}")
        self.widths = widths
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self.dropout = float(dropout)
        self._touch()

    @classmethod
    def init(cls, widths, rng, dropout=0.0):
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(widths, weights, biases, dropout)

    def _touch(self):
        self.version = next(_version_counter)

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    @property
    def n_layers(self):
        return len(self.weights)

    def params(self):
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params):
        params = list(params)
        for i in range(self.n_layers):
            self.weights[i] = np.array(params[2 * i], dtype=float)
            self.biases[i] = np.array(params[2 * i + 1], dtype=float)
        self._touch()

    def copy(self):
        return FeatureNet(self.widths, self.weights, self.biases, self.dropout)

    def __call__(self, inputs):
        return forward(self, inputs)[0]

    def to_dict(self):
        return {
            "widths": self.widths,
            "activation": self.activation,
            "dropout": self.dropout,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("activation", "swish") != "swish":
            raise InvalidInput(f"unsupported activation {doc['activation']!r}")
        weights = [np.array(w, dtype=float).reshape(a, b)
                   for w, a, b in zip(doc["weights"], doc["widths"][:-1], doc["widths"][1:])]
        biases = [np.array(b, dtype=float) for b in doc["biases"]]
        return cls(doc["widths"], weights, biases, doc.get("dropout", 0.0))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class Tape:
    net_id: int
    version: int
    inputs: np.ndarray
    pre: list  # pre-activations of hidden layers
    post: list  # layer inputs (after activation and dropout)
    masks: list  # scaled dropout masks, None when inactive


def forward(net, inputs, mode="eval", rng=None):
    """Evaluate ``net``; returns ``(features, tape)``."""
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if net.in_dim == 1 else x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise InvalidInput(f"expected inputs with {net.in_dim} columns, got shape {x.shape}")
    if mode not in ("train", "eval"):
        raise InvalidInput(f"unknown mode {mode!r}")
    drop = mode == "train" and net.dropout > 0
    if drop and rng is None:
        raise InvalidInput("train-mode dropout needs an rng")
    keep = 1.0 - net.dropout
    pre, post, masks = [], [x], []
    h = x
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ w + b
        if i == last:
            h = a
            break
        pre.append(a)
        h = swish(a)
        if drop:
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
        post.append(h)
    return h, Tape(id(net), net.version, x, pre, post, masks)


def backward(net, tape, grad_out):
    """Gradients of a scalar loss w.r.t. parameters, ordered like ``net.params()``."""
    if tape.net_id != id(net) or tape.version != net.version:
        raise InvalidInput("tape does not belong to the current state of this network")
    g = np.asarray(grad_out, dtype=float)
    grads = [None] * (2 * net.n_layers)
    for i in range(net.n_layers - 1, -1, -1):
        layer_in = tape.post[i]
        grads[2 * i] = layer_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i == 0:
            break
        g = g @ net.weights[i].T
        if tape.masks[i - 1] is not None:
            g = g * tape.masks[i - 1]
        g = g * swish_grad(tape.pre[i - 1])
    return grads


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adamw_step(net, grads, state):
    """One AdamW update with bias correction and decoupled weight decay (in place)."""
    params = net.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise InvalidInput("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericalFailure("non-finite gradient; step aborted")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new = []
    for k, (p, g) in enumerate(zip(params, grads)):
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        p = p * (1.0 - state.lr * state.weight_decay)
        p = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new.append(p)
    state.step = t
    net.set_params(new)
    return net, state

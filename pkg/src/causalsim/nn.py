"""Small dense-network engine: MLP forward/backward, Adam and the training losses.

Everything is plain numpy. Networks are fixed-topology ReLU MLPs; gradients are
computed analytically, including the gradient with respect to the input batch so
that losses can be chained through several networks.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

LOSS_KINDS = ("mse", "l1", "huber", "ce")


class DenseNet:
    """ReLU multilayer perceptron with identity or softmax output."""

    def __init__(self, layer_dims, output_activation="identity", seed=0, weights=None):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValueError(f"invalid layer_dims {layer_dims}")
        if output_activation not in ("identity", "softmax"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.layer_dims = layer_dims
        self.output_activation = output_activation
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = []
            for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
                weights.append(np.zeros(fan_out))
        self.params = [np.array(w, dtype=np.float64) for w in weights]
        for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            if self.params[2 * i].shape != (fan_in, fan_out) or self.params[2 * i + 1].shape != (fan_out,):
                raise ValueError(f"weight shapes do not match layer_dims at layer {i}")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def copy(self):
        return DenseNet(self.layer_dims, self.output_activation, weights=[p.copy() for p in self.params])

    def forward(self, x, keep_cache=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected batch of shape (n, {self.in_dim}), got {x.shape}")
        inputs = []
        h = x
        for i in range(self.n_layers):
            inputs.append(h)
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            h = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
        if self.output_activation == "softmax":
            h = softmax(h)
        if keep_cache:
            return h, (inputs, h)
        return h

    __call__ = forward

    def backward(self, cache, grad_out):
        """Return (parameter gradients, input gradient) for upstream ``grad_out``."""
        inputs, out = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != out.shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output shape {out.shape}")
        if self.output_activation == "softmax":
            g = out * (g - np.sum(g * out, axis=1, keepdims=True))
        grads = [None] * len(self.params)
        for i in reversed(range(self.n_layers)):
            h_in = inputs[i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
            if i > 0:
                # h_in is the ReLU output of the previous layer; its mask equals the
                # pre-activation mask.
                g = g * (h_in > 0.0)
        return grads, g

    def to_dict(self):
        return {
            "layer_dims": self.layer_dims,
            "output_activation": self.output_activation,
            "params": [encode_array(p) for p in self.params],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["layer_dims"], d["output_activation"], weights=[decode_array(p) for p in d["params"]])


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(kind, pred, target, delta=1.0):
    """Mean-over-batch loss and its gradient with respect to ``pred``.

    Regression losses sum over output columns and average over rows. For ``"ce"``
    ``pred`` holds logits and ``target`` integer class indices.
    """
    pred = np.asarray(pred, dtype=np.float64)
    n = pred.shape[0]
    if kind == "ce":
        target = np.asarray(target)
        if target.shape != (n,):
            raise ValueError("cross-entropy targets must be a vector of class indices")
        if not np.issubdtype(target.dtype, np.integer):
            if not np.all(np.equal(np.mod(target, 1), 0)):
                raise ValueError("cross-entropy targets must be integers")
            target = target.astype(np.int64)
        k = pred.shape[1]
        if target.size and (target.min() < 0 or target.max() >= k):
            raise ValueError(f"class index out of range for {k} classes")
        logp = log_softmax(pred)
        value = -logp[np.arange(n), target].mean()
        grad = np.exp(logp)
        grad[np.arange(n), target] -= 1.0
        return value, grad / n
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}")
    r = pred - target
    if kind == "mse":
        return np.sum(r * r) / n, 2.0 * r / n
    if kind == "l1":
        return np.sum(np.abs(r)) / n, np.sign(r) / n
    if kind == "huber":
        a = np.abs(r)
        quad = a <= delta
        value = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
        grad = np.where(quad, r, delta * np.sign(r))
        return np.sum(value) / n, grad / n
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass
class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(grads) != len(params):
            raise ValueError("params and grads differ in length")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def encode_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "b64": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d):
    raw = base64.b64decode(d["b64"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()

"""A small reverse-mode engine for tanh/identity dense networks, plus Adam.

Everything is float64. Inputs are batched row-wise: a batch of ``B`` vectors is
a ``B x in`` matrix, and gradients are summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "identity")


@dataclass
class DenseLayer:
    weights: np.ndarray  # out x in
    bias: np.ndarray  # out
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]


@dataclass
class ForwardCache:
    """Activations kept by :meth:`Mlp.forward` for the reverse pass."""

    inputs: list  # input to each layer
    outputs: list  # post-activation output of each layer
    owner: int  # id of the parameter snapshot that produced the cache
    squeeze: bool = False


class Mlp:
    """An ordered chain of dense layers."""

    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer shapes do not chain: {a.n_out} -> {b.n_in}")
        self._version = 0

    @classmethod
    def init(cls, sizes, activations, rng):
        """Glorot-uniform weights, zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_out, n_in))
            layers.append(DenseLayer(w, np.zeros(n_out), act))
        return cls(layers)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    @property
    def sizes(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def activations(self):
        return [layer.activation for layer in self.layers]

    def params(self):
        """Parameter arrays in canonical order (W0, b0, W1, b1, ...), by reference."""
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out

    def set_params(self, arrays):
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.layers):
            raise ValueError("wrong number of parameter arrays")
        for i, layer in enumerate(self.layers):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                raise ValueError("parameter shapes do not match the network")
            layer.weights = np.array(w, dtype=np.float64)
            layer.bias = np.array(b, dtype=np.float64)
        self.touch()

    def touch(self):
        """Invalidate forward caches after an in-place parameter change."""
        self._version += 1

    def copy(self):
        return Mlp(
            DenseLayer(layer.weights.copy(), layer.bias.copy(), layer.activation)
            for layer in self.layers
        )

    def n_params(self):
        return sum(p.size for p in self.params())

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ValueError(f"input has dimension {x.shape[1]}, network expects {self.n_in}")
        inputs, outputs = [], []
        h = x
        for layer in self.layers:
            inputs.append(h)
            a = h @ layer.weights.T + layer.bias
            if layer.activation == "tanh":
                a = np.tanh(a)
            outputs.append(a)
            h = a
        cache = ForwardCache(inputs, outputs, self._version, squeeze)
        return (h[0] if squeeze else h), cache

    def backward(self, cache, dy, param_grads=True):
        """Reverse pass.

        Returns ``(grads, dx)`` where ``grads`` mirrors :meth:`params` (or is
        ``None`` when ``param_grads`` is false) and ``dx`` is the cotangent of
        the network input.
        """
        if cache.owner != self._version or len(cache.inputs) != len(self.layers):
            raise ValueError("forward cache is stale or belongs to another network")
        dy = np.asarray(dy, dtype=np.float64)
        if cache.squeeze:
            dy = dy[None, :]
        if dy.shape != cache.outputs[-1].shape:
            raise ValueError(f"cotangent shape {dy.shape} does not match output {cache.outputs[-1].shape}")
        grads = [None] * (2 * len(self.layers)) if param_grads else None
        g = dy
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "tanh":
                g = g * (1.0 - cache.outputs[i] ** 2)
            if param_grads:
                grads[2 * i] = g.T @ cache.inputs[i]
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ layer.weights
        dx = g[0] if cache.squeeze else g
        return grads, dx


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """In-place descent step ``p -= lr * m_hat / (sqrt(v_hat) + eps)``.

    Pass negated gradients for ascent. Returns ``(params, state)``.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def grad_check(objective, params, grads, step=1e-4):
    """Max relative error between ``grads`` and central differences of ``objective``.

    ``objective()`` is re-evaluated after in-place perturbation of each entry
    of ``params``; entries are restored afterwards.
    """
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = objective()
            flat[i] = old - step
            down = objective()
            flat[i] = old
            numeric = (up - down) / (2 * step)
            denom = max(abs(gflat[i]), abs(numeric), 1e-12)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst

"""Small MLPs on the tape, plus Adam."""
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch

log = logging.getLogger(__name__)


class Linear:
    def __init__(self, in_dim, out_dim):
        self.weight = np.zeros((in_dim, out_dim))
        self.bias = np.zeros(out_dim)

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]


class MLP:
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims):
        if len(dims) < 2:
            raise ValueError("an MLP needs at least an input and an output dim")
        self.layers = [Linear(a, b) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def named_parameters(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.weight"] = layer.weight
            out[f"{prefix}{i}.bias"] = layer.bias
        return out


def init(mlp, seed):
    """Fan-in uniform weights in +-sqrt(1/in_dim), zero biases. In place."""
    rng = np.random.default_rng(seed)
    for layer in mlp.layers:
        bound = np.sqrt(1.0 / layer.in_dim)
        layer.weight[...] = rng.uniform(-bound, bound, size=layer.weight.shape)
        layer.bias[...] = 0.0


def mlp_forward(mlp, x, tape):
    if x.value.shape[-1] != mlp.in_dim:
        raise ShapeMismatch(f"MLP expects last axis {mlp.in_dim}, got {x.value.shape}")
    h = x
    last = len(mlp.layers) - 1
    for i, layer in enumerate(mlp.layers):
        h = tape.matmul(h, tape.variable(layer.weight)) + tape.variable(layer.bias)
        if i < last:
            h = tape.relu(h)
    return h


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, clip_norm=None):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` and ``grads`` are dicts keyed by parameter name. Returns False
    (and leaves everything untouched) when any gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; Adam step skipped", name)
            return False
    if clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > clip_norm:
            grads = {k: g * (clip_norm / total) for k, g in grads.items()}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True

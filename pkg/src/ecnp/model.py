"""Encoder / mean-aggregator / decoder for the CNP and evidential CNP heads.

Every context point is embedded by the encoder and the embeddings of one
task are averaged into a single representation ``r``. Each target input is
decoded from ``[r, x_t]``; the head maps the decoder features to either a
Gaussian (mu, sigma) or NIG (gamma, v, alpha, beta) per output channel.

A batch of tasks is run as one stacked forward pass: all context points go
through the encoder together, a constant averaging matrix reduces them per
task, and ``take_rows`` hands each target its task's representation.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import evidential
from .errors import EmptyContext, ShapeMismatch
from .nn import MLP, init, mlp_forward

GAUSSIAN = "gaussian"
EVIDENTIAL = "evidential"


@dataclass(frozen=True)
class ModelConfig:
    x_dim: int = 1
    y_dim: int = 1
    repr_dim: int = 128
    hidden: int = 128
    encoder_layers: int = 4
    decoder_layers: int = 3
    head: str = EVIDENTIAL
    evid_head_hidden: int = 64
    clamp_ev: float = 20.0
    ev_floor: float = 1e-8
    beta_offset: float = 0.2
    sigma_floor: float = 0.01

    def __post_init__(self):
        if self.head not in (GAUSSIAN, EVIDENTIAL):
            raise ValueError(f"unknown head {self.head!r}")
        for name in ("x_dim", "y_dim", "repr_dim", "hidden", "encoder_layers",
                     "decoder_layers", "evid_head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def n_outputs(self):
        return (4 if self.head == EVIDENTIAL else 2) * self.y_dim

    def to_dict(self):
        return asdict(self)


class ModelParams:
    """Encoder, decoder and head MLPs sized from a :class:`ModelConfig`."""

    def __init__(self, config):
        c = config
        self.config = c
        self.encoder = MLP([c.x_dim + c.y_dim] + [c.hidden] * (c.encoder_layers - 1) + [c.repr_dim])
        self.decoder = MLP([c.repr_dim + c.x_dim] + [c.hidden] * c.decoder_layers)
        if c.head == EVIDENTIAL:
            self.head = MLP([c.hidden, c.evid_head_hidden, c.n_outputs])
        else:
            self.head = MLP([c.hidden, c.n_outputs])

    def named_parameters(self):
        out = {}
        out.update(self.encoder.named_parameters("encoder."))
        out.update(self.decoder.named_parameters("decoder."))
        out.update(self.head.named_parameters("head."))
        return out


def build_model(config, seed=0):
    params = ModelParams(config)
    seeds = np.random.SeedSequence(seed).generate_state(3)
    init(params.encoder, seeds[0])
    init(params.decoder, seeds[1])
    init(params.head, seeds[2])
    return params


@dataclass
class Prediction:
    """Per-target predictive parameters, stacked over the tasks of a batch.

    Fields are tape nodes of shape (n_targets, y_dim). ``segments`` gives the
    row range of each task.
    """
    head: str
    mean: object
    segments: list
    sigma: object = None
    v: object = None
    alpha: object = None
    beta: object = None

    def nig(self, rows=slice(None)):
        return evidential.NIGParams(self.mean.value[rows], self.v.value[rows],
                                    self.alpha.value[rows], self.beta.value[rows])

    def mean_values(self, rows=slice(None)):
        return self.mean.value[rows]

    def variance(self, rows=slice(None)):
        """Total predictive variance (AL + EP for the evidential head)."""
        if self.head == GAUSSIAN:
            return self.sigma.value[rows] ** 2
        u = evidential.decompose(self.nig(rows))
        return u.aleatoric + u.epistemic

    def std(self, rows=slice(None)):
        return np.sqrt(self.variance(rows))

    def log_density(self, y, rows=slice(None)):
        if self.head == GAUSSIAN:
            s = self.sigma.value[rows]
            return -0.5 * np.log(2 * np.pi * s * s) - 0.5 * ((y - self.mean.value[rows]) / s) ** 2
        return evidential.student_t_log_density(evidential.predictive(self.nig(rows)), y)


def _check_context(X_c, Y_c, config):
    if X_c.shape[0] < 1:
        raise EmptyContext("context set is empty")
    if X_c.ndim != 2 or X_c.shape[1] != config.x_dim:
        raise ShapeMismatch(f"X_c must be N x {config.x_dim}, got {X_c.shape}")
    if Y_c.shape != (X_c.shape[0], config.y_dim):
        raise ShapeMismatch(f"Y_c must be {X_c.shape[0]} x {config.y_dim}, got {Y_c.shape}")


def encode_contexts(params, contexts, tape):
    """Mean-aggregated representation per context set, shape (B, repr_dim)."""
    config = params.config
    for X_c, Y_c in contexts:
        _check_context(X_c, Y_c, config)
    counts = [len(X_c) for X_c, _ in contexts]
    xy = np.concatenate([np.concatenate([X_c, Y_c], axis=1) for X_c, Y_c in contexts])
    h = mlp_forward(params.encoder, tape.constant(xy), tape)
    if len(contexts) == 1:
        return tape.mean(h, axis=0, keepdims=True)
    avg = np.zeros((len(counts), xy.shape[0]))
    start = 0
    for i, n in enumerate(counts):
        avg[i, start:start + n] = 1.0 / n
        start += n
    return tape.matmul(tape.constant(avg), h)


def encode_aggregate(params, X_c, Y_c, tape):
    """Representation r of one context set, shape (repr_dim,)."""
    r = encode_contexts(params, [(np.asarray(X_c, float), np.asarray(Y_c, float))], tape)
    return tape.sum(r, axis=0)


def decode(params, r, x_t, tape, rows=None):
    """Raw head outputs for targets ``x_t`` given representation(s) ``r``.

    ``r`` is either one representation (repr_dim,) shared by all targets or
    a stacked (B, repr_dim) node with ``rows`` naming each target's task.
    """
    config = params.config
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 2 or x_t.shape[1] != config.x_dim:
        raise ShapeMismatch(f"x_t must be N x {config.x_dim}, got {x_t.shape}")
    if rows is None:
        if r.value.ndim == 1:
            r = tape.mul(r, tape.constant(np.ones((1, 1))))
        rows = np.zeros(len(x_t), dtype=np.intp)
    rep = tape.take_rows(r, rows)
    h = mlp_forward(params.decoder, tape.concat([rep, tape.constant(x_t)]), tape)
    return mlp_forward(params.head, tape.relu(h), tape)


def to_nig(raw, config, tape):
    """Split raw outputs into (gamma, v, alpha, beta) nodes with head clamps."""
    d = config.y_dim
    gamma = tape.slice_last(raw, 0, d)
    # the floor keeps v > 0 and alpha > 1 where softplus underflows to 0
    v = tape.clamp_max(tape.softplus(tape.slice_last(raw, d, 2 * d)) + config.ev_floor,
                       config.clamp_ev)
    alpha = 1.0 + tape.clamp_max(tape.softplus(tape.slice_last(raw, 2 * d, 3 * d)) + config.ev_floor,
                                 config.clamp_ev)
    beta = tape.softplus(tape.slice_last(raw, 3 * d, 4 * d)) + config.beta_offset
    return gamma, v, alpha, beta


def to_gaussian(raw, config, tape):
    d = config.y_dim
    mu = tape.slice_last(raw, 0, d)
    sigma = config.sigma_floor + tape.softplus(tape.slice_last(raw, d, 2 * d))
    return mu, sigma


def forward_batch(params, tasks, tape, targets=None):
    """Predictions for every target of every task in one stacked pass.

    ``targets`` optionally replaces each task's ``X_t`` (a list of arrays).
    """
    config = params.config
    r = encode_contexts(params, [(t.X_c, t.Y_c) for t in tasks], tape)
    xs = [t.X_t for t in tasks] if targets is None else [np.asarray(x, float) for x in targets]
    segments = []
    start = 0
    for x in xs:
        segments.append((start, start + len(x)))
        start += len(x)
    rows = np.repeat(np.arange(len(xs)), [len(x) for x in xs])
    raw = decode(params, r, np.concatenate(xs), tape, rows=rows)
    if config.head == EVIDENTIAL:
        gamma, v, alpha, beta = to_nig(raw, config, tape)
        return Prediction(EVIDENTIAL, gamma, segments, v=v, alpha=alpha, beta=beta)
    mu, sigma = to_gaussian(raw, config, tape)
    return Prediction(GAUSSIAN, mu, segments, sigma=sigma)


def forward(params, task, tape, targets=None):
    return forward_batch(params, [task], tape, None if targets is None else [targets])

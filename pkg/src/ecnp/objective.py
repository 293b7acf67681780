"""Training losses for the evidential and Gaussian heads.

The per-target evidential loss is

    nll + lambda1 * |y - gamma| * (v + alpha + 1/beta) + lambda2 * v * D(x_t, C)

where D is the Euclidean distance from the target input to the nearest
context input. Per-task losses are sums over targets and channels; a batch
loss is the mean over tasks.
"""
from dataclasses import dataclass

import numpy as np

from . import evidential
from .errors import EmptyContext
from .model import EVIDENTIAL
from .tape import Tape

_HALF_LOG_PI = 0.5 * np.log(np.pi)
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    normalize_targets: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be non-negative")


@dataclass
class LossBreakdown:
    """Loss terms as tape nodes; ``total`` is the one to differentiate."""
    nll: object
    evid_reg: object
    kernel_reg: object
    total: object

    def values(self):
        return {k: float(getattr(self, k).value) for k in ("nll", "evid_reg", "kernel_reg", "total")}


# -- per-element terms on the tape --------------------------------------------

def nll_terms(tape, gamma, v, alpha, beta, y):
    two_b_lam = 2.0 * beta * (1.0 + v)
    return (tape.lgamma(alpha) - tape.lgamma(alpha + 0.5)
            + _HALF_LOG_PI - 0.5 * tape.log(v)
            - alpha * tape.log(two_b_lam)
            + (alpha + 0.5) * tape.log(tape.square(y - gamma) * v + two_b_lam))


def evid_reg_terms(tape, gamma, v, alpha, beta, y):
    return tape.abs(y - gamma) * (v + alpha + 1.0 / beta)


def kernel_reg_terms(tape, v, dist):
    return v * dist


def gaussian_nll_terms(tape, mu, sigma, y):
    return _HALF_LOG_2PI + tape.log(sigma) + 0.5 * tape.square((y - mu) / sigma)


# -- scalar/array conveniences ---------------------------------------------------

def _consts(tape, *xs):
    return [tape.constant(x) for x in xs]


def evid_nll(p, y):
    """Negative log of the Student-t predictive density at ``y``."""
    tape = Tape()
    return nll_terms(tape, *_consts(tape, p.gamma, p.v, p.alpha, p.beta, y)).value


def evid_reg(p, y):
    tape = Tape()
    return evid_reg_terms(tape, *_consts(tape, p.gamma, p.v, p.alpha, p.beta, y)).value


def min_context_distance(x_t, X_c):
    """Distance from each row of ``x_t`` to its nearest row of ``X_c``."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    X_c = np.atleast_2d(np.asarray(X_c, dtype=np.float64))
    if X_c.shape[0] == 0:
        raise EmptyContext("kernel distance needs a non-empty context")
    diff = x_t[:, None, :] - X_c[None, :, :]
    return np.sqrt(np.min(np.sum(diff * diff, axis=-1), axis=1))


def kernel_reg(p, x_t, X_c):
    x = np.asarray(x_t, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    X = np.asarray(X_c, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None] if x.shape[-1] == 1 else X[None, :]
    d = min_context_distance(x.reshape(-1, X.shape[1]), X)
    if np.ndim(p.v) == 0 and d.size == 1:
        d = d[0]
    return p.v * d


def gaussian_nll(mu, sigma, y):
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    return _HALF_LOG_2PI + np.log(sigma) + 0.5 * ((np.asarray(y) - mu) / sigma) ** 2


# -- batch losses ---------------------------------------------------------------

def _target_weights(tasks, segments, normalize):
    n = segments[-1][1]
    w = np.empty((n, 1))
    for task, (a, b) in zip(tasks, segments):
        w[a:b] = 1.0 / (len(tasks) * ((b - a) if normalize else 1))
    return w


def ecnp_loss(pred, tasks, cfg, tape):
    """Mean over tasks of the per-task summed evidential loss."""
    if pred.head != EVIDENTIAL:
        raise ValueError("ecnp_loss needs evidential predictions")
    y = tape.constant(np.concatenate([t.Y_t for t in tasks]))
    w = tape.constant(_target_weights(tasks, pred.segments, cfg.normalize_targets))
    dist = np.concatenate([min_context_distance(t.X_t, t.X_c) for t in tasks])[:, None]
    g, v, a, b = pred.mean, pred.v, pred.alpha, pred.beta
    nll = tape.sum(w * nll_terms(tape, g, v, a, b, y))
    reg = tape.sum(w * evid_reg_terms(tape, g, v, a, b, y))
    ker = tape.sum(w * kernel_reg_terms(tape, v, tape.constant(dist)))
    total = nll + tape.scale(reg, cfg.lambda1) + tape.scale(ker, cfg.lambda2)
    return LossBreakdown(nll, reg, ker, total)


def cnp_loss(pred, tasks, tape, normalize_targets=False):
    """Mean over tasks of the per-task summed Gaussian NLL."""
    y = tape.constant(np.concatenate([t.Y_t for t in tasks]))
    w = tape.constant(_target_weights(tasks, pred.segments, normalize_targets))
    nll = tape.sum(w * gaussian_nll_terms(tape, pred.mean, pred.sigma, y))
    zero = tape.constant(0.0)
    return LossBreakdown(nll, zero, zero, nll + zero)


# -- analysis ----------------------------------------------------------------------

def gradient_weight_empirical(p, y):
    """Per-residual weight read off the autodiff gradient of the evidential NLL.

    Divides -d(nll)/d(gamma) by (y - gamma) / s^2, with s^2 the Student-t
    squared scale. Where y == gamma the ratio is 0/0 and the closed form is
    returned instead.
    """
    gamma = np.asarray(p.gamma, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tape = Tape()
    g = tape.variable(gamma)
    v, a, b, yy = _consts(tape, p.v, p.alpha, p.beta, y)
    loss = tape.sum(nll_terms(tape, g, v, a, b, yy))
    (dgamma,) = tape.grad(loss, [gamma])
    s2 = evidential.predictive(p).scale_sq
    resid = y - gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        w = -dgamma * s2 / resid
    closed = evidential.outlier_weight(p.alpha, resid ** 2 / s2)
    return np.where(resid == 0, closed, w)

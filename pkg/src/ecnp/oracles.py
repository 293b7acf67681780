"""Independent numerical checks for the closed forms and the autodiff.

These deliberately avoid the package's own special functions and density
code: quadrature and distributions come from scipy and the standard
library, derivatives from
central finite differences.
"""
import math

import numpy as np
from scipy import integrate, stats
from scipy.special import logsumexp

from . import evidential
from .model import ModelConfig, build_model, forward_batch
from .objective import (LossConfig, ecnp_loss, gaussian_nll_terms, gradient_weight_empirical,
                        nll_terms)
from .tape import Tape
from .tasks import GP, SINUSOID, RegressionStream

FD_STEP = 1e-5


def central_difference(f, x, h=FD_STEP):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# -- Student-t marginal by double quadrature -------------------------------------------

def marginal_density_quadrature(p, y):
    """p(y) = int int N(y | mu, s2) NIG(mu, s2 | p) dmu ds2 by adaptive quadrature.

    The variance is integrated in log space between inverse-gamma quantiles;
    the mean is integrated over a window of +-12 standard deviations of the
    integrand's own mu-profile.
    """
    g, v, a, b = (float(t) for t in (p.gamma, p.v, p.alpha, p.beta))
    ig = stats.invgamma(a, scale=b)
    lo, hi = np.log(ig.ppf(1e-15)), np.log(ig.isf(1e-15))
    centre = (y + v * g) / (1.0 + v)

    log_norm_ig = a * math.log(b) - math.lgamma(a)

    def integrand(mu, log_s2):
        s2 = math.exp(log_s2)
        # N(y | mu, s2) N(mu | g, s2 / v) IG(s2 | a, b) * s2 (log-space Jacobian)
        quad = (y - mu) ** 2 + v * (mu - g) ** 2
        log_f = (-quad / (2.0 * s2) - math.log(2.0 * math.pi * s2) + 0.5 * math.log(v)
                 + log_norm_ig - a * log_s2 - b / s2)
        return math.exp(log_f)

    def width(log_s2):
        return 12.0 * np.sqrt(np.exp(log_s2) / (1.0 + v))

    val, _ = integrate.dblquad(integrand, lo, hi,
                               lambda s: centre - width(s), lambda s: centre + width(s),
                               epsabs=1e-9, epsrel=1e-8)
    return val


def check_student_t_marginal(n_cases=50, seed=0):
    """Largest |closed form - quadrature| over random parameter sets."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        p = evidential.NIGParams(rng.uniform(-2, 2), rng.uniform(0.2, 5.0),
                                 rng.uniform(1.2, 6.0), rng.uniform(0.2, 3.0))
        y = float(p.gamma + rng.uniform(-3, 3))
        closed = np.exp(evidential.student_t_log_density(evidential.predictive(p), y))
        worst = max(worst, abs(closed - marginal_density_quadrature(p, y)))
    return worst


# -- conjugate posterior on a grid --------------------------------------------------------

def nig_logpdf(mu, s2, p):
    """log NIG density via scipy's normal and inverse-gamma distributions."""
    return (stats.norm.logpdf(mu, p.gamma, np.sqrt(s2 / p.v))
            + stats.invgamma.logpdf(s2, p.alpha, scale=p.beta))


def grid_posterior_error(prior, y, n=200):
    """Max relative gap between the closed-form and grid posteriors.

    Both are evaluated on one n x n (mu, s2) grid and normalized over it in
    log space, so the comparison is insensitive to underflow in the tails.
    """
    y = np.asarray(y, float)
    post = evidential.nig_posterior_update(prior, y)
    ig = stats.invgamma(post.alpha, scale=post.beta)
    s2 = np.linspace(ig.ppf(1e-4), ig.ppf(1 - 1e-4), n)
    sd = np.sqrt(ig.mean() / post.v) if post.alpha > 1 else np.sqrt(post.beta / post.v)
    mu = np.linspace(post.gamma - 6 * sd, post.gamma + 6 * sd, n)
    M, S = np.meshgrid(mu, s2, indexing="ij")
    log_grid = nig_logpdf(M, S, prior)
    for yn in y:
        log_grid = log_grid + stats.norm.logpdf(yn, M, np.sqrt(S))
    log_closed = nig_logpdf(M, S, post)
    log_grid -= logsumexp(log_grid)
    log_closed -= logsumexp(log_closed)
    return float(np.max(np.abs(np.expm1(log_grid - log_closed))))


def check_conjugacy(n_cases=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        prior = evidential.NIGParams(rng.uniform(-2, 2), rng.uniform(0.2, 5.0),
                                     rng.uniform(1.2, 5.0), rng.uniform(0.2, 3.0))
        y = rng.normal(rng.uniform(-2, 2), rng.uniform(0.3, 2.0), size=rng.integers(1, 11))
        worst = max(worst, grid_posterior_error(prior, y))
    return worst


# -- full-loss gradient ---------------------------------------------------------------------

SMALL_MODEL = dict(repr_dim=8, hidden=8, evid_head_hidden=6)


KINK_MARGIN = 1e-3
_KINKS = {"relu": 0.0, "abs": 0.0}


def kink_distance(tape):
    """Smallest distance of any relu/abs/clamp argument on ``tape`` to its kink."""
    d = np.inf
    for node in tape.nodes:
        if node.op in _KINKS:
            d = min(d, float(np.min(np.abs(node.parents[0].value - _KINKS[node.op]))))
        elif node.op == "clamp_max":
            d = min(d, float(np.min(np.abs(node.parents[0].value - node.aux))))
    return d


def _gradient_instance(rng, seed, loss_cfg):
    params = build_model(ModelConfig(**SMALL_MODEL), seed=int(rng.integers(2**31)))
    # scale up the weights so the evidence heads are not all near their offsets
    for a in params.named_parameters().values():
        a *= rng.uniform(1.0, 2.0)
        if a.ndim == 1:
            a += rng.normal(0, 0.3, a.shape)
    gen = SINUSOID if seed % 2 == 0 else GP
    stream = RegressionStream(gen, int(rng.integers(3, 8)), int(rng.integers(2**31)))
    tasks = stream.batch(0, int(rng.integers(1, 4)))
    tape = Tape()
    ecnp_loss(forward_batch(params, tasks, tape), tasks, loss_cfg, tape)
    return params, tasks, kink_distance(tape)


def loss_gradient_error(seed, n_coords=24, loss_cfg=LossConfig(0.1, 0.1)):
    """Relative error of the ECNP loss gradient against finite differences.

    Uses a small evidential model and a random regression task batch. The
    comparison covers a random subset of parameter coordinates plus one
    random direction through all parameters. Instances with a relu, abs or
    clamp argument within ``KINK_MARGIN`` of its kink are redrawn, since a
    central difference straddling a kink measures no derivative at all.
    """
    rng = np.random.default_rng(seed)
    while True:
        params, tasks, margin = _gradient_instance(rng, seed, loss_cfg)
        if margin > KINK_MARGIN:
            break
    names = params.named_parameters()
    arrays = list(names.values())

    def loss_value():
        tape = Tape()
        return float(ecnp_loss(forward_batch(params, tasks, tape), tasks, loss_cfg, tape).total.value)

    tape = Tape()
    loss = ecnp_loss(forward_batch(params, tasks, tape), tasks, loss_cfg, tape)
    grads = tape.grad(loss.total, arrays)

    analytic, numeric = [], []
    sizes = np.array([a.size for a in arrays])
    for _ in range(n_coords):
        k = int(rng.choice(len(arrays), p=sizes / sizes.sum()))
        i = int(rng.integers(arrays[k].size))
        flat = arrays[k].reshape(-1)
        old = flat[i]
        flat[i] = old + FD_STEP
        fp = loss_value()
        flat[i] = old - FD_STEP
        fm = loss_value()
        flat[i] = old
        analytic.append(grads[k].reshape(-1)[i])
        numeric.append((fp - fm) / (2 * FD_STEP))
    coord_err = relative_error(analytic, numeric)

    direction = [rng.standard_normal(a.shape) for a in arrays]
    norm = np.sqrt(sum(np.sum(d * d) for d in direction))
    direction = [d / norm for d in direction]
    saved = [a.copy() for a in arrays]
    for a, d in zip(arrays, direction):
        a += FD_STEP * d
    fp = loss_value()
    for a, s, d in zip(arrays, saved, direction):
        a[...] = s - FD_STEP * d
    fm = loss_value()
    for a, s in zip(arrays, saved):
        a[...] = s
    dir_num = (fp - fm) / (2 * FD_STEP)
    dir_ana = sum(float(np.sum(g * d)) for g, d in zip(grads, direction))
    dir_err = abs(dir_num - dir_ana) / max(abs(dir_num), abs(dir_ana), 1e-12)
    return max(coord_err, dir_err)


def check_loss_gradients(n_cases=100, start_seed=0):
    return max(loss_gradient_error(s) for s in range(start_seed, start_seed + n_cases))


# -- outlier weight ---------------------------------------------------------------------------

def check_outlier_weight(n_cases=1000, seed=0):
    """Largest |autodiff weight - (2a + 1)/(2a + d^2)| over random cases."""
    rng = np.random.default_rng(seed)
    p = evidential.NIGParams(rng.uniform(-3, 3, n_cases), rng.uniform(0.05, 20, n_cases),
                             rng.uniform(1.01, 21, n_cases), rng.uniform(0.2, 5, n_cases))
    y = p.gamma + rng.normal(0, 1, n_cases) * rng.choice([0.1, 1.0, 10.0, 100.0], n_cases)
    s2 = evidential.predictive(p).scale_sq
    closed = evidential.outlier_weight(p.alpha, (y - p.gamma) ** 2 / s2)
    return float(np.max(np.abs(gradient_weight_empirical(p, y) - closed)))


# -- bounded versus linear residual gradients -----------------------------------------------

def residual_gradients(residuals=(1.0, 10.0, 100.0), v=1.0, alpha=2.0, beta=1.0, sigma=1.0):
    """|d nll / d location| for both heads at each residual (y = residual, location 0)."""
    r = np.asarray(residuals, dtype=np.float64)
    tape = Tape()
    zeros = np.zeros_like(r)
    g = tape.variable(zeros)
    v_, a_, b_ = (tape.constant(np.full_like(r, c)) for c in (v, alpha, beta))
    evid = tape.grad(tape.sum(nll_terms(tape, g, v_, a_, b_, tape.constant(r))), [zeros])[0]
    tape = Tape()
    mu0 = np.zeros_like(r)
    mu = tape.variable(mu0)
    gauss = tape.grad(tape.sum(gaussian_nll_terms(tape, mu, tape.constant(np.full_like(r, sigma)),
                                                  tape.constant(r))), [mu0])[0]
    return np.abs(evid), np.abs(gauss)


def check_residual_gradients():
    """True when the evidential gradient stays bounded and the Gaussian one is linear."""
    evid, gauss = residual_gradients()
    return bool(evid[2] <= 1.2 * evid[1] and gauss[2] == 10.0 * gauss[1])

"""Closed-form Normal-Inverse-Gamma (NIG) algebra.

Parameters follow the (gamma, v, alpha, beta) convention: ``gamma`` is the
prior mean, ``v`` the pseudo-count behind it, ``alpha`` and ``beta`` the
inverse-gamma shape and scale of the noise variance. Every function accepts
scalars or broadcastable numpy arrays.
"""
from dataclasses import dataclass

import numpy as np

from .errors import AlphaTooSmall, InvalidParams
from .special import lgamma


@dataclass(frozen=True)
class NIGParams:
    gamma: np.ndarray
    v: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def validate(self):
        for name in ("v", "alpha", "beta"):
            val = np.asarray(getattr(self, name))
            if not np.all(np.isfinite(val)) or np.any(val <= 0):
                raise InvalidParams(f"NIG parameter {name} must be finite and > 0")
        if not np.all(np.isfinite(self.gamma)):
            raise InvalidParams("NIG parameter gamma must be finite")
        return self


@dataclass(frozen=True)
class StudentT:
    loc: np.ndarray
    scale_sq: np.ndarray
    dof: np.ndarray

    @property
    def variance(self):
        """scale_sq * dof / (dof - 2); only defined for dof > 2."""
        return self.scale_sq * self.dof / (self.dof - 2.0)


@dataclass(frozen=True)
class UncertaintyReport:
    aleatoric: np.ndarray
    epistemic: np.ndarray
    evidence: np.ndarray


def predictive(p):
    """Student-t marginal of the Gaussian likelihood under the NIG prior."""
    p.validate()
    return StudentT(
        loc=p.gamma,
        scale_sq=p.beta * (1.0 + p.v) / (p.v * p.alpha),
        dof=2.0 * p.alpha,
    )


def student_t_log_density(st, y):
    nu = st.dof
    z = (np.asarray(y) - st.loc) ** 2 / (nu * st.scale_sq)
    return (lgamma(0.5 * (nu + 1.0)) - lgamma(0.5 * nu)
            - 0.5 * np.log(np.pi * nu * st.scale_sq)
            - 0.5 * (nu + 1.0) * np.log1p(z))


def decompose(p):
    """Aleatoric E[sigma^2], epistemic Var[mu] and the evidence score."""
    alpha = np.asarray(p.alpha)
    if np.any(alpha <= 1.0):
        raise AlphaTooSmall("aleatoric/epistemic split needs alpha > 1")
    aleatoric = p.beta / (p.alpha - 1.0)
    return UncertaintyReport(
        aleatoric=aleatoric,
        epistemic=aleatoric / p.v,
        evidence=p.v + p.alpha + 1.0 / p.beta,
    )


def nig_posterior_update(prior, y):
    """Conjugate update of an NIG prior after observing the samples ``y``."""
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if n < 1:
        raise ValueError("posterior update needs at least one observation")
    ybar = y.mean()
    v_n = prior.v + n
    return NIGParams(
        gamma=(prior.v * prior.gamma + n * ybar) / v_n,
        v=v_n,
        alpha=prior.alpha + 0.5 * n,
        beta=(prior.beta + 0.5 * np.sum((y - ybar) ** 2)
              + n * prior.v / (2.0 * v_n) * (ybar - prior.gamma) ** 2),
    )


def outlier_weight(alpha, delta_sq):
    """Weight (2a + 1) / (2a + d^2) the Student-t loss puts on a residual.

    ``delta_sq`` is the squared residual in units of the predictive scale.
    Equals 1 at ``delta_sq == 1`` and decays like 1/delta_sq for outliers.
    """
    return (2.0 * np.asarray(alpha) + 1.0) / (2.0 * np.asarray(alpha) + delta_sq)


def gaussian_limit_gap(alpha, beta, gamma=0.0, n_grid=501):
    """Sup-norm gap between the predictive and N(gamma, beta) with v = 1/alpha.

    The gap vanishes as alpha grows, which is how the Gaussian head arises
    as a limit of the evidential one.
    """
    if alpha <= 1.0:
        raise AlphaTooSmall("gaussian_limit_gap needs alpha > 1")
    st = predictive(NIGParams(gamma, 1.0 / alpha, alpha, beta))
    y = gamma + np.linspace(-6.0, 6.0, n_grid) * np.sqrt(beta)
    student = np.exp(student_t_log_density(st, y))
    gauss = np.exp(-0.5 * (y - gamma) ** 2 / beta) / np.sqrt(2.0 * np.pi * beta)
    return float(np.max(np.abs(student - gauss)))

# Normal-Inverse-Gamma algebra, worked by hand
#
# An evidential head predicts four numbers per target: gamma, v, alpha, beta.
# Everything else (predictive density, uncertainty split, outlier handling)
# follows from them in closed form. Run with `python3 demos/nig_algebra.py`.

import numpy as np
from scipy import integrate, stats

from ecnp import evidential as ev

# %% One prediction

p = ev.NIGParams(gamma=np.array(0.5), v=np.array(2.0), alpha=np.array(3.0), beta=np.array(1.5))
u = ev.decompose(p)
print("aleatoric E[sigma^2] =", float(u.aleatoric))   # beta / (alpha - 1) = 0.75
print("epistemic Var[mu]    =", float(u.epistemic))   # aleatoric / v      = 0.375
print("evidence             =", float(u.evidence))

# %% The marginal over (mu, sigma^2) is a Student-t

st = ev.predictive(p)
print("Student-t loc, scale^2, dof:", float(st.loc), float(st.scale_sq), float(st.dof))

# Its variance is exactly aleatoric + epistemic; scipy agrees.
ref = stats.t(df=st.dof, loc=st.loc, scale=np.sqrt(st.scale_sq)).var()
print("variance", float(st.variance), "scipy", ref, "AL+EP", float(u.aleatoric + u.epistemic))

# Integrating the variance out numerically recovers the same density at a
# point. Given sigma^2, mu is normal, so y is normal with variance
# sigma^2 (1 + 1/v); only the sigma^2 integral is left.
y = 1.7
a, b, g, v = float(p.alpha), float(p.beta), float(p.gamma), float(p.v)


def integrand(sigma2):
    return (stats.norm(g, np.sqrt(sigma2 * (1 + 1 / v))).pdf(y)
            * stats.invgamma(a=a, scale=b).pdf(sigma2))


numeric, _ = integrate.quad(integrand, 0, np.inf)
print("density at y=1.7: closed form", float(np.exp(ev.student_t_log_density(st, y))),
      "quadrature", numeric)

# %% Observing data sharpens the prior

post = ev.nig_posterior_update(p, np.array([0.9, 1.1, 1.0, 0.8]))
print("posterior v, alpha:", float(post.v), float(post.alpha),
      "epistemic", float(ev.decompose(post).epistemic))

# %% Large residuals get discounted

for delta_sq in (1.0, 10.0, 100.0, 1e4):
    print(f"residual^2 = {delta_sq:>7g}  weight = {float(ev.outlier_weight(3.0, delta_sq)):.4f}")

# %% A Gaussian is the large-alpha limit (with v = 1/alpha)

for alpha in (10.0, 100.0, 1000.0):
    print(f"alpha = {alpha:>6g}  sup |t - normal| = {ev.gaussian_limit_gap(alpha, 1.0):.2e}")

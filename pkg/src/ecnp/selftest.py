"""Fast self-checks: autodiff against finite differences, closed forms against
quadrature and grids, and a determinism mini-run."""
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import evidential, oracles
from .harness import Dataset, TrainConfig, rows_to_csv, run_headline
from .tasks import SINUSOID


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3g} (tolerance {self.tolerance:g}, {self.seconds:.1f}s)"


def variance_identity_error(n_cases=1000, seed=0):
    """Max relative gap between scipy's Student-t variance and AL + EP."""
    rng = np.random.default_rng(seed)
    p = evidential.NIGParams(rng.uniform(-3, 3, n_cases), rng.uniform(0.01, 20, n_cases),
                             rng.uniform(1.05, 21, n_cases), rng.uniform(0.01, 10, n_cases))
    st = evidential.predictive(p)
    var = stats.t(df=st.dof, loc=st.loc, scale=np.sqrt(st.scale_sq)).var()
    u = evidential.decompose(p)
    return float(np.max(np.abs(var - (u.aleatoric + u.epistemic)) / var))


def limit_gap(alphas=(10.0, 100.0, 1000.0), beta=1.0):
    """Gap at the largest alpha, or inf unless the gaps strictly decrease."""
    gaps = [evidential.gaussian_limit_gap(a, beta) for a in alphas]
    return gaps[-1] if all(a > b for a, b in zip(gaps, gaps[1:])) else float("inf")


def determinism_mini_run(iterations=200, n_test=50):
    """Run a tiny seeded headline twice; returns whether the CSVs are identical."""
    cfg = replace(TrainConfig(), iterations=iterations, eval_every=100)
    texts = [rows_to_csv(run_headline(Dataset(SINUSOID, 5), cfg, n_test=n_test))
             for _ in range(2)]
    return texts[0] == texts[1]


def _timed(name, tol, fn, passed):
    t0 = time.perf_counter()
    value = fn()
    return CheckResult(name, float(value), tol, bool(passed(value)), time.perf_counter() - t0)


def run_selftest(quick=False):
    """All property checks, in a fixed order. ``quick`` shrinks the case counts."""
    scale = 5 if quick else 1
    results = [
        _timed("loss gradient vs finite differences", 1e-4,
               lambda: oracles.check_loss_gradients(100 // scale), lambda v: v <= 1e-4),
        _timed("student-t marginal vs quadrature", 1e-6,
               lambda: oracles.check_student_t_marginal(50 // scale), lambda v: v <= 1e-6),
        _timed("conjugate update vs grid posterior", 1e-4,
               lambda: oracles.check_conjugacy(20 // scale), lambda v: v <= 1e-4),
        _timed("outlier weight vs autodiff", 1e-8,
               lambda: oracles.check_outlier_weight(1000), lambda v: v <= 1e-8),
        _timed("bounded evidential / linear gaussian gradient", 1.0,
               lambda: float(oracles.check_residual_gradients()), lambda v: v == 1.0),
        _timed("gaussian limit gap at alpha=1000", 1e-3,
               limit_gap, lambda v: v < 1e-3),
        _timed("student-t variance = AL + EP", 1e-12,
               lambda: variance_identity_error(1000), lambda v: v <= 1e-12),
    ]
    if not quick:
        results.append(_timed("seeded mini-run CSV identical", 1.0,
                              lambda: float(determinism_mini_run()), lambda v: v == 1.0))
    return results

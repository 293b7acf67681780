"""Accuracy and uncertainty-quality metrics for few-shot predictors."""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evidential
from .model import EVIDENTIAL, ModelParams, forward_batch
from .tape import Tape


@dataclass
class MetricsReport:
    mse: float
    ll: float
    inclusion: dict = field(default_factory=dict)
    unc_increase: float = 0.0
    mean_al: float = float("nan")
    mean_ep: float = float("nan")
    mean_evidence: float = float("nan")
    n_tasks: int = 0

    def as_row(self):
        row = asdict(self)
        inc = row.pop("inclusion")
        for k in sorted(inc):
            row[f"inclusion@{k:g}"] = inc[k]
        return row


def mse(pred, truth):
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def log_likelihood(prediction, truth, rows=slice(None)):
    """Mean log predictive density over targets and channels."""
    return float(np.mean(prediction.log_density(np.asarray(truth, float), rows)))


def inclusion_at_k(m, s, f, k):
    """Fraction of points with |f - m| < k * s (strict)."""
    m, s, f = (np.asarray(a, float) for a in (m, s, f))
    if np.any(s <= 0):
        raise ValueError("uncertainties must be positive")
    return float(np.mean(np.abs(f - m) < k * s))


def uncertainty_increase(query_unc, support_unc):
    """Fraction of query points more uncertain than their nearest support point."""
    q, s = np.asarray(query_unc, float), np.asarray(support_unc, float)
    return float(np.mean(q > s))


def nearest_index(x_query, x_support):
    x_query = np.atleast_2d(x_query)
    x_support = np.atleast_2d(x_support)
    diff = x_query[:, None, :] - x_support[None, :, :]
    return np.argmin(np.sum(diff * diff, axis=-1), axis=1)


def model_predictor(params):
    """Wrap model parameters as ``predict(tasks, targets) -> Prediction``."""
    def predict(tasks, targets):
        return forward_batch(params, tasks, Tape(), targets)
    return predict


def task_metrics(pred, task, rows, support_rows, ks=(1.0,), use_variance=False):
    """Metric values for one task given the rows of its targets and supports."""
    y = task.Y_t
    m = pred.mean_values(rows)
    var = pred.variance(rows)
    s = var if use_variance else np.sqrt(var)
    svar = pred.variance(support_rows)
    s_support = svar if use_variance else np.sqrt(svar)
    nn = nearest_index(task.X_t, task.X_c)
    out = {
        "mse": mse(m, y),
        "ll": log_likelihood(pred, y, rows),
        "inclusion": {k: inclusion_at_k(m, s, y, k) for k in ks},
        "unc_increase": uncertainty_increase(s, s_support[nn]),
    }
    if pred.head == EVIDENTIAL:
        u = evidential.decompose(pred.nig(rows))
        out.update(mean_al=float(np.mean(u.aleatoric)), mean_ep=float(np.mean(u.epistemic)),
                   mean_evidence=float(np.mean(u.evidence)))
    return out


def evaluate(model, stream, n_tasks, ks=(1.0,), use_variance=False, chunk=None, tasks=None):
    """Average task metrics over the first ``n_tasks`` tasks of ``stream``.

    ``model`` is either :class:`ModelParams` or a callable
    ``predict(tasks, targets)``. Each task is queried at its targets and at
    its context inputs; the latter feed the uncertainty-increase metric.
    Tasks are forwarded ``chunk`` at a time (default: about 20k rows).
    """
    predict = model_predictor(model) if isinstance(model, ModelParams) else model
    if tasks is None:
        tasks = [stream.task(i) for i in range(n_tasks)]
    if chunk is None:
        chunk = max(1, min(50, 20000 // (len(tasks[0].X_t) + len(tasks[0].X_c))))
    per_task = []
    for start in range(0, len(tasks), chunk):
        group = tasks[start:start + chunk]
        pred = predict(group, [np.concatenate([t.X_t, t.X_c]) for t in group])
        for t, (a, b) in zip(group, pred.segments):
            mid = a + len(t.X_t)
            per_task.append(task_metrics(pred, t, slice(a, mid), slice(mid, b), ks, use_variance))
    return aggregate(per_task)


def aggregate(per_task):
    n = len(per_task)
    mean = lambda key: float(np.mean([r[key] for r in per_task])) if key in per_task[0] else float("nan")
    ks = per_task[0]["inclusion"].keys()
    return MetricsReport(
        mse=mean("mse"),
        ll=mean("ll"),
        inclusion={k: float(np.mean([r["inclusion"][k] for r in per_task])) for k in ks},
        unc_increase=mean("unc_increase"),
        mean_al=mean("mean_al"),
        mean_ep=mean("mean_ep"),
        mean_evidence=mean("mean_evidence"),
        n_tasks=n,
    )

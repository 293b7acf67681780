import math

import numpy as np
import pytest

from ecnp import evidential as ev
from ecnp.errors import EmptyContext
from ecnp.model import GAUSSIAN, ModelConfig, build_model, forward_batch
from ecnp.objective import (LossConfig, cnp_loss, ecnp_loss, evid_nll, evid_reg, gaussian_nll,
                            gradient_weight_empirical, kernel_reg, kernel_reg_terms,
                            min_context_distance, nll_terms)
from ecnp.oracles import SMALL_MODEL, check_loss_gradients, check_residual_gradients, residual_gradients
from ecnp.tape import Tape
from ecnp.tasks import Task

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def test_evid_nll_examples():
    assert evid_nll(ev.NIGParams(0.0, 1.0, 1.0, 1.0), 0.0) == pytest.approx(math.log(4), abs=1e-12)


def test_evid_nll_is_negative_log_density():
    rng = np.random.default_rng(0)
    n = 1000
    p = ev.NIGParams(rng.uniform(-3, 3, n), rng.uniform(0.01, 20, n),
                     rng.uniform(1.0, 21, n), rng.uniform(0.05, 10, n))
    y = p.gamma + rng.normal(0, 3, n)
    total = evid_nll(p, y) + ev.student_t_log_density(ev.predictive(p), y)
    assert np.max(np.abs(total)) < 1e-10


def test_evid_nll_minimized_at_gamma():
    p = ev.NIGParams(1.3, 2.0, 3.0, 0.7)
    ys = np.linspace(-5, 7, 1201)
    assert ys[np.argmin(evid_nll(p, ys))] == pytest.approx(1.3)


def test_evid_reg_examples():
    p = ev.NIGParams(0.0, 2.0, 3.0, 4.0)
    assert evid_reg(p, 0.0) == 0.0
    assert evid_reg(p, 2.0) == pytest.approx(10.5)
    assert evid_reg(p, -4.0) == pytest.approx(2 * evid_reg(p, 2.0))


def test_kernel_reg_examples():
    p3 = ev.NIGParams(0.0, 3.0, 2.0, 1.0)
    assert kernel_reg(p3, 0.0, [-1.0, 2.0]) == pytest.approx(3.0)
    assert kernel_reg(p3, 2.0, [-1.0, 2.0]) == 0.0
    assert min_context_distance([[0.0, 0.0]], [[3.0, 4.0]])[0] == pytest.approx(5.0)
    with pytest.raises(EmptyContext):
        min_context_distance([[0.0]], np.zeros((0, 1)))


def test_gaussian_nll_examples():
    assert gaussian_nll(1.0, 1.0, 1.0) == pytest.approx(HALF_LOG_2PI)
    assert gaussian_nll(0.0, 1.0, 1.0) == pytest.approx(HALF_LOG_2PI + 0.5)
    assert gaussian_nll(0.0, 1.0, -1.0) == gaussian_nll(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        gaussian_nll(0.0, 0.0, 1.0)


def _tasks(seed, n=3):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        nc, nt = rng.integers(2, 6), rng.integers(3, 9)
        out.append(Task(rng.uniform(-2, 2, (nc, 1)), rng.normal(size=(nc, 1)),
                        rng.uniform(-2, 2, (nt, 1)), rng.normal(size=(nt, 1))))
    return out


@pytest.fixture(scope="module")
def small():
    return build_model(ModelConfig(**SMALL_MODEL), seed=1)


def test_breakdown_total(small):
    tasks = _tasks(0)
    tape = Tape()
    cfg = LossConfig(0.3, 0.7)
    lb = ecnp_loss(forward_batch(small, tasks, tape), tasks, cfg, tape)
    v = lb.values()
    assert v["total"] == pytest.approx(v["nll"] + 0.3 * v["evid_reg"] + 0.7 * v["kernel_reg"], abs=1e-10)
    tape = Tape()
    lb0 = ecnp_loss(forward_batch(small, tasks, tape), tasks, LossConfig(0, 0), tape).values()
    assert lb0["total"] == lb0["nll"]


def test_loss_is_mean_of_per_task_sums(small):
    tasks = _tasks(1)
    cfg = LossConfig()
    tape = Tape()
    batch = ecnp_loss(forward_batch(small, tasks, tape), tasks, cfg, tape).values()["total"]
    per_task = []
    for t in tasks:
        tape = Tape()
        p = forward_batch(small, [t], tape).nig()
        dist = min_context_distance(t.X_t, t.X_c)[:, None]
        per_task.append(np.sum(evid_nll(p, t.Y_t) + 0.1 * evid_reg(p, t.Y_t) + 0.1 * p.v * dist))
    assert batch == pytest.approx(np.mean(per_task), rel=1e-12)


def test_both_regularizers_vanish_on_exact_context_target(small):
    ctx = Task(np.array([[0.5]]), np.array([[0.0]]), np.array([[0.5]]), np.array([[0.0]]))
    tape = Tape()
    pred = forward_batch(small, [ctx], tape)
    target = Task(ctx.X_c, ctx.Y_c, ctx.X_t, pred.mean.value.copy())
    lb = ecnp_loss(pred, [target], LossConfig(1.0, 1.0), tape).values()
    assert lb["evid_reg"] == 0.0 and lb["kernel_reg"] == 0.0 and lb["total"] == lb["nll"]


def test_target_permutation_invariance(small):
    tasks = _tasks(2)
    perm_tasks = []
    for i, t in enumerate(tasks):
        p = np.random.default_rng(i).permutation(len(t.X_t))
        perm_tasks.append(Task(t.X_c, t.Y_c, t.X_t[p], t.Y_t[p]))
    vals = []
    for ts in (tasks, perm_tasks):
        tape = Tape()
        vals.append(ecnp_loss(forward_batch(small, ts, tape), ts, LossConfig(), tape).values()["total"])
    assert abs(vals[0] - vals[1]) <= 1e-10


def test_kernel_term_has_no_gamma_gradient():
    rng = np.random.default_rng(0)
    gamma, v = rng.normal(size=(6, 1)), rng.uniform(0.1, 5, (6, 1))
    tape = Tape()
    g, vv = tape.variable(gamma), tape.variable(v)
    # gamma is on the tape but the kernel term only sees v
    _ = g * 1.0
    out = tape.sum(kernel_reg_terms(tape, vv, tape.constant(rng.uniform(0, 2, (6, 1)))))
    adj = tape.backward(out)
    assert np.all(adj.get(g.id, np.zeros_like(gamma)) == 0)
    assert np.any(adj[vv.id] != 0)


def test_cnp_loss_values(small):
    gm = build_model(ModelConfig(head=GAUSSIAN, **SMALL_MODEL), seed=1)
    tasks = _tasks(3)
    tape = Tape()
    pred = forward_batch(gm, tasks, tape)
    lb = cnp_loss(pred, tasks, tape).values()
    y = np.concatenate([t.Y_t for t in tasks])
    ref = np.sum(gaussian_nll(pred.mean.value, pred.sigma.value, y)) / len(tasks)
    assert lb["total"] == pytest.approx(ref, rel=1e-12)
    assert lb["evid_reg"] == 0.0 and lb["kernel_reg"] == 0.0


def test_full_loss_gradient_against_finite_differences():
    assert check_loss_gradients(100) <= 1e-4


def test_gradient_weight_matches_closed_form():
    rng = np.random.default_rng(5)
    n = 1000
    p = ev.NIGParams(rng.uniform(-3, 3, n), rng.uniform(0.05, 20, n),
                     rng.uniform(1.01, 21, n), rng.uniform(0.2, 5, n))
    y = p.gamma + rng.normal(0, 5, n)
    s2 = ev.predictive(p).scale_sq
    closed = ev.outlier_weight(p.alpha, (y - p.gamma) ** 2 / s2)
    assert np.max(np.abs(gradient_weight_empirical(p, y) - closed)) <= 1e-8


def test_gradient_weight_special_cases():
    p = ev.NIGParams(0.0, 1.5, 2.5, 0.8)
    s = math.sqrt(ev.predictive(p).scale_sq)
    assert gradient_weight_empirical(p, s) == pytest.approx(1.0, abs=1e-12)
    assert gradient_weight_empirical(p, 0.0) == pytest.approx(ev.outlier_weight(2.5, 0.0))
    big = 1e4 * s
    assert gradient_weight_empirical(p, big) * 1e8 == pytest.approx(6.0, rel=1e-6)


def test_residual_gradient_shapes():
    evid, gauss = residual_gradients()
    assert evid[2] <= 1.2 * evid[1]
    assert gauss[2] == 10.0 * gauss[1]
    assert check_residual_gradients()


def test_nll_terms_match_numpy_wrapper():
    p = ev.NIGParams(np.array([0.1, -2.0]), np.array([1.0, 3.0]), np.array([2.0, 5.0]),
                     np.array([0.5, 1.5]))
    tape = Tape()
    node = nll_terms(tape, *(tape.constant(a) for a in (p.gamma, p.v, p.alpha, p.beta, [0.0, 1.0])))
    np.testing.assert_array_equal(node.value, evid_nll(p, np.array([0.0, 1.0])))

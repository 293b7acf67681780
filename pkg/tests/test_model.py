import math

import numpy as np
import pytest

from ecnp import evidential as ev
from ecnp.errors import EmptyContext, ShapeMismatch
from ecnp.model import (EVIDENTIAL, GAUSSIAN, ModelConfig, build_model, decode, encode_aggregate,
                        forward, forward_batch, to_gaussian, to_nig)
from ecnp.tape import Tape
from ecnp.tasks import Task

LN2 = math.log(2.0)


@pytest.fixture(scope="module")
def evid():
    return build_model(ModelConfig(), seed=3)


@pytest.fixture(scope="module")
def gauss():
    return build_model(ModelConfig(head=GAUSSIAN), seed=3)


def random_task(seed, n_c=5, n_t=7):
    rng = np.random.default_rng(seed)
    return Task(rng.uniform(-5, 5, (n_c, 1)), rng.normal(size=(n_c, 1)),
                rng.uniform(-5, 5, (n_t, 1)), rng.normal(size=(n_t, 1)))


def embed(params, X, Y):
    return encode_aggregate(params, np.asarray(X, float), np.asarray(Y, float), Tape()).value


def test_architecture_dimensions(evid, gauss):
    assert evid.encoder.in_dim == 2 and evid.encoder.out_dim == 128
    assert len(evid.encoder.layers) == 4 and len(evid.decoder.layers) == 3
    assert evid.decoder.in_dim == 129 and evid.decoder.out_dim == 128
    assert [l.out_dim for l in evid.head.layers] == [64, 4]
    assert [l.out_dim for l in gauss.head.layers] == [2]
    img = build_model(ModelConfig(x_dim=2), seed=0)
    assert img.decoder.in_dim == 130


def test_single_context_is_its_embedding(evid):
    x, y = np.array([[0.3]]), np.array([[1.2]])
    tape = Tape()
    from ecnp.nn import mlp_forward
    direct = mlp_forward(evid.encoder, tape.constant(np.concatenate([x, y], 1)), tape).value[0]
    np.testing.assert_array_equal(embed(evid, x, y), direct)


def test_aggregation_invariances(evid):
    t = random_task(0)
    r = embed(evid, t.X_c, t.Y_c)
    np.testing.assert_allclose(embed(evid, np.repeat(t.X_c, 2, 0), np.repeat(t.Y_c, 2, 0)), r,
                               atol=1e-12)
    perm = np.random.default_rng(1).permutation(len(t.X_c))
    np.testing.assert_allclose(embed(evid, t.X_c[perm], t.Y_c[perm]), r, atol=1e-12)


def test_empty_context(evid):
    with pytest.raises(EmptyContext):
        embed(evid, np.zeros((0, 1)), np.zeros((0, 1)))


def test_decode_rows_independent(evid, gauss):
    for params, width in ((evid, 4), (gauss, 2)):
        tape = Tape()
        r = encode_aggregate(params, np.ones((2, 1)), np.ones((2, 1)), tape)
        one = decode(params, r, np.array([[0.4]]), tape).value
        three = decode(params, r, np.full((3, 1), 0.4), tape).value
        assert one.shape == (1, width)
        # BLAS may pick a different kernel per row count; agreement is to rounding
        for row in three:
            np.testing.assert_allclose(row, one[0], rtol=1e-12, atol=1e-15)
        with pytest.raises(ShapeMismatch):
            decode(params, r, np.zeros((3, 2)), tape)


def test_to_nig_examples():
    tape = Tape()
    g, v, a, b = to_nig(tape.constant([[0.7, 0.0, 0.0, 0.0]]), ModelConfig(), tape)
    assert g.value[0, 0] == 0.7
    assert v.value[0, 0] == pytest.approx(LN2, abs=1e-7)
    assert a.value[0, 0] == pytest.approx(1 + LN2, abs=1e-7)
    assert b.value[0, 0] == pytest.approx(LN2 + 0.2, abs=1e-15)
    g, v, a, b = to_nig(tape.constant([[0.0, 1e6, 1e6, 0.0]]), ModelConfig(), tape)
    assert v.value[0, 0] == 20.0 and a.value[0, 0] == 21.0


def test_to_gaussian_examples():
    tape = Tape()
    mu, s = to_gaussian(tape.constant([[2.0, 0.0], [0.0, -800.0]]), ModelConfig(head=GAUSSIAN), tape)
    assert mu.value[0, 0] == 2.0
    assert s.value[0, 0] == pytest.approx(0.01 + LN2)
    assert s.value[1, 0] == pytest.approx(0.01)


def test_head_constraints_over_random_raws():
    rng = np.random.default_rng(0)
    raw = rng.uniform(-1e6, 1e6, (1000, 4)) * rng.choice([1e-6, 1e-3, 1.0], (1000, 4))
    tape = Tape()
    g, v, a, b = to_nig(tape.constant(raw), ModelConfig(), tape)
    assert np.all((v.value > 0) & (v.value <= 20))
    assert np.all((a.value > 1) & (a.value <= 21))
    assert np.all(b.value >= 0.2)
    ev.decompose(ev.NIGParams(g.value, v.value, a.value, b.value))
    _, s = to_gaussian(tape.constant(raw[:, :2]), ModelConfig(head=GAUSSIAN), tape)
    assert np.all(s.value >= 0.01)


def test_fresh_model_outputs_in_range(evid):
    pred = forward(evid, random_task(4), Tape())
    p = pred.nig()
    assert np.all((p.alpha > 1) & (p.alpha <= 21)) and np.all(p.beta >= 0.2)


def test_unrelated_targets_do_not_matter(evid):
    t = random_task(5)
    a = forward(evid, t, Tape(), t.X_t[:2]).nig()
    b = forward(evid, t, Tape(), np.concatenate([t.X_t[:2], [[9.0], [-3.0]]])).nig()
    for name in ("gamma", "v", "alpha", "beta"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name)[:2])


def test_context_changes_predictions(evid):
    t = random_task(6)
    other = Task(t.X_c, t.Y_c + 1.0, t.X_t, t.Y_t)
    assert not np.allclose(forward(evid, t, Tape()).mean.value, forward(evid, other, Tape()).mean.value)


def test_context_permutation_invariance(evid, gauss):
    t = random_task(7)
    perm = np.random.default_rng(0).permutation(len(t.X_c))
    shuffled = Task(t.X_c[perm], t.Y_c[perm], t.X_t, t.Y_t)
    for params in (evid, gauss):
        a, b = forward(params, t, Tape()), forward(params, shuffled, Tape())
        for name in ("mean", "sigma", "v", "alpha", "beta"):
            if getattr(a, name) is not None:
                np.testing.assert_allclose(getattr(a, name).value, getattr(b, name).value,
                                           rtol=0, atol=1e-12)


def test_batched_forward_equals_per_task(evid):
    tasks = [random_task(s, n_c=3 + s, n_t=4 + s) for s in range(4)]
    batch = forward_batch(evid, tasks, Tape())
    for t, (a, b) in zip(tasks, batch.segments):
        single = forward(evid, t, Tape())
        np.testing.assert_allclose(batch.mean.value[a:b], single.mean.value, atol=1e-12)
        np.testing.assert_allclose(batch.alpha.value[a:b], single.alpha.value, atol=1e-12)


def test_gaussian_limit_through_model(evid):
    """Clamped alpha with v = 1/alpha makes the head's Student-t nearly Gaussian."""
    pred = forward(evid, random_task(8), Tape())
    p = pred.nig()
    for g, b in zip(p.gamma.ravel(), p.beta.ravel()):
        assert ev.gaussian_limit_gap(21.0, b, g) < 2e-2


def test_prediction_variance_and_density(evid, gauss):
    t = random_task(9)
    pe = forward(evid, t, Tape())
    u = ev.decompose(pe.nig())
    np.testing.assert_allclose(pe.variance(), u.aleatoric + u.epistemic)
    pg = forward(gauss, t, Tape())
    np.testing.assert_allclose(pg.std(), pg.sigma.value)
    s = pg.sigma.value
    ref = -0.5 * np.log(2 * np.pi * s * s) - 0.5 * ((t.Y_t - pg.mean.value) / s) ** 2
    np.testing.assert_allclose(pg.log_density(t.Y_t), ref)
    assert pe.head == EVIDENTIAL and pg.head == GAUSSIAN

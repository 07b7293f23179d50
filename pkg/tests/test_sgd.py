import math
import warnings

import numpy as np
import pytest

from rnnlab import complexity as cx
from rnnlab import concept, inputs, rnn, sgd
from rnnlab.losses import get_loss
from rnnlab.rnn import Dims, gradient, init_random


def _cc(L=4, p=1):
    return concept.concept_complexity(concept.random_concept(L, 4, 2, p, cx.monomial(1), 0), L, 0.1)


def test_hyperparams_example():
    cc = _cc(8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sgd.HyperParamWarning)
        hp = sgd.derive_hyperparams(cc, Dims(4096, 4, 4, 8), 0.1)
    r = 100 * 8 * 4 * math.log(4096)
    assert hp.rho == pytest.approx(r)
    assert hp.lam == pytest.approx(0.1 / (80 * r))
    assert hp.eta == pytest.approx(1 / (0.1 * r * r * 4096))
    assert hp.eps_x == pytest.approx(1 / 80)
    assert hp.overridden == ()


def test_eta_scaling_and_overrides():
    cc = _cc()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sgd.HyperParamWarning)
        a = sgd.derive_hyperparams(cc, Dims(1024, 4, 2, 4), 0.1)
        b = sgd.derive_hyperparams(cc, Dims(2048, 4, 2, 4), 0.1)
        o = sgd.derive_hyperparams(cc, Dims(1024, 4, 2, 4), 0.1, overrides={"eta": 1e-3, "T": 7})
    ratio = (a.eta / b.eta) / (2 * (rnn.rho(2048, 4, 2) / rnn.rho(1024, 4, 2)) ** 2)
    assert ratio == pytest.approx(1.0)
    assert o.eta == 1e-3 and o.T == 7 and o.overridden == ("T", "eta")
    with pytest.raises(ValueError), warnings.catch_warnings():
        warnings.simplefilter("ignore", sgd.HyperParamWarning)
        sgd.derive_hyperparams(cc, Dims(1024, 4, 2, 4), 0.1, overrides={"nope": 1})


def test_eps_range_warning():
    with pytest.warns(sgd.HyperParamWarning):
        sgd.derive_hyperparams(_cc(), Dims(1024, 4, 2, 4), 0.5)


def _problem(m=128, N=32, L=4, seed=0, noise=0.0):
    F = concept.random_concept(L, 4, 2, 1, cx.monomial(1), seed)
    Xs, Y, opt = concept.sample_dataset(F, N, seed + 1, noise_std=noise)
    P = init_random(Dims(m, 4, 2, L), seed)
    return P, Xs, Y, opt


def _hp(P, **kw):
    base = dict(eps=0.1, eps_x=0.05, lam=1.0, eta=1e-3, T=20, m=P.m, L=P.L, d=P.d, d_x=P.d_x, p=1,
                rho=rnn.rho(P.m, P.L, P.d), varrho=1.0, Delta_cap=1e9)
    base.update(kw)
    return sgd.HyperParams(**base)


def test_zero_step_size():
    P, Xs, Y, _ = _problem()
    res = sgd.train(P, Xs, Y, _hp(P, eta=0.0), eval_every=5)
    assert not res.W_shift.any()
    assert len({r["empirical_risk"] for r in res.history}) == 1


def test_single_step_matches_gradient():
    P, Xs, Y, _ = _problem()
    hp = _hp(P, T=1, eta=0.01)
    res = sgd.train(P, Xs, Y, hp, rng=7)
    n = int(np.random.default_rng(7).integers(Xs.shape[0]))
    x = inputs.actual_batch(Xs[n:n + 1], hp.eps_x)[0]
    G = gradient(P, None, x, Y[n], hp.lam, "centered-l2")
    assert np.allclose(res.W_shift, -0.01 * G, atol=1e-15)


def test_determinism_hash():
    P, Xs, Y, _ = _problem()
    a = sgd.train(P, Xs, Y, _hp(P), rng=3)
    b = sgd.train(P, Xs, Y, _hp(P), rng=3)
    c = sgd.train(P, Xs, Y, _hp(P), rng=4)
    assert a.trajectory_hash == b.trajectory_hash != c.trajectory_hash


def test_risk_decreases():
    P, Xs, Y, opt = _problem(m=256, N=64)
    res = sgd.train(P, Xs, Y, _hp(P, T=1500, eta=2e-3, lam=1.0), rng=0, eval_every=500)
    assert res.history[-1]["empirical_risk"] < res.history[0]["empirical_risk"] - 0.05
    assert res.best_risk >= opt - 1e-9


def test_step_norm_diagnostic():
    P, Xs, Y, _ = _problem()
    res = sgd.train(P, Xs, Y, _hp(P, T=50), rng=0)
    assert res.step_norms.shape == (50,) and np.all(res.step_norms >= 0)
    # the recorded step norm equals |grad|_F at that step; a single step checks it
    one = sgd.train(P, Xs, Y, _hp(P, T=1, eta=1.0), rng=0)
    assert one.step_norms[0] == pytest.approx(np.linalg.norm(one.W_shift), rel=1e-10)
    assert not res.cap_exceeded
    tight = sgd.train(P, Xs, Y, _hp(P, T=50, eta=0.05, Delta_cap=1e-9), rng=0)
    assert tight.cap_exceeded


def test_diverged_on_inf_labels():
    P, Xs, Y, _ = _problem()
    Y = Y.copy()
    Y[:] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(sgd.TrainingDiverged) as ei:
        sgd.train(P, Xs, Y, _hp(P), rng=0)
    assert ei.value.snapshot["step"] == 1


def test_stop_below_and_callbacks():
    P, Xs, Y, _ = _problem()
    res = sgd.train(P, Xs, Y, _hp(P, T=100), rng=0, callbacks=[lambda t, W, h: t >= 10])
    assert res.steps == 10 and res.history[-1]["step"] == 10
    res = sgd.train(P, Xs, Y, _hp(P, T=100), rng=0, eval_every=5, stop_below=1e9)
    assert res.steps == 5


def test_empty_dataset():
    P, Xs, Y, _ = _problem()
    with pytest.raises(ValueError):
        sgd.train(P, Xs[:0], Y[:0], _hp(P))


def test_empirical_risk_matches_loop():
    P, Xs, Y, _ = _problem(N=10)
    X = inputs.actual_batch(Xs, 0.05)
    loop = np.mean([rnn.objective(P, None, X[n], Y[n], 0.5, "centered-l2") for n in range(10)])
    assert sgd.empirical_risk(P, P.W, X, Y, 0.5, "centered-l2", chunk=3) == pytest.approx(loop, rel=1e-12)


def test_linearized_surrogate_is_convex():
    # with the trace frozen at W, the objective of f(W') = first-order outputs is convex in W'
    P, Xs, Y, _ = _problem(m=64, N=4)
    X = inputs.actual_batch(Xs, 0.05)
    G = get_loss("centered-l2")
    trs = [rnn.forward(P, X[n]) for n in range(4)]

    def surrogate(Wp):
        return sum(np.sum(G.value(tr.y[3:] + rnn.jvp_outputs(tr, P, Wp)[3:], Y[n, 3:]))
                   for n, tr in enumerate(trs))

    g = np.random.default_rng(0)
    for _ in range(20):
        U, V = g.standard_normal((2, 64, 64)) / 8
        t = g.uniform()
        assert surrogate(t * U + (1 - t) * V) <= t * surrogate(U) + (1 - t) * surrogate(V) + 1e-12

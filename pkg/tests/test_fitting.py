import math

import numpy as np
import pytest

from rnnlab import complexity as cx
from rnnlab import concept, fitting, inputs, rnn
from rnnlab.numerics import RngStream

TS = [-math.sqrt(3) / 2, -0.3, 0.0, 0.3, math.sqrt(3) / 2]


def _unit(d_x, seed=0):
    w = np.zeros(d_x)
    w[:-1] = np.random.default_rng(seed).standard_normal(d_x - 1)
    return w / np.linalg.norm(w)


def test_zero_target_gives_zero_fit():
    H = fitting.fit_indicator_function(cx.zero(), 1.0, 0.1)
    assert H.cols == [] and not H(np.linspace(-3, 3, 7), np.ones(7)).any()


def test_linear_fit_monte_carlo():
    phi = cx.monomial(1)
    H = fitting.fit_indicator_function(phi, 1.0, 0.1)
    w = _unit(4)
    est, se = fitting.mc_indicator_check(H, w, TS, samples=10 ** 6, rng=0)
    assert np.all(np.abs(est - phi(np.array(TS))) <= 2 * 0.1)
    assert np.all(se < 0.02)


def test_fit_bounded_by_clamp():
    H = fitting.fit_indicator_function(cx.sin_series(5), 1.0, 0.1)
    a = np.random.default_rng(0).standard_normal((10 ** 5, 4))
    assert np.abs(H.on(a, _unit(4))).max() <= H.clamp


@pytest.mark.parametrize("phi", [cx.monomial(1), cx.monomial(2), cx.sin_series(5)])
def test_calibration_matches_closed_form(phi):
    H = fitting.fit_indicator_function(phi, 0.7, 0.1)
    assert np.allclose(H.alpha, fitting.closed_form_alpha(phi, 0.7, H.cols), rtol=1e-8, atol=1e-10)
    assert H.residual < 1e-10


def test_off_target_noise_degrades():
    phi = cx.monomial(1)
    H = fitting.fit_indicator_function(phi, 0.5, 0.1)
    t = np.array(TS)
    errs = [np.abs(H.expectation(t, g * 0.5) - phi(t)).max() for g in (1, 2, 4, 8)]
    assert errs[0] < 1e-8
    assert errs[1] < errs[2] < errs[3]


def test_calibration_error(monkeypatch):
    # a basis without the linear term cannot represent phi(t) = t
    monkeypatch.setattr(fitting, "basis_for", lambda phi, e: [(2, 1)])
    with pytest.raises(fitting.CalibrationError) as ei:
        fitting.fit_indicator_function(cx.monomial(1), 1.0, 0.1)
    assert len(ei.value.residuals) > 0


def test_fit_argument_checks():
    with pytest.raises(ValueError):
        fitting.fit_indicator_function(cx.monomial(1), 0.01, 0.1)
    with pytest.raises(ValueError):
        fitting.fit_indicator_function(cx.monomial(1), 1.0, 1.5)


def _setup(m, seed=0, L=4, d=2, d_x=4, p=1, eps_x=0.025):
    F = concept.random_concept(L, d_x, d, p, cx.monomial(1), RngStream(seed, 1))
    P = rnn.init_random(rnn.Dims(m, d_x, d, L), RngStream(seed, 0))
    nt = rnn.forward(P, inputs.null_sequence(L, d_x, eps_x))
    return F, P, nt


def test_w_star_zero_concept():
    _, P, nt = _setup(256)
    wsb = fitting.build_w_star(P, concept.TargetFunction(4, 4, 2, 1), nt, 0.1, 0.025)
    assert not wsb.dense().any()
    Xs = inputs.sample_true_batch(0, 2, 4, 4)
    rep = fitting.verify_existence(P, wsb, concept.TargetFunction(4, 4, 2, 1), Xs, 0.1, 0.025)
    assert rep.statistic["max_error"] == 0.0 and rep.passed


def test_w_star_normalizers_and_sparsity():
    F, P, nt = _setup(4096)
    wsb = fitting.build_w_star(P, F, nt, 0.1, 0.025, eps_c=0.025, rng=5)
    for C in wsb.C.values():
        assert 0.1 / 2 <= C <= 100 / 2
    for i, k in wsb.selected.items():
        expect = wsb.eps_c_prime[i] * 4096
        assert abs(k - expect) <= 4 * math.sqrt(expect) + 2
    nz = np.flatnonzero(np.linalg.norm(wsb.dense(), axis=1))
    assert nz.size <= sum(wsb.selected.values())


def test_w_star_linear_in_concept():
    g = np.random.default_rng(3)
    F1 = concept.random_concept(4, 4, 2, 1, cx.monomial(1), g)
    F2 = concept.random_concept(4, 4, 2, 1, cx.monomial(1), g)
    _, P, nt = _setup(512)
    kw = dict(eps_c=0.05, sigma=0.5)
    a = fitting.build_w_star(P, F1, nt, 0.1, 0.025, **kw).dense()
    b = fitting.build_w_star(P, F2, nt, 0.1, 0.025, **kw).dense()
    ab = fitting.build_w_star(P, F1 + F2, nt, 0.1, 0.025, **kw).dense()
    assert np.allclose(ab, a + b, atol=1e-12)


def test_w_star_row_norm_bound():
    F, P, nt = _setup(1024)
    wsb = fitting.build_w_star(P, F, nt, 0.1, 0.025, eps_c=0.025)
    # each row is at most C_range per term, times |h0| / (m C), summed over p * (L-2) * d terms
    h0 = max(np.linalg.norm(nt.h[i]) for i in range(1, 3))
    back = max(np.abs(rnn.backward_rows(nt, P, i, j)).max() for i in range(2, 4) for j in range(i, 5))
    bound = wsb.C_range * back * h0 / (1024 * min(wsb.C.values())) * len(F.nonzero_terms())
    assert wsb.row_norm_max() <= bound


def test_existence_error_shrinks_with_m():
    med = []
    for m in (1024, 4096):
        errs = []
        for seed in range(3):
            F, P, nt = _setup(m, seed)
            wsb = fitting.build_w_star(P, F, nt, 0.1, 0.025, eps_c=0.025, rng=RngStream(seed, 5))
            Xs = inputs.sample_true_batch(RngStream(seed, 6), 3, 4, 4)
            errs.append(np.median(fitting.verify_existence(P, wsb, F, Xs, 0.1, 0.025).statistic["per_sample"]))
        med.append(np.median(errs))
    assert med[1] < med[0]


def test_existence_under_small_shift():
    F, P, nt = _setup(2048)
    wsb = fitting.build_w_star(P, F, nt, 0.1, 0.025, eps_c=0.025)
    Xs = inputs.sample_true_batch(1, 3, 4, 4)
    base = fitting.verify_existence(P, wsb, F, Xs, 0.1, 0.025).statistic["max_error"]
    sh = np.random.default_rng(0).standard_normal((2048, 2048)) * (1e-3 / 2048)
    moved = fitting.verify_existence(P, wsb, F, Xs, 0.1, 0.025, shift=sh).statistic["max_error"]
    assert abs(moved - base) < 0.5 * base + 0.05

"""End-to-end acceptance checks A1-A10 at desk scale.

Each test records a single PASS/FAIL line (shown in the terminal summary) and
then asserts on the same condition.
"""
import math
import time

import numpy as np

from rnnlab import cli, concept, fitting, generalization as gz, inputs, lemmas, rnn
from rnnlab import complexity as cx
from rnnlab.numerics import RngStream, fit_loglog_slope
from rnnlab.rnn import Dims


def test_a1_forward_norm_law(criterion):
    t0 = time.time()
    m, L, d, eps_x = 4096, 8, 4, 0.05
    tol = 10 * rnn.rho(m, L, d) ** 2 / math.sqrt(m)
    law = np.sqrt(1 + np.arange(L) * eps_x ** 2)
    devs = []
    for seed in range(30):
        P = rnn.init_random(Dims(m, 4, d, L), RngStream(seed, 0))
        X = inputs.actual_batch(inputs.sample_true_batch(RngStream(seed, 1), 1, L, 4), eps_x)
        tr = rnn.forward(P, X[0])
        devs.append(float(np.max(np.abs(np.linalg.norm(tr.h[1:], axis=1) - law))))
    worst = max(devs)
    ok = worst <= tol
    criterion("A1", ok, f"max deviation {worst:.4f} (median over seeds {np.median(devs):.4f}) "
                        f"<= {tol:.3g}; {time.time() - t0:.1f}s")
    assert ok


def test_a2_zeta_c(criterion):
    t0 = time.time()
    rep = lemmas.verify_zeta_c((0.0, 0.25, -0.25, 0.5, -0.5, 0.75, -0.75), 10 ** 7, 0)
    worst = max(abs(r["mc"] - r["series"]) / r["se"] for r in rep.statistic["rows"] if r["se"] > 0)
    criterion("A2", rep.passed, f"worst |MC - series| = {worst:.2f} SE, bounds hold at all betas; "
                                f"{time.time() - t0:.1f}s")
    assert rep.passed


def test_a3_gradient_finite_differences(criterion):
    t0 = time.time()
    m, L = 256, 5
    P = rnn.init_random(Dims(m, 4, 2, L), 0)
    x = inputs.actual_batch(inputs.sample_true_batch(0, 1, L, 4), 0.02)[0]
    g = np.random.default_rng(0)
    ys = g.standard_normal((L + 1, 2))
    Wt = g.standard_normal((m, m)) * 0.01 / math.sqrt(m)
    G = rnn.gradient(P, Wt, x, ys, 0.7, "centered-l2")
    tr = rnn.forward(P, x, shift=Wt)
    h, errs = 1e-6, []
    while len(errs) < 20:
        a, b = g.integers(0, m, 2)
        E = np.zeros((m, m))
        E[a, b] = h
        if not all(np.array_equal(rnn.forward(P, x, shift=Wt + s * E).D, tr.D) for s in (1, -1)):
            continue
        fd = (rnn.objective(P, Wt + E, x, ys, 0.7, "centered-l2")
              - rnn.objective(P, Wt - E, x, ys, 0.7, "centered-l2")) / (2 * h)
        errs.append(abs(fd - G[a, b]) / max(abs(fd), abs(G[a, b]), 1e-8))
    ok = max(errs) <= 1e-4
    criterion("A3", ok, f"max relative error {max(errs):.2e} over 20 coordinates; {time.time() - t0:.1f}s")
    assert ok


def test_a4_first_order_coupling(criterion):
    t0 = time.time()
    rep = lemmas.verify_coupling(Dims(4096, 4, 2, 4), (0.03, 0.1, 0.3, 1.0), 5, 0, eps_x=0.025)[0]
    criterion("A4", rep.passed, f"residual slope {rep.trend.slope:.3f} >= 1.3; {time.time() - t0:.1f}s")
    assert rep.passed


def test_a5_existence(criterion):
    t0 = time.time()
    L, d, d_x, eps_x = 4, 2, 4, 0.025
    meds = []
    for m in (1024, 4096, 16384):
        errs = []
        for seed in range(10):
            F = concept.random_concept(L, d_x, d, 1, cx.monomial(1), RngStream(seed, 1))
            P = rnn.init_random(Dims(m, d_x, d, L), RngStream(seed, 0))
            nt = rnn.forward(P, inputs.null_sequence(L, d_x, eps_x))
            wsb = fitting.build_w_star(P, F, nt, 0.1, eps_x, rng=RngStream(seed, 5), eps_c=eps_x)
            Xs = inputs.sample_true_batch(RngStream(seed, 6), 5, L, d_x)
            rep = fitting.verify_existence(P, wsb, F, Xs, 0.1, eps_x)
            errs.append(float(np.median(rep.statistic["per_sample"])))
            del P
        meds.append(float(np.median(errs)))
    ok = meds[0] > meds[1] > meds[2]
    criterion("A5", ok, f"median error {', '.join(f'{v:.3f}' for v in meds)} at m = 1024, 4096, 16384; "
                        f"{time.time() - t0:.1f}s")
    assert ok


def test_a6_end_to_end(criterion):
    t0 = time.time()
    cfg = cli.ExperimentConfig(m=2048, L=4, d=2, d_x=4, p=1, eps=0.2, eps_x=0.1, phi="z", N=512, N_test=2048,
                               lam=1.0, eta=3e-4, T=20_000, eval_every=250, stop_margin=0.15,
                               heldout_slack=0.1).validate()
    rows = [cli.train_point(cfg, 2048, seed)[0] for seed in range(10)]
    passed = sum(r["passed"] for r in rows)
    ok = passed >= 8 and all(r["steps"] <= 200_000 for r in rows)
    worst_tr = max(r["excess_train"] for r in rows)
    worst_te = max(r["excess_test"] for r in rows)
    criterion("A6", ok, f"{passed}/10 seeds within OPT+0.2 (train) and OPT+0.3 (held out); worst excess "
                        f"{worst_tr:.3f} / {worst_te:.3f}; max steps {max(r['steps'] for r in rows)}; "
                        f"{time.time() - t0:.1f}s")
    assert ok


def test_a7_stability_exponents(criterion):
    t0 = time.time()
    dims = Dims(4096, 4, 2, 4)
    adv = lemmas.verify_adversarial_stability(dims, (0.3, 1.0, 3.0), 5, 0, eps_x=0.025)
    t1 = time.time()
    rer = lemmas.verify_rerandomization(dims, (16, 64, 256), 5, 0, eps_x=0.025)
    h, fl = adv[0].trend.slope, adv[1].trend.slope
    hn = rer[0].trend.slope
    ok = abs(h - 1.0) <= 0.2 and abs(fl - 2 / 3) <= 0.2 and abs(hn - 0.5) <= 0.15
    criterion("A7", ok, f"|h'| vs Delta {h:.3f}, |D'|_0 vs Delta {fl:.3f}, |h'| vs N {hn:.3f}; "
                        f"{t1 - t0:.1f}s + {time.time() - t1:.1f}s")
    assert ok


def test_a8_backward_correlation(criterion):
    t0 = time.time()
    rep = lemmas.verify_backward_correlation(Dims(1024, 4, 2, 4), 0.025, 3, 0, m_grid=(1024, 4096, 16384))
    s = rep.trend.slope
    ok = s <= -0.2
    criterion("A8", ok, f"slope of mean |corr| in m {s:.3f} <= -0.2 (values "
                        f"{', '.join(f'{v:.4f}' for v in rep.statistic['mean_abs_corr'])}); "
                        f"{time.time() - t0:.1f}s")
    assert ok


def test_a9_rademacher(criterion):
    t0 = time.time()
    gen = np.random.default_rng(0)
    Ns = [16, 64, 256, 1024]
    vals = []
    for N in Ns:
        X = gen.standard_normal((N, 32))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        vals.append(gz.rademacher_linear(X, 1.0, 2000, RngStream(0, N)).value)
    slope, _ = fit_loglog_slope(Ns, vals)
    rv = []
    for m in (1024, 4096):
        P = rnn.init_random(Dims(m, 4, 2, 4), RngStream(0, 0))
        X = inputs.actual_batch(inputs.sample_true_batch(RngStream(0, 2), 64, 4, 4), 0.025)
        trs = [rnn.forward(P, x) for x in X]
        rv.append(gz.rademacher_rnn_linearized(P, trs, 1.0, 2000, RngStream(0, 1)).value)
        del P, trs
    var = abs(rv[1] - rv[0]) / min(rv)
    ok = abs(slope + 0.5) <= 0.1 and var < 0.2
    criterion("A9", ok, f"linear slope {slope:.3f}; RNN estimate {rv[0]:.4f} vs {rv[1]:.4f} "
                        f"({100 * var:.1f}% apart); {time.time() - t0:.1f}s")
    assert ok


def test_a10_sign_change(criterion):
    t0 = time.time()
    rep = lemmas.verify_sign_change_fact(instances=10 ** 4, rng=0, m_max=12)
    criterion("A10", rep.passed, f"{rep.statistic['checked']} checks, {rep.statistic['violations']} "
                                 f"violations; {time.time() - t0:.1f}s")
    assert rep.passed

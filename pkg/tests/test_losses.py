import numpy as np
import pytest

from rnnlab.losses import get_loss, loss_eval


def test_centered_l2_values():
    G = get_loss("centered-l2")
    y = np.array([0.3, -0.4])
    assert G.value(np.zeros(2), y) == 0.0
    assert G.value(y, y) == pytest.approx(-0.5)


@pytest.mark.parametrize("name", ["centered-l2", "cross-entropy"])
def test_lipschitz_and_bounded_at_zero(name):
    G = get_loss(name)
    g = np.random.default_rng(0)
    n, d = 10_000, 3
    v1, v2 = g.standard_normal((n, d)) * 3, g.standard_normal((n, d)) * 3
    y = g.standard_normal((n, d)) if G.label_kind == "vector" else g.integers(0, d, n)
    gap = np.abs(G.value(v1, y) - G.value(v2, y))
    assert np.all(gap <= np.linalg.norm(v1 - v2, axis=1) + 1e-12)
    z = G.value(np.zeros((n, d)), y)
    assert np.all(np.abs(z) <= 1)


@pytest.mark.parametrize("name", ["centered-l2", "cross-entropy"])
def test_gradient_matches_finite_differences(name):
    G = get_loss(name)
    g = np.random.default_rng(1)
    v = g.standard_normal(4)
    y = g.standard_normal(4) if G.label_kind == "vector" else 2
    val, grad = loss_eval(name, v, y)
    h = 1e-6
    fd = np.array([(G.value(v + h * e, y) - G.value(v - h * e, y)) / (2 * h) for e in np.eye(4)])
    assert np.allclose(grad, fd, atol=1e-6)


def test_convexity_on_segments():
    g = np.random.default_rng(2)
    for name in ("centered-l2", "cross-entropy"):
        G = get_loss(name)
        for _ in range(50):
            a, b = g.standard_normal(3), g.standard_normal(3)
            y = g.standard_normal(3) if G.label_kind == "vector" else 1
            t = g.uniform()
            assert G.value(t * a + (1 - t) * b, y) <= t * G.value(a, y) + (1 - t) * G.value(b, y) + 1e-12


def test_unknown_loss():
    with pytest.raises(ValueError):
        get_loss("hinge")

"""Network evaluation oracles, activation admissibility, test-function
calculus, and stream reproducibility."""

import math

import numpy as np
import pytest

from meanfield_sgd import (ACTIVATION_SUPS, ConfigError, ParticleState,
                           RandomStreams, RejectedInputError, activation,
                           clamped_polynomial, constant_one,
                           default_test_functions, eval_network,
                           gaussian_bump, loss, network_batch_output,
                           network_output, smoothed_coordinate)
from meanfield_sgd.data import Batch
from meanfield_sgd.sgd import Ensemble

TANH = activation("tanh")


class FakeNet:
    def __init__(self, c, w, act=TANH):
        self.c = np.asarray(c, dtype=np.float64)
        self.w = np.asarray(w, dtype=np.float64)
        self.activation = act


def test_network_output_two_unit_oracle():
    # hand value: (tanh(0.5) - tanh(1.0)) / 2
    got = network_output(np.array([1.0, -1.0]), np.array([[0.5], [1.0]]),
                         TANH, np.array([1.0]))
    assert got == pytest.approx(-0.1497384993478776, abs=1e-15)


def test_network_output_logistic_oracle():
    act = activation("logistic")
    got = network_output(np.array([2.0]), np.array([[1.0, -1.0]]),
                         act, np.array([0.5, 0.25]))
    assert got == pytest.approx(1.1243530017715962, abs=1e-15)


def test_eval_network_duck_typed_and_batch_agree():
    rng = np.random.default_rng(5)
    net = FakeNet(rng.standard_normal(7), rng.standard_normal((7, 3)))
    xs = rng.standard_normal((11, 3))
    batch = eval_network(net, xs)
    singles = np.array([eval_network(net, x) for x in xs])
    assert np.allclose(batch, singles, atol=1e-14)
    ens = Ensemble(net.c.copy(), net.w.copy(), TANH, alpha=1.0)
    assert eval_network(ens, xs[0]) == eval_network(net, xs[0])


def test_eval_network_rejects_bad_shapes():
    net = FakeNet([1.0], [[1.0, 2.0]])
    with pytest.raises(RejectedInputError):
        eval_network(net, np.array([1.0, 2.0, 3.0]))
    with pytest.raises(RejectedInputError):
        eval_network(FakeNet(np.empty(0), np.empty((0, 2))), np.array([1.0, 2.0]))


def test_loss_zero_output_weights():
    """With c = 0 the network is identically 0 and the loss is y^2/2."""
    net = FakeNet(np.zeros(4), np.ones((4, 2)))
    batch = Batch(np.zeros((1, 2)), np.array([3.0]))
    assert loss(net, batch) == 4.5
    pairs = [(np.zeros(2), 3.0), (np.zeros(2), 1.0)]
    assert loss(net, pairs) == pytest.approx(0.5 * (9.0 + 1.0) / 2)


def test_loss_is_zero_at_interpolation():
    rng = np.random.default_rng(0)
    net = FakeNet(rng.standard_normal(5), rng.standard_normal((5, 2)))
    xs = rng.standard_normal((6, 2))
    ys = network_batch_output(net.c, net.w, TANH, xs)
    assert loss(net, Batch(xs, ys)) == 0.0


def test_particle_state_validation():
    p = ParticleState(0.5, np.array([1.0, -2.0]))
    assert p.d == 2
    with pytest.raises(RejectedInputError):
        ParticleState(np.nan, np.array([1.0]))
    with pytest.raises(RejectedInputError):
        ParticleState(1.0, np.array([np.inf]))
    with pytest.raises(RejectedInputError):
        ParticleState(1.0, np.array([[1.0, 2.0]]))


# ---------------------------------------------------------------------------
# activations


def test_relu_is_rejected_with_reason():
    with pytest.raises(ConfigError, match="twice"):
        activation("relu")
    with pytest.raises(ConfigError):
        activation("gelu")


@pytest.mark.parametrize("kind", ["tanh", "logistic", "smooth-bump"])
def test_activation_sups_match_dense_grid(kind):
    """Declared suprema of |sigma|, |sigma'|, |sigma''| within 1%."""
    act = activation(kind)
    z = np.linspace(-12.0, 12.0, 200_001)
    for fn, sup in ((act.value, act.sup_value), (act.deriv, act.sup_deriv),
                    (act.deriv2, act.sup_deriv2)):
        observed = float(np.max(np.abs(fn(z))))
        assert observed <= sup * (1.0 + 1e-12)
        assert observed >= sup * 0.99
    assert ACTIVATION_SUPS[kind] == (act.sup_value, act.sup_deriv, act.sup_deriv2)


@pytest.mark.parametrize("kind", ["tanh", "logistic", "smooth-bump"])
def test_activation_derivatives_by_finite_differences(kind):
    act = activation(kind)
    z = np.random.default_rng(3).uniform(-4, 4, size=200)
    h = 1e-6
    fd1 = (act.value(z + h) - act.value(z - h)) / (2 * h)
    fd2 = (act.deriv(z + h) - act.deriv(z - h)) / (2 * h)
    assert np.max(np.abs(fd1 - act.deriv(z))) < 1e-8
    assert np.max(np.abs(fd2 - act.deriv2(z))) < 1e-8


def test_deriv_from_value_shortcut():
    for kind in ("tanh", "logistic"):
        act = activation(kind)
        z = np.linspace(-3, 3, 101)
        assert np.allclose(act.deriv_from_value(act.value(z)), act.deriv(z),
                           atol=1e-14)
    assert activation("smooth-bump").deriv_from_value is None


# ---------------------------------------------------------------------------
# test functions


def _all_test_functions(d=2):
    return [
        smoothed_coordinate("c"),
        smoothed_coordinate(0),
        clamped_polynomial(1, (1,) + (0,) * (d - 1)),
        clamped_polynomial(2, (0, 1)),
        gaussian_bump(0.0, np.zeros(d), scale=1.5),
        gaussian_bump(0.5, np.full(d, -0.25), scale=0.8),
    ]


def test_gradients_and_hessians_by_finite_differences():
    rng = np.random.default_rng(17)
    h = 1e-6
    for f in _all_test_functions():
        for _ in range(20):
            c = rng.uniform(-6, 6, size=3)
            w = rng.uniform(-6, 6, size=(3, 2))
            gc = f.grad_c(c, w)
            fd = (f.value(c + h, w) - f.value(c - h, w)) / (2 * h)
            assert np.max(np.abs(gc - fd)) < 1e-6, f.label
            hc = f.hess_c(c, w)
            fd2 = (f.grad_c(c + h, w) - f.grad_c(c - h, w)) / (2 * h)
            assert np.max(np.abs(hc - fd2)) < 1e-5, f.label
            for j in range(2):
                dw = np.zeros_like(w)
                dw[:, j] = h
                fdw = (f.value(c, w + dw) - f.value(c, w - dw)) / (2 * h)
                assert np.max(np.abs(f.grad_w(c, w)[:, j] - fdw)) < 1e-6, f.label
                fdw2 = (f.grad_w(c, w + dw)[:, j]
                        - f.grad_w(c, w - dw)[:, j]) / (2 * h)
                assert np.max(np.abs(f.hess_w(c, w)[:, j] - fdw2)) < 1e-5, f.label


def test_test_functions_are_bounded():
    rng = np.random.default_rng(8)
    c = rng.uniform(-1e6, 1e6, size=4000)
    w = rng.uniform(-1e6, 1e6, size=(4000, 2))
    for f in _all_test_functions():
        vals = f.value(c, w)
        assert np.all(np.isfinite(vals))
        assert np.max(np.abs(vals)) < 1e3, f.label


def test_clamp_exactly_inactive_inside_window():
    """Inside [-a, a] the smooth clamp returns its argument's own floats."""
    f = smoothed_coordinate("c", a=4.0, b=2.0)
    c = np.array([2.0, -3.999, 0.125])
    w = np.zeros((3, 2))
    assert np.array_equal(f.value(c, w), c)
    assert np.array_equal(f.grad_c(c, w), np.ones(3))
    assert np.array_equal(f.hess_c(c, w), np.zeros(3))
    # outside the window the value saturates below a + b
    far = np.array([1e9, -1e9])
    vals = f.value(far, np.zeros((2, 2)))
    assert np.all(np.abs(vals) <= 6.0)
    assert np.all(np.abs(vals) > 4.0)


def test_clamp_seam_is_c2():
    f = smoothed_coordinate("c", a=4.0, b=2.0)
    w = np.zeros((2, 1))
    h = 1e-7
    for side in (4.0, -4.0):
        lo, hi = np.array([side - h, side + h]), None
        v = f.value(lo, w)
        assert abs(v[1] - v[0]) < 3 * h            # continuous
        g = f.grad_c(lo, w)
        assert abs(g[1] - g[0]) < 1e-5             # C^1 across the seam
        s = f.hess_c(lo, w)
        assert abs(s[1] - s[0]) < 1e-4             # C^2 across the seam


def test_constant_one_everything():
    f = constant_one()
    c = np.array([3.0, -7.0])
    w = np.array([[1.0], [2.0]])
    assert np.array_equal(f.value(c, w), [1.0, 1.0])
    assert not f.grad_c(c, w).any()
    assert not f.grad_w(c, w).any()


def test_clamped_polynomial_matches_plain_product_inside_window():
    f = clamped_polynomial(1, (1, 0))
    c = np.array([0.5, -1.0])
    w = np.array([[2.0, 9.0], [3.0, -4.0]])
    assert np.allclose(f.value(c, w), np.array([1.0, -3.0]))


def test_default_test_functions_labels_distinct():
    fs = default_test_functions(2)
    assert len(fs) == 3
    assert len({f.label for f in fs}) == 3
    c = np.zeros(5)
    w = np.zeros((5, 2))
    for f in fs:
        assert f.value(c, w).shape == (5,)


def test_bump_rejects_wrong_dimension():
    f = gaussian_bump(0.0, np.zeros(3))
    with pytest.raises(RejectedInputError):
        f.value(np.zeros(2), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# random streams


def test_streams_reproducible_and_keyed():
    s = RandomStreams(42)
    a = s.stream(3, purpose="init").standard_normal(8)
    b = RandomStreams(42).stream(3, purpose="init").standard_normal(8)
    assert np.array_equal(a, b)
    c = s.stream(3, purpose="data").standard_normal(8)
    d = s.stream(4, purpose="init").standard_normal(8)
    e = RandomStreams(43).stream(3, purpose="init").standard_normal(8)
    for other in (c, d, e):
        assert not np.array_equal(a, other)


def test_streams_seed_range():
    RandomStreams(0)
    RandomStreams(2 ** 64 - 1)
    with pytest.raises(ConfigError):
        RandomStreams(-1)
    with pytest.raises(ConfigError):
        RandomStreams(2 ** 64)

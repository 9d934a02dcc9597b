"""Reverse-mode tape: forward values, exact gradients, finite differences."""

import numpy as np
import pytest

from crossmae import tape as T


def _leaf(rng, shape):
    t = T.Tape()
    return t, t.leaf(rng.standard_normal(shape))


def test_softmax_rows_normalized_and_shift_invariant():
    rng = np.random.default_rng(0)
    t = T.Tape()
    x = rng.standard_normal((5, 7))
    y = T.softmax(t.leaf(x)).data
    assert np.all(y > 0)
    assert np.max(np.abs(y.sum(axis=-1) - 1.0)) <= 1e-12
    y2 = T.softmax(t.leaf(x + 13.5)).data
    assert np.max(np.abs(y2 - y)) <= 1e-12


def test_layernorm_constant_row_is_zero_before_affine():
    t = T.Tape()
    x = t.leaf(np.full((3, 8), 4.2))
    out = T.layernorm(x, t.constant(np.ones(8)), t.constant(np.zeros(8)))
    assert np.max(np.abs(out.data)) < 1e-6


def test_mse_identity_is_zero_with_zero_grad():
    t = T.Tape()
    a = t.leaf(np.arange(6, dtype=float).reshape(2, 3))
    loss = T.mse(a, t.constant(a.data.copy()))
    t.backward(loss)
    assert loss.data == 0.0
    assert np.array_equal(a.grad, np.zeros((2, 3)))


def test_backward_sum_gives_ones():
    t = T.Tape()
    x = t.leaf(np.random.default_rng(1).standard_normal((4, 3)))
    t.backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones((4, 3)))


def test_backward_mean_square_gives_two_x_over_n():
    t = T.Tape()
    x = t.leaf(np.random.default_rng(2).standard_normal(10))
    t.backward(T.mean(T.mul(x, x)))
    assert np.max(np.abs(x.grad - 2.0 * x.data / 10.0)) < 1e-12


def test_backward_requires_scalar_and_same_tape():
    t = T.Tape()
    x = t.leaf(np.ones((2, 2)))
    with pytest.raises(ValueError):
        t.backward(T.add(x, x))
    other = T.Tape()
    with pytest.raises(ValueError):
        T.add(x, other.leaf(np.ones((2, 2))))
    with pytest.raises(ValueError):
        other.backward(T.mean(x))


def test_shape_mismatch_rejected():
    t = T.Tape()
    with pytest.raises(ValueError):
        T.add(t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 2))))
    with pytest.raises(ValueError):
        T.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3))))
    with pytest.raises(ValueError):
        T.mse(t.leaf(np.ones(3)), t.constant(np.ones(4)))


def test_bias_row_broadcast_gradient():
    t = T.Tape()
    x = t.leaf(np.random.default_rng(3).standard_normal((4, 5)))
    b = t.leaf(np.random.default_rng(4).standard_normal(5))
    t.backward(T.mean(T.mul(T.add(x, b), T.add(x, b))))
    assert b.grad.shape == (5,)
    assert np.max(np.abs(b.grad - 2.0 * (x.data + b.data).sum(axis=0) / 20.0)) < 1e-12


PRIMITIVES = {
    "add": lambda t, p: T.mean(T.add(p["a"], p["b"])),
    "mul": lambda t, p: T.mean(T.mul(p["a"], p["b"])),
    "matmul": lambda t, p: T.mean(T.matmul(p["a"], p["m"])),
    "transpose": lambda t, p: T.mean(T.mul(T.transpose(p["a"]), T.transpose(p["a"]))),
    "slice": lambda t, p: T.mean(T.slice_(p["a"], (slice(1, 3), slice(None)))),
    "concat": lambda t, p: T.mean(T.concat([p["a"], p["b"]], axis=0)),
    "sum": lambda t, p: T.sum_(T.mul(p["a"], p["a"])),
    "scale": lambda t, p: T.mean(T.scale(p["a"], 2.5)),
    "gelu": lambda t, p: T.mean(T.gelu(p["a"])),
    "softmax": lambda t, p: T.mean(T.mul(T.softmax(p["a"]), p["b"])),
    "log_softmax": lambda t, p: T.mean(T.mul(T.log_softmax(p["a"]), p["b"])),
    "layernorm": lambda t, p: T.mean(T.layernorm(p["a"], p["g"], p["c"])),
    "mse": lambda t, p: T.mse(p["a"], p["b"]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_each_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(17)
    params = {"a": rng.standard_normal((4, 5)), "b": rng.standard_normal((4, 5)),
              "m": rng.standard_normal((5, 3)), "g": rng.standard_normal(5) + 2.0,
              "c": rng.standard_normal(5)}

    def build(leaves):
        t = next(iter(leaves.values())).tape
        return PRIMITIVES[name](t, leaves)

    err = T.finite_diff_check(build, params, h=1e-4)
    assert err < 1e-5, f"{name}: {err:.2e}"


def test_three_layer_composition_matches_finite_differences():
    rng = np.random.default_rng(5)
    params = {"w1": rng.standard_normal((6, 8)), "b1": rng.standard_normal(8),
              "w2": rng.standard_normal((8, 8)), "g": np.abs(rng.standard_normal(8)) + 0.5,
              "c": rng.standard_normal(8), "w3": rng.standard_normal((8, 2))}
    x = rng.standard_normal((5, 6))
    target = rng.standard_normal((5, 2))

    def build(p):
        t = p["w1"].tape
        h1 = T.gelu(T.add(T.matmul(t.constant(x), p["w1"]), p["b1"]))
        h2 = T.layernorm(T.matmul(h1, p["w2"]), p["g"], p["c"])
        return T.mse(T.matmul(T.softmax(h2), p["w3"]), t.constant(target))

    assert T.finite_diff_check(build, params, h=1e-4) < 1e-3


def test_finite_diff_quadratic_and_constant():
    def quad(p):
        return T.sum_(T.mul(p["x"], p["x"]))

    assert T.finite_diff_check(quad, {"x": np.array([1.0, -2.0, 0.5])}, h=1e-4) < 1e-8

    def const(p):
        return T.scale(T.sum_(T.mul(p["x"], p["x"].tape.constant(np.zeros(3)))), 1.0)

    assert T.finite_diff_check(const, {"x": np.array([1.0, 2.0, 3.0])}, h=1e-4) == 0.0


def test_backward_deterministic():
    def run():
        t = T.Tape()
        x = t.leaf(np.linspace(-2, 2, 12).reshape(3, 4))
        w = t.leaf(np.linspace(0.5, 1.5, 16).reshape(4, 4))
        loss = T.mean(T.gelu(T.matmul(T.softmax(x), w)))
        t.backward(loss)
        return x.grad.copy(), w.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])


def test_grad_accumulates_across_reuse():
    t = T.Tape()
    x = t.leaf(np.array([3.0]))
    y = T.add(T.mul(x, x), x)  # d/dx (x^2 + x) = 2x + 1
    t.backward(T.sum_(y))
    assert np.allclose(x.grad, [7.0])

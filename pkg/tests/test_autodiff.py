import numpy as np
import pytest

from cbnav import autodiff as ad
from cbnav.autodiff import Tape, Tensor


def finite_diff(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function of an ndarray."""
    g = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return g.reshape(x.shape)


def test_hinge_relu_values():
    out = ad.hinge_relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_matmul_identity():
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    out = ad.matmul(Tensor(np.eye(3)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_softmax_symmetry():
    out = ad.softmax_lastdim(Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=1e-6)


def test_backward_sum_gives_ones():
    x = Tensor([1.0, -2.0, 3.0, 0.5])
    with Tape() as tape:
        loss = ad.sum_(x)
        tape.backward(loss)
    np.testing.assert_array_equal(tape.grad(x), np.ones(4, dtype=np.float32))


def test_backward_mse_matches_finite_differences():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 2)).astype(np.float32))
    x = Tensor(rng.normal(size=(2, 1)).astype(np.float32))
    y = Tensor(rng.normal(size=(3, 1)).astype(np.float32))

    with Tape() as tape:
        loss = ad.mse(ad.matmul(w, x), y)
        tape.backward(loss)
    analytic = tape.grad(w)

    def f(wd):
        return float(np.mean((wd.astype(np.float64) @ x.data - y.data) ** 2))

    numeric = finite_diff(f, w.data.copy())
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    assert rel.max() < 1e-4


def test_unreachable_leaf_has_zero_grad():
    x = Tensor([1.0, 2.0])
    z = Tensor([5.0])
    with Tape() as tape:
        loss = ad.mean(ad.mul(x, x))
        tape.backward(loss)
    np.testing.assert_array_equal(tape.grad(z), [0.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        y = ad.add(x, x)
        with pytest.raises(ad.ShapeError):
            tape.backward(y)


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
    grads = []
    for _ in range(2):
        with Tape() as tape:
            y = ad.mean(ad.gelu(ad.matmul(x, x)))
            tape.backward(y)
        grads.append(tape.grad(x).copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_grad_check_square():
    err = ad.grad_check(lambda t: ad.mean(ad.mul(t, t)), Tensor([3.0]), eps=1e-3)
    assert err < 1e-5


def test_grad_check_constant():
    c = Tensor([1.0])
    err = ad.grad_check(lambda t: ad.mean(c), Tensor([3.0]), eps=1e-3)
    assert err == 0.0


def test_grad_check_two_layer_net():
    rng = np.random.default_rng(7)
    w1 = Tensor(rng.normal(size=(5, 8)).astype(np.float32))
    b1 = Tensor(np.zeros(8, dtype=np.float32))
    w2 = Tensor(rng.normal(size=(8, 1)).astype(np.float32))
    b2 = Tensor(np.zeros(1, dtype=np.float32))
    # keep pre-activations away from relu kinks
    x = Tensor(rng.normal(size=(3, 5)).astype(np.float32) + 2.0)

    def f(t):
        h = ad.relu(ad.embed_linear(t, w1, b1))
        return ad.mean(ad.embed_linear(h, w2, b2))

    assert ad.grad_check(f, x, eps=1e-3) < 1e-4


def test_shape_error_names_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_nonfinite_output_raises():
    big = Tensor(np.full(3, 3e38, dtype=np.float32))
    with pytest.raises(ad.NumericalError):
        ad.add(big, big)


def test_causal_mask_fill_blocks_future():
    rng = np.random.default_rng(1)
    base = rng.normal(size=(4, 4)).astype(np.float32)
    perturbed = base.copy()
    perturbed[:, 3] += 5.0  # column 3 only feeds rows >= 3
    a = ad.softmax_lastdim(ad.causal_mask_fill(Tensor(base)))
    b = ad.softmax_lastdim(ad.causal_mask_fill(Tensor(perturbed)))
    np.testing.assert_allclose(a.data[:3], b.data[:3], atol=1e-6)


def _random_op_case(kind, rng):
    """Build (f, x) for a grad check of one op at a random point.

    Points are nudged away from relu/abs/hinge kinks so central
    differences are valid.
    """
    def away(x):
        x = x.astype(np.float32)
        x[np.abs(x) < 0.05] += 0.1
        return x

    if kind in ("relu", "hinge_relu", "abs"):
        x = Tensor(away(rng.normal(size=(3, 4))))
        return lambda t: ad.mean(ad.op_apply(kind, t)), x
    if kind == "gelu":
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        return lambda t: ad.mean(ad.gelu(t)), x
    if kind in ("add", "sub", "mul"):
        other = Tensor(rng.normal(size=(4,)).astype(np.float32))
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        return lambda t: ad.mean(ad.op_apply(kind, t, other)), x
    if kind == "scale":
        x = Tensor(rng.normal(size=(5,)).astype(np.float32))
        return lambda t: ad.mean(ad.scale(t, -1.7)), x
    if kind == "matmul":
        other = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
        x = Tensor(rng.normal(size=(2, 4)).astype(np.float32))
        return lambda t: ad.mean(ad.matmul(t, other)), x
    if kind == "embed_linear":
        w = Tensor(rng.normal(size=(4, 6)).astype(np.float32))
        b = Tensor(rng.normal(size=(6,)).astype(np.float32))
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        return lambda t: ad.mean(ad.embed_linear(t, w, b)), x
    if kind == "softmax_lastdim":
        x = Tensor(rng.normal(size=(3, 5)).astype(np.float32))
        w = Tensor(rng.normal(size=(5,)).astype(np.float32))
        return lambda t: ad.mean(ad.mul(ad.softmax_lastdim(t), w)), x
    if kind == "layernorm":
        g = Tensor(rng.normal(size=(6,)).astype(np.float32) + 1.0)
        b = Tensor(rng.normal(size=(6,)).astype(np.float32))
        w = Tensor(rng.normal(size=(6,)).astype(np.float32))
        x = Tensor(rng.normal(size=(2, 6)).astype(np.float32))
        return lambda t: ad.mean(ad.mul(ad.layernorm(t, g, b), w)), x
    if kind == "concat":
        other = Tensor(rng.normal(size=(3, 2)).astype(np.float32))
        w = Tensor(rng.normal(size=(6,)).astype(np.float32))
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        return lambda t: ad.mean(ad.mul(ad.concat((t, other), axis=1), w)), x
    if kind == "slice":
        x = Tensor(rng.normal(size=(4, 5)).astype(np.float32))
        w = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
        key = (slice(1, 3), slice(0, 3))
        return lambda t: ad.mean(ad.mul(ad.slice_(t, key), w)), x
    if kind == "reshape":
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        w = Tensor(rng.normal(size=(12,)).astype(np.float32))
        return lambda t: ad.mean(ad.mul(ad.reshape(t, (12,)), w)), x
    if kind == "transpose":
        x = Tensor(rng.normal(size=(2, 3, 4)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 3, 2)).astype(np.float32))
        return lambda t: ad.mean(ad.mul(ad.transpose(t, (2, 1, 0)), w)), x
    if kind == "causal_mask_fill":
        x = Tensor(rng.normal(size=(2, 4, 4)).astype(np.float32))
        return lambda t: ad.mean(ad.softmax_lastdim(ad.causal_mask_fill(t))), x
    if kind == "mse":
        y = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        return lambda t: ad.mse(t, y), x
    if kind == "l1":
        y = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        x = Tensor(away(rng.normal(size=(3, 4)) + y.data))
        return lambda t: ad.l1(t, y), x
    if kind == "mean":
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        w = Tensor(rng.normal(size=(3,)).astype(np.float32))
        return lambda t: ad.mean(ad.mul(ad.mean(t, axis=1), w)), x
    if kind == "sum":
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        return lambda t: ad.scale(ad.sum_(t), 0.25), x
    raise AssertionError(f"no case for {kind}")


@pytest.mark.parametrize("kind", ad.op_kinds())
def test_every_op_grad_checks(kind):
    for seed in range(5):
        f, x = _random_op_case(kind, np.random.default_rng(100 + seed))
        assert ad.grad_check(f, x, eps=1e-3) < 1e-4, f"{kind} seed {seed}"


def test_op_apply_unknown_kind():
    with pytest.raises(ad.AutodiffError):
        ad.op_apply("conv2d", Tensor([1.0]))

"""Gradient checks for the autodiff engine.

Every primitive's analytic gradient is compared against central finite
differences (the independent oracle); second-order behaviour is checked
against hand-differentiated expressions.
"""

import numpy as np
import pytest

from oxyrecon import tensorad as ta
from oxyrecon.tensorad import Tape, Tensor, grad


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at ndarray x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_op(op, shapes, seed, scalarize=lambda t: ta.tsum(ta.mul(t, t)), rtol=1e-6):
    """Compare analytic grads of sum(op(xs)^2) with finite differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(-2.0, 2.0, s) for s in shapes]

    def run(arrs):
        xs = [Tensor(a, requires_grad=True) for a in arrs]
        with Tape():
            y = scalarize(op(*xs))
            gs = grad(y, xs)
        return y.item(), [g.data for g in gs]

    _, analytic = run(arrays)
    for k in range(len(arrays)):
        def f_k(xk, k=k):
            arrs = [a.copy() for a in arrays]
            arrs[k] = xk
            xs = [Tensor(a) for a in arrs]
            return scalarize(op(*xs)).item()

        numeric = fd_grad(f_k, arrays[k].copy())
        denom = np.maximum(np.abs(numeric), 1e-8)
        assert np.max(np.abs(analytic[k] - numeric) / denom) < rtol, f"op {op} input {k}"


BINARY_OPS = [ta.add, ta.sub, ta.mul, ta.div]


@pytest.mark.parametrize("op", BINARY_OPS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_binary_elementwise_grads(op, seed):
    check_op(op, [(3, 4), (3, 4)], seed)


@pytest.mark.parametrize("op", [ta.add, ta.mul])
def test_broadcast_size1_grads(op):
    check_op(op, [(3, 4), (1, 4)], seed=7)
    check_op(op, [(3, 1), (3, 4)], seed=8)


def test_broadcast_beyond_size1_rejected():
    with pytest.raises(ta.ShapeError):
        ta.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))))


@pytest.mark.parametrize(
    "op", [ta.tanh, ta.sigmoid, ta.softplus, ta.square, ta.softmax, ta.neg]
)
@pytest.mark.parametrize("seed", [3, 4])
def test_unary_grads(op, seed):
    check_op(op, [(2, 5)], seed)


def test_relu_grad_away_from_kink():
    # shift inputs away from 0 so the FD oracle is valid
    rng = np.random.default_rng(5)
    x = rng.uniform(0.5, 2.0, (3, 3)) * rng.choice([-1.0, 1.0], (3, 3))
    xs = Tensor(x, requires_grad=True)
    with Tape():
        y = ta.tsum(ta.square(ta.relu(xs)))
        (g,) = grad(y, [xs])
    numeric = fd_grad(lambda a: float(np.sum(np.maximum(a, 0) ** 2)), x.copy())
    assert np.allclose(g.data, numeric, rtol=1e-6, atol=1e-9)


def test_sqrt_grad():
    rng = np.random.default_rng(6)
    x = rng.uniform(0.5, 3.0, (4,))
    xs = Tensor(x, requires_grad=True)
    with Tape():
        y = ta.tsum(ta.sqrt(xs))
        (g,) = grad(y, [xs])
    assert np.allclose(g.data, 0.5 / np.sqrt(x), rtol=1e-10)


def test_matmul_grad():
    check_op(ta.matmul, [(3, 4), (4, 2)], seed=9)


def test_concat_slice_reshape_grads():
    check_op(lambda a, b: ta.concat([a, b], axis=1), [(2, 3), (2, 2)], seed=10)
    check_op(lambda a: a[1:, :2], [(3, 4)], seed=11)
    check_op(lambda a: ta.reshape(a, (6,)), [(2, 3)], seed=12)


def test_gather_scatter_grads():
    idx = np.array([0, 2, 2, 1])
    check_op(lambda a: ta.gather_rows(a, idx), [(3, 2)], seed=13)
    check_op(lambda a: ta.scatter_rows(a, idx, 5), [(4, 2)], seed=14)


def test_sum_mean_variance_grads():
    check_op(lambda a: ta.tsum(a, axis=0), [(3, 4)], seed=15)
    check_op(lambda a: ta.tmean(a, axis=1, keepdims=True), [(3, 4)], seed=16)
    check_op(ta.variance, [(6,)], seed=17, scalarize=lambda t: t)


def test_forward_values():
    assert ta.tmean(Tensor([1.0, 2.0, 3.0])).item() == 2.0
    assert ta.variance(Tensor([1.0, 2.0, 3.0])).item() == pytest.approx(2.0 / 3.0, abs=1e-15)
    assert np.allclose(ta.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_grad_simple_square():
    x = Tensor(3.0, requires_grad=True)
    with Tape():
        y = ta.mul(x, x)
        (g,) = grad(y, [x])
    assert g.item() == 6.0


def test_grad_of_sum_is_ones():
    x = Tensor(np.arange(5.0), requires_grad=True)
    with Tape():
        (g,) = grad(ta.tsum(x), [x])
    assert np.array_equal(g.data, np.ones(5))


def test_unreachable_wrt_is_zero():
    x = Tensor(2.0, requires_grad=True)
    z = Tensor(5.0, requires_grad=True)
    with Tape():
        y = ta.mul(x, x)
        gz = grad(y, [z])[0]
    assert gz.data == 0.0


def test_non_scalar_output_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = ta.mul(x, x)
        with pytest.raises(ta.GradError):
            grad(y, [x])


def test_double_backward_spec_example():
    # y = w*x with w=2, x=1: dy/dx = w; z = (dy/dx)^2; dz/dw = 2*w = 4
    w = Tensor(2.0, requires_grad=True)
    x = Tensor(1.0, requires_grad=True)
    with Tape():
        y = ta.mul(w, x)
        (dy_dx,) = grad(y, [x], create_graph=True)
        z = ta.square(dy_dx)
        (dz_dw,) = grad(z, [w])
    assert dz_dw.item() == pytest.approx(4.0, abs=1e-12)


def test_second_derivative_of_cube():
    # d2/dx2 of x^3 at x=2 is 12
    x = Tensor(2.0, requires_grad=True)
    with Tape():
        y = ta.mul(ta.mul(x, x), x)
        (g1,) = grad(y, [x], create_graph=True)
        (g2,) = grad(g1, [x])
    assert g2.item() == pytest.approx(12.0, abs=1e-6)


def test_second_derivative_of_tanh():
    # d2/dx2 tanh = -2 tanh (1 - tanh^2)
    for v in (0.3, -1.2, 0.9):
        x = Tensor(v, requires_grad=True)
        with Tape():
            y = ta.tanh(x)
            (g1,) = grad(y, [x], create_graph=True)
            (g2,) = grad(g1, [x])
        t = np.tanh(v)
        assert g2.item() == pytest.approx(-2 * t * (1 - t * t), rel=1e-10)


def test_grad_of_variance_of_grads():
    # R = var_pop(dy_i/dx_i) for y_i = a * x_i^2: g_i = 2 a x_i,
    # R = 4 a^2 var(x); dR/da = 8 a var(x).
    rng = np.random.default_rng(21)
    xv = rng.uniform(-1, 1, 5)
    a = Tensor(1.5, requires_grad=True)
    xs = Tensor(xv, requires_grad=True)
    with Tape():
        y = ta.mul(ta.square(xs), ta.reshape(a, (1,)))
        gs = []
        for i in range(5):
            (gi,) = grad(y[i], [xs], create_graph=True)
            gs.append(gi[i : i + 1])
        r = ta.variance(ta.concat(gs))
        (dr_da,) = grad(r, [a])
    var_x = np.var(xv)
    assert r.item() == pytest.approx(4 * 1.5**2 * var_x, rel=1e-10)
    assert dr_da.item() == pytest.approx(8 * 1.5 * var_x, rel=1e-10)


def test_tape_determinism_bitwise():
    rng = np.random.default_rng(22)
    xv = rng.standard_normal((4, 3))
    wv = rng.standard_normal((3, 2))

    def run():
        x = Tensor(xv.copy(), requires_grad=True)
        w = Tensor(wv.copy(), requires_grad=True)
        with Tape():
            y = ta.tsum(ta.tanh(ta.matmul(x, w)))
            gx, gw = grad(y, [x, w])
        return y.item(), gx.data.tobytes(), gw.data.tobytes()

    assert run() == run()


def test_checkpoint_roundtrip(tmp_path):
    params = {
        "w": Tensor(np.arange(6.0).reshape(2, 3)),
        "b": Tensor(np.array([1.5])),
    }
    ta.save_params(tmp_path / "ckpt", params, extra={"note": 7})
    loaded, extra = ta.load_params(tmp_path / "ckpt")
    assert extra == {"note": 7}
    assert np.array_equal(loaded["w"].data, params["w"].data)
    assert np.array_equal(loaded["b"].data, params["b"].data)

import numpy as np
import pytest

from patchfm import tensor as T
from patchfm.errors import MaskError, NumericError, ShapeError
from patchfm.tensor import Tensor, backward


def fd_grad(fn, x, h=1e-6):
    """Central-difference gradient of scalar fn w.r.t. a numpy array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def test_elementwise_examples():
    assert T.sigmoid(Tensor([0.0])).data == pytest.approx([0.5])
    x = np.array([-3.7, 0.0, 12.5])
    assert np.allclose(T.sinh(T.asinh(Tensor(x))).data, x, atol=1e-12)
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(eye, m).data, m.data)
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    # hand multiplication
    assert np.array_equal(T.matmul(m, b).data, [[19.0, 22.0], [43.0, 50.0]])
    ones_row = Tensor(np.ones((1, 3)))
    ones_col = Tensor(np.ones((3, 1)))
    assert np.array_equal(T.matmul(ones_row, ones_col).data, [[3.0]])


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    assert np.allclose(T.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax_lastdim(Tensor([0.0, 0.0, 0.0]), keep=np.array([True, True, False]))
    assert np.array_equal(out.data, [0.5, 0.5, 0.0])  # masked entry exactly 0
    # closed form: softmax([ln2, 0]) = [2/3, 1/3]
    out = T.softmax_lastdim(Tensor([np.log(2.0), 0.0]))
    assert np.allclose(out.data, [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_fully_masked_row():
    with pytest.raises(MaskError):
        T.softmax_lastdim(Tensor(np.zeros((2, 3))), keep=np.array([[True, True, True], [False, False, False]]))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(50):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        x = Tensor(rng.uniform(-2, 2, size=shape))
        keep = rng.random(shape) < 0.7
        keep[..., 0] = True  # at least one kept per row
        s = T.softmax_lastdim(x, keep=keep)
        assert np.allclose(s.data.sum(-1), 1.0, atol=1e-12)
        assert np.all(s.data[~keep] == 0.0)


def test_layer_norm_examples():
    g1 = Tensor(np.ones(4))
    b0 = Tensor(np.zeros(4))
    out = T.layer_norm(Tensor([5.0, 5.0, 5.0, 5.0]), g1, b0, eps=1e-5)
    assert np.allclose(out.data, 0.0, atol=1e-6)
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    assert np.allclose(out.data, [1.0, -1.0], atol=1e-12)
    out = T.layer_norm(
        Tensor([3.0, 1.0, 4.0]), Tensor(np.zeros(3)), Tensor(np.full(3, 7.0)), eps=1e-5
    )
    assert np.array_equal(out.data, [7.0, 7.0, 7.0])


def test_asinh_sinh_inverse_pair():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1e3, 1e3, size=500)
    assert np.allclose(np.sinh(np.arcsinh(x)), x, rtol=1e-12)
    rt = T.asinh(T.sinh(Tensor(x / 100.0))).data  # sinh overflows past ~700
    assert np.allclose(rt, x / 100.0, rtol=1e-12)


def test_backward_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    root = T.tensor_sum(T.mul(x, x))
    backward(root)
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])

    z = Tensor(0.0, requires_grad=True)
    backward(T.sigmoid(z))
    assert z.grad == pytest.approx(0.25)


def test_backward_accumulates_and_resets():
    x = Tensor([1.0, 2.0], requires_grad=True)

    def build():
        return T.tensor_sum(T.mul(x, x))

    backward(build())
    first = x.grad.copy()
    backward(build())
    assert np.array_equal(x.grad, 2 * first)
    x.zero_grad()
    backward(build())
    assert np.array_equal(x.grad, first)


def test_backward_non_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(T.mul(x, x))


def test_div_by_exact_zero():
    with pytest.raises(NumericError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_binary_shape_mismatch():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_no_new_shape_broadcasting():
    # (3,1) + (1,4) would create (3,4): rejected
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((3, 1))), Tensor(np.ones((1, 4))))
    # bias-style broadcast is allowed
    out = T.add(Tensor(np.ones((5, 4))), Tensor(np.ones(4)))
    assert out.shape == (5, 4)
    # trailing singleton broadcast is allowed
    out = T.sub(Tensor(np.ones((5, 4))), Tensor(np.ones((5, 1))))
    assert out.shape == (5, 4)


def test_broadcast_gradients():
    a = Tensor(np.random.default_rng(0).normal(size=(5, 4)), requires_grad=True)
    b = Tensor(np.random.default_rng(1).normal(size=4), requires_grad=True)
    backward(T.tensor_sum(T.mul(a, b)))
    assert b.grad.shape == (4,)
    assert np.allclose(b.grad, a.data.sum(0))
    assert np.allclose(a.grad, np.broadcast_to(b.data, (5, 4)))


# -- property-style finite-difference sweep over every primitive ------------

UNARY_DOMAINS = {
    "neg": (-2.0, 2.0),
    "exp": (-2.0, 2.0),
    "log": (0.2, 2.0),
    "sqrt": (0.2, 2.0),
    "sigmoid": (-2.0, 2.0),
    "gelu": (-2.0, 2.0),
    "asinh": (-2.0, 2.0),
    "sinh": (-2.0, 2.0),
    "abs": (-2.0, 2.0),  # points near the kink are filtered below
}


def _random_shape(rng):
    return tuple(rng.integers(1, 5, size=rng.integers(1, 4)))


def test_unary_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    checked = 0
    for kind, (lo, hi) in UNARY_DOMAINS.items():
        for _ in range(12):
            shape = _random_shape(rng)
            x = rng.uniform(lo, hi, size=shape)
            if kind == "abs":
                x = np.where(np.abs(x) < 0.05, 0.1, x)
            xt = Tensor(x, requires_grad=True)
            backward(T.tensor_sum(T.elementwise(kind, xt)))

            def fn(arr, kind=kind):
                with T.no_grad():
                    return float(T.tensor_sum(T.elementwise(kind, Tensor(arr))).data)

            num = fd_grad(fn, x.copy())
            rel = np.abs(xt.grad - num) / np.maximum(1.0, np.abs(xt.grad))
            assert rel.max() < 1e-4, f"{kind} shape {shape}: {rel.max()}"
            checked += 1
    assert checked >= 100


def test_binary_gradients_match_finite_differences():
    rng = np.random.default_rng(43)
    cases = 0
    for kind in ["add", "sub", "mul", "div"]:
        for _ in range(10):
            shape = _random_shape(rng)
            a = rng.uniform(-2, 2, size=shape)
            b = rng.uniform(-2, 2, size=shape)
            if kind == "div":
                b = np.where(np.abs(b) < 0.3, 0.5, b)
            at = Tensor(a, requires_grad=True)
            bt = Tensor(b, requires_grad=True)
            backward(T.tensor_sum(T.elementwise(kind, at, bt)))

            def fa(arr):
                with T.no_grad():
                    return float(T.tensor_sum(T.elementwise(kind, Tensor(arr), Tensor(b))).data)

            def fb(arr):
                with T.no_grad():
                    return float(T.tensor_sum(T.elementwise(kind, Tensor(a), Tensor(arr))).data)

            for t, fn, x in [(at, fa, a), (bt, fb, b)]:
                num = fd_grad(fn, x.copy())
                rel = np.abs(t.grad - num) / np.maximum(1.0, np.abs(t.grad))
                assert rel.max() < 1e-4, f"{kind}: {rel.max()}"
            cases += 1
    assert cases >= 40


@pytest.mark.parametrize("shapes", [((2, 3), (3, 4)), ((4, 2, 3), (4, 3, 2)), ((3, 5, 2), (2, 2))])
def test_matmul_gradients_match_finite_differences(shapes):
    rng = np.random.default_rng(44)
    sa, sb = shapes
    a = rng.uniform(-1, 1, size=sa)
    b = rng.uniform(-1, 1, size=sb)
    at, bt = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    backward(T.tensor_sum(T.matmul(at, bt)))

    def fa(arr):
        with T.no_grad():
            return float(T.tensor_sum(T.matmul(Tensor(arr), Tensor(b))).data)

    def fb(arr):
        with T.no_grad():
            return float(T.tensor_sum(T.matmul(Tensor(a), Tensor(arr))).data)

    assert np.abs(at.grad - fd_grad(fa, a.copy())).max() < 1e-6
    assert np.abs(bt.grad - fd_grad(fb, b.copy())).max() < 1e-6


def test_softmax_and_layernorm_gradients():
    rng = np.random.default_rng(45)
    for _ in range(25):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
        x = rng.uniform(-2, 2, size=shape)
        w = rng.uniform(-1, 1, size=shape)  # fixed projection to a scalar
        xt = Tensor(x, requires_grad=True)
        backward(T.tensor_sum(T.mul(T.softmax_lastdim(xt), Tensor(w))))

        def fn(arr):
            with T.no_grad():
                return float(T.tensor_sum(T.mul(T.softmax_lastdim(Tensor(arr)), Tensor(w))).data)

        num = fd_grad(fn, x.copy())
        rel = np.abs(xt.grad - num) / np.maximum(1.0, np.abs(xt.grad))
        assert rel.max() < 1e-4

    for _ in range(25):
        d = int(rng.integers(2, 6))
        shape = (int(rng.integers(1, 4)), d)
        x = rng.uniform(-2, 2, size=shape)
        gamma = rng.uniform(0.5, 1.5, size=d)
        beta = rng.uniform(-0.5, 0.5, size=d)
        w = rng.uniform(-1, 1, size=shape)
        xt = Tensor(x, requires_grad=True)
        gt = Tensor(gamma, requires_grad=True)
        bt = Tensor(beta, requires_grad=True)
        backward(T.tensor_sum(T.mul(T.layer_norm(xt, gt, bt, eps=1e-5), Tensor(w))))

        def fn_x(arr):
            with T.no_grad():
                return float(T.tensor_sum(T.mul(T.layer_norm(Tensor(arr), Tensor(gamma), Tensor(beta), eps=1e-5), Tensor(w))).data)

        def fn_g(arr):
            with T.no_grad():
                return float(T.tensor_sum(T.mul(T.layer_norm(Tensor(x), Tensor(arr), Tensor(beta), eps=1e-5), Tensor(w))).data)

        for t, fn, arr in [(xt, fn_x, x), (gt, fn_g, gamma)]:
            num = fd_grad(fn, arr.copy())
            rel = np.abs(t.grad - num) / np.maximum(1.0, np.abs(t.grad))
            assert rel.max() < 1e-4


def test_structural_op_gradients():
    rng = np.random.default_rng(46)
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(3, 2, 4))
    xt = Tensor(x, requires_grad=True)
    out = T.tensor_sum(T.mul(T.transpose(T.reshape(xt, (2, 3, 4)), (1, 0, 2)), Tensor(w)))
    backward(out)
    assert np.allclose(xt.grad, np.transpose(w, (1, 0, 2)))

    xt = Tensor(x, requires_grad=True)
    backward(T.tensor_sum(T.tensor_mean(xt, axis=2)))
    assert np.allclose(xt.grad, 1.0 / 4)


def test_determinism_same_graph_twice():
    rng = np.random.default_rng(47)
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)

    def build():
        return T.tensor_sum(T.gelu(T.matmul(x, w)))

    backward(build())
    g1 = (x.grad.copy(), w.grad.copy())
    x.zero_grad()
    w.zero_grad()
    backward(build())
    assert np.array_equal(g1[0], x.grad)
    assert np.array_equal(g1[1], w.grad)


def test_debug_checks_flag():
    T.set_debug_checks(True)
    try:
        with np.errstate(invalid="ignore"), pytest.raises(NumericError):
            T.log(Tensor([-1.0]))
    finally:
        T.set_debug_checks(False)


def test_operator_sugar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    out = ((a * 2.0 + 1.0) / 2.0 - 0.5).sum()
    backward(out)
    assert np.allclose(out.data, 2.0 + 1.0)
    assert np.allclose(a.grad, 1.0)

import numpy as np
import pytest

from graphrom import autodiff as ad
from graphrom.errors import ValidationError


def check_grad(fn, x0, step=1e-6, rtol=1e-5, atol=1e-8):
    """fn maps a flat numpy vector to (tape, scalar Var); compares reverse mode
    against central differences component by component."""
    tape, out, inp = fn(x0)
    ad.backward(tape, out)
    grad = inp.grad.reshape(-1)
    fd = ad.finite_diff_grad(lambda p: fn(p)[1].value, x0, step=step)
    assert np.allclose(grad, fd, rtol=rtol, atol=atol), (grad, fd)


def _scalarize(v):
    return (v * v).sum()


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "tanh", "elu", "exp", "abs"])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    x0 = rng.normal(size=6) + 0.1   # keep |x| away from the abs kink

    def fn(p):
        tape = ad.Tape()
        v = ad.Var(p.reshape(2, 3), tape)
        other = np.array([1.5, -0.5, 2.0])
        y = {
            "add": lambda: v + other,
            "sub": lambda: other - v,
            "mul": lambda: v * other,
            "div": lambda: v / (other + 2.0),
            "tanh": lambda: ad.tanh(v),
            "elu": lambda: ad.elu(v),
            "exp": lambda: ad.exp(v),
            "abs": lambda: ad.absval(v),
        }[op]()
        return tape, _scalarize(y), v

    check_grad(fn, x0)


def test_tanh_derivative_value():
    tape = ad.Tape()
    x = ad.Var(np.array([0.3]), tape)
    y = ad.tanh(x).sum()
    ad.backward(tape, y)
    assert x.grad[0] == pytest.approx(1.0 - np.tanh(0.3) ** 2, rel=1e-14)


def test_elu_continuity_and_value():
    assert ad.elu(np.array([0.0]))[0] == 0.0
    assert ad.elu(np.array([-1.0]))[0] == pytest.approx(np.expm1(-1.0))
    assert ad.elu(np.array([2.0]))[0] == 2.0


def test_abs_subgradient_zero_at_origin():
    tape = ad.Tape()
    x = ad.Var(np.array([0.0, -2.0, 3.0]), tape)
    y = ad.absval(x).sum()
    ad.backward(tape, y)
    assert x.grad.tolist() == [0.0, -1.0, 1.0]


def test_matmul_gradient():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=6)

    def fn(p):
        tape = ad.Tape()
        v = ad.Var(p.reshape(2, 3), tape)
        w = np.arange(12.0).reshape(3, 4)
        return tape, _scalarize(v @ w), v

    check_grad(fn, x0)


def test_matmul_wt_gradient_in_weights():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 2, 3))
    w0 = rng.normal(size=12)

    def fn(p):
        tape = ad.Tape()
        w = ad.Var(p.reshape(4, 3), tape)
        return tape, _scalarize(ad._matmul_wt(x, w)), w

    check_grad(fn, w0)


def test_concat_and_getitem_gradients():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=8)

    def fn(p):
        tape = ad.Tape()
        v = ad.Var(p, tape)
        a = v[:3].reshape(3, 1)
        b = v[3:].reshape(5, 1)
        c = ad.concat([a, b], axis=0)
        return tape, _scalarize(c[1:7]), v

    check_grad(fn, x0)


def test_sum_mean_broadcast_gradients():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=12)

    def fn(p):
        tape = ad.Tape()
        v = ad.Var(p.reshape(3, 4), tape)
        y = (v.mean(axis=0) + v.sum(axis=1, keepdims=True)) * np.array([0.5, 1.0, 2.0, -1.0])
        return tape, _scalarize(y), v

    check_grad(fn, x0)


def test_sparse_matmul_matches_dense(graph9):
    m = graph9.mean_aggregation_matrix()
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 9, 2))
    dense = np.stack([m.toarray() @ x[b] for b in range(4)])
    assert np.allclose(ad.sparse_matmul(m, x), dense, rtol=1e-14)

    x0 = rng.normal(size=9 * 2)

    def fn(p):
        tape = ad.Tape()
        v = ad.Var(p.reshape(9, 2), tape)
        return tape, _scalarize(ad.sparse_matmul(m, v)), v

    check_grad(fn, x0)


def test_gather_scatter_roundtrip_and_gradients(graph9):
    src, dst = graph9.directed_edges()
    rng = np.random.default_rng(6)
    x = rng.normal(size=(9, 3))
    gathered = ad.gather(x, src)
    assert np.array_equal(gathered, x[src])
    summed = ad.scatter_add(gathered, dst, 9)
    deg = graph9.degrees()[:, None]
    assert np.allclose(summed / deg, graph9.mean_aggregation_matrix() @ x, rtol=1e-13)

    x0 = rng.normal(size=9 * 2)

    def fn(p):
        tape = ad.Tape()
        v = ad.Var(p.reshape(9, 2), tape)
        y = ad.scatter_add(ad.gather(v, src), dst, 9)
        return tape, _scalarize(y), v

    check_grad(fn, x0)


def test_numpy_defers_to_var():
    tape = ad.Tape()
    v = ad.Var(np.ones(3), tape)
    out = np.array([1.0, 2.0, 3.0]) - v
    assert isinstance(out, ad.Var)
    assert out.value.tolist() == [0.0, 1.0, 2.0]


def test_backward_rejects_nonscalar_seed():
    tape = ad.Tape()
    v = ad.Var(np.ones(3), tape)
    with pytest.raises(ValidationError, match="scalar"):
        ad.backward(tape, v)


def test_mlp_spec_param_count_and_blocks():
    spec = ad.MlpSpec([6, 50, 80, 100, 80, 50, 3])
    assert spec.param_count() == 24813
    blocks = spec.blocks("dyn")
    assert blocks[0] == ("dyn.layer0.W", (50, 6))
    assert blocks[-1] == ("dyn.layer5.b", (3,))
    total = sum(int(np.prod(s)) for _, s in blocks)
    assert total == spec.param_count()


def test_param_vector_blocks_and_slices():
    pv = ad.ParamVector([("a.W", (2, 3)), ("a.b", (2,))])
    assert pv.size == 8
    pv.set_block("a.W", np.arange(6.0).reshape(2, 3))
    pv.set_block("a.b", [7.0, 8.0])
    assert pv.data.tolist() == [0, 1, 2, 3, 4, 5, 7, 8]
    tape = ad.Tape()
    flat = ad.Var(pv.data, tape)
    w = pv.slice_of(flat, "a.W")
    assert w.value.shape == (2, 3)
    # cached: same node for repeated access
    assert pv.slice_of(flat, "a.W") is w


def test_mlp_forward_identity_output_layer():
    spec = ad.MlpSpec([2, 2], activation="tanh")
    pv = ad.ParamVector(spec.blocks("m"))
    pv.set_block("m.layer0.W", np.eye(2))
    x = np.array([[0.3, -0.7]])
    out = ad.mlp_forward(spec, pv, None, x, "m")
    assert np.array_equal(out, x)     # no activation on the output layer


def test_mlp_gradient_vs_fd():
    spec = ad.MlpSpec([3, 5, 4, 2], activation="tanh")
    pv = ad.ParamVector(spec.blocks("m"))
    rng = np.random.default_rng(7)
    pv.data[:] = rng.normal(scale=0.5, size=pv.size)
    x = rng.normal(size=(4, 3))

    def fn(p):
        tape = ad.Tape()
        pv.data[:] = p
        flat = ad.Var(pv.data, tape)
        return tape, _scalarize(ad.mlp_forward(spec, pv, flat, x, "m")), flat

    for _ in range(100):
        p0 = rng.normal(scale=0.5, size=pv.size)
        tape, out, flat = fn(p0)
        ad.backward(tape, out)
        grad = flat.grad.copy()
        idx = rng.integers(0, pv.size, size=5)
        for i in idx:
            step = 1e-6
            hi, lo = p0.copy(), p0.copy()
            hi[i] += step
            lo[i] -= step
            fd = (fn(hi)[1].value - fn(lo)[1].value) / (2 * step)
            assert abs(grad[i] - fd) <= 1e-5 * abs(fd) + 1e-8


def test_l1_norm_values():
    assert ad.l1_norm(np.array([1.0, -2.0, 3.0])) == 6.0
    tape = ad.Tape()
    v = ad.Var(np.array([1.0, -2.0]), tape)
    y = ad.l1_norm(v)
    ad.backward(tape, y)
    assert y.value == 3.0
    assert v.grad.tolist() == [1.0, -1.0]


def test_glorot_initialization_bounds():
    pv = ad.ParamVector([("m.layer0.W", (50, 20)), ("m.layer0.b", (50,))])
    pv.initialize(np.random.default_rng(0))
    bound = np.sqrt(6.0 / 70)
    w = pv.block("m.layer0.W")
    assert np.abs(w).max() <= bound
    assert w.std() > 0
    assert np.all(pv.block("m.layer0.b") == 0.0)

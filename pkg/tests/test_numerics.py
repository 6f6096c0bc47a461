import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motvla.numerics import (DegenerateRowError, DimensionError, OracleInvalidError, RankError,
                             Tape, Tensor, backward, checkpoint, finite_diff_check, ops)
from motvla.numerics.tensor import record


def _params(rng, **shapes):
    return {k: Tensor(rng.standard_normal(s), requires_grad=True, name=k) for k, s in shapes.items()}


def test_matmul_trivial():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(ops.matmul(eye, Tensor([[3.0], [4.0]])).data, [[3.0], [4.0]])
    np.testing.assert_array_equal(ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_identity_bit_exact():
    a = np.random.default_rng(0).standard_normal((5, 5))
    out = ops.matmul(Tensor(np.eye(5)), Tensor(a)).data
    assert out.tobytes() == a.tobytes()


def test_matmul_shape_error_names_both():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(1)
    p = _params(rng, a=(3, 4), b=(4, 2))
    w = rng.standard_normal((3, 2))
    rep = finite_diff_check(lambda: ops.sum(ops.matmul(p["a"], p["b"]) * w), p, eps=1e-5, tol=1e-6)
    assert rep.passed, rep.summary()


def test_softmax_examples():
    np.testing.assert_array_equal(ops.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    out = ops.softmax_rows(Tensor([[0.0, 5.0]]), allowed=np.array([[True, False]])).data
    assert out[0, 0] == 1.0 and out[0, 1] == 0.0
    out = ops.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data
    np.testing.assert_allclose(out, [[0.09003057, 0.24472847, 0.66524096]], atol=5e-9)


def test_softmax_all_blocked_row():
    with pytest.raises(DegenerateRowError):
        ops.softmax_rows(Tensor(np.zeros((2, 2))), allowed=np.array([[True, False], [False, False]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(m, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, n)) * 10
    allowed = rng.random((m, n)) < 0.6
    allowed[:, 0] = True
    out = ops.softmax_rows(Tensor(x), allowed).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(out[~allowed] == 0.0)
    assert np.all(out >= 0)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(ops.layer_norm(Tensor([1.0, 1.0, 1.0]), one, zero).data, [0, 0, 0])
    out = ops.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0).data
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-15)
    out = ops.layer_norm(Tensor([0.0, 2.0, 4.0]), one, zero, eps=1e-5).data
    np.testing.assert_allclose(out, [-1.2247425750014138, 0.0, 1.2247425750014138], atol=1e-12)


def test_layer_norm_standardises():
    x = np.random.default_rng(2).standard_normal((4, 16)) * 7 + 3
    out = ops.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)


def test_backward_trivial():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(w)
    np.testing.assert_array_equal(backward(tape, loss, {"w": w})["w"], [1, 1, 1])
    w = Tensor(5.0, requires_grad=True)
    with Tape() as tape:
        loss = (w - 3.0) * (w - 3.0)
    assert backward(tape, loss, {"w": w})["w"] == 4.0


def test_backward_unreachable_and_rank():
    w = Tensor([1.0], requires_grad=True)
    u = Tensor([2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(w * 2.0)
        vec = u * 1.0
    g = backward(tape, loss, {"w": w, "u": u})
    np.testing.assert_array_equal(g["u"], [0.0, 0.0])
    with pytest.raises(RankError):
        backward(tape, vec, {"u": u})


OP_CASES = {
    "add_suffix": (lambda p: ops.add(p["x"], p["b"]), dict(x=(3, 4), b=(4,))),
    "mul_keepdims": (lambda p: ops.mul(p["x"], p["c"]), dict(x=(3, 4), c=(3, 1))),
    "div": (lambda p: ops.div(p["x"], ops.add(ops.exp(p["c"]), 1.0)), dict(x=(3, 4), c=(3, 1))),
    "exp_log": (lambda p: ops.log(ops.add(ops.exp(p["x"]), 1.0)), dict(x=(3, 4))),
    "tanh_sigmoid": (lambda p: ops.mul(ops.tanh(p["x"]), ops.sigmoid(p["x"])), dict(x=(3, 4))),
    "gelu": (lambda p: ops.gelu(p["x"]), dict(x=(3, 4))),
    "power": (lambda p: ops.power(ops.add(ops.exp(p["x"]), 0.5), 1.5), dict(x=(3, 4))),
    "batched_matmul": (lambda p: ops.matmul(p["a"], p["b"]), dict(a=(2, 3, 4), b=(2, 4, 5))),
    "shared_matmul": (lambda p: ops.matmul(p["a"], p["w"]), dict(a=(2, 3, 4), w=(4, 5))),
    "reshape_transpose": (lambda p: ops.transpose(ops.reshape(p["a"], (2, 3, 2, 2)), (0, 2, 1, 3)),
                          dict(a=(2, 3, 4))),
    "concat_index": (lambda p: ops.index(ops.concat([p["a"], p["b"]], axis=1), (slice(None), [0, 3, 3])),
                     dict(a=(2, 2), b=(2, 3))),
    "stack": (lambda p: ops.stack([p["a"], p["b"]], axis=1), dict(a=(3, 2), b=(3, 2))),
    "broadcast_to": (lambda p: ops.broadcast_to(p["a"], (3, 4, 2)), dict(a=(3, 1, 2))),
    "mean_axis": (lambda p: ops.mean(p["a"], axis=1), dict(a=(3, 4))),
    "softmax_masked": (lambda p: ops.softmax(p["a"], np.tril(np.ones((4, 4), bool))), dict(a=(2, 4, 4))),
    "log_softmax": (lambda p: ops.log_softmax(p["a"]), dict(a=(3, 5))),
    "layer_norm": (lambda p: ops.layer_norm(p["x"], p["g"], p["b"]), dict(x=(3, 6), g=(6,), b=(6,))),
    "nll": (lambda p: ops.nll_from_logits(p["a"], np.array([0, 4, 2])), dict(a=(3, 5))),
    "bce": (lambda p: ops.bce_with_logits(p["a"], np.array([[0, 1, 1], [1, 0, 0]])), dict(a=(2, 3))),
    "abs": (lambda p: ops.abs(p["a"]), dict(a=(3, 3))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    p = _params(rng, **shapes)
    with Tape():
        probe = fn(p)
    w = rng.standard_normal(probe.shape)
    rep = finite_diff_check(lambda: ops.sum(ops.mul(fn(p), w)), p, eps=1e-5, tol=1e-6)
    assert rep.passed, rep.summary()


def test_bilinear_examples():
    fmap = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 2, 2, 1))
    out = ops.bilinear_sample(fmap, Tensor([[0.5, 1.0, 5.0]]), Tensor([[0.5, 0.0, 5.0]])).data
    np.testing.assert_allclose(out[0, :, 0], [1.5, 1.0, 0.0])


def test_bilinear_continuous_across_boundary():
    rng = np.random.default_rng(3)
    fmap = Tensor(rng.standard_normal((1, 4, 4, 3)))
    lo = ops.bilinear_sample(fmap, Tensor([[1.0 - 1e-12]]), Tensor([[1.3]])).data
    hi = ops.bilinear_sample(fmap, Tensor([[1.0]]), Tensor([[1.3]])).data
    np.testing.assert_allclose(lo, hi, atol=1e-9)


def test_bilinear_gradients():
    rng = np.random.default_rng(4)
    p = {"f": Tensor(rng.standard_normal((2, 5, 6, 3)), requires_grad=True),
         "u": Tensor(rng.uniform(-1.3, 6.2, (2, 7)), requires_grad=True),
         "v": Tensor(rng.uniform(-1.3, 5.2, (2, 7)), requires_grad=True)}
    w = rng.standard_normal((2, 7, 3))
    rep = finite_diff_check(lambda: ops.sum(ops.bilinear_sample(p["f"], p["u"], p["v"]) * w), p, 1e-5, 1e-6)
    assert rep.passed, rep.summary()


def test_finite_diff_quadratic():
    w = {"w": Tensor(3.0, requires_grad=True)}
    rep = finite_diff_check(lambda: w["w"] * w["w"], w, eps=1e-5, tol=1e-9)
    assert rep.passed and abs(rep.params[0].analytic - 6.0) < 1e-12


def _buggy_square(x):
    return record(x.data ** 2, (x,), lambda g: (2.0 * (2.0 * x.data * g),))


def test_finite_diff_detects_mutation():
    w = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    rep = finite_diff_check(lambda: ops.sum(_buggy_square(w["w"])), w, eps=1e-5, tol=1e-4)
    assert not rep.passed


def test_finite_diff_rejects_nondeterminism():
    rng = np.random.default_rng(0)
    w = {"w": Tensor(1.0, requires_grad=True)}
    with pytest.raises(OracleInvalidError):
        finite_diff_check(lambda: w["w"] * rng.standard_normal(), w)


def test_checkpoint_layout(tmp_path):
    tabs = {"a": np.arange(6.0).reshape(2, 3), "s": np.array(2.5)}
    blob = checkpoint.dumps(tabs)
    assert blob[:8] == b"UDVLA01\0"
    # name-len, name, rank, dims
    assert blob[8:12] == (1).to_bytes(4, "little") and blob[12:13] == b"a"
    assert blob[13:17] == (2).to_bytes(4, "little")
    assert blob[17:25] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(blob[25:73], "<f8").tolist() == [0, 1, 2, 3, 4, 5]
    assert blob[-8:] == (2).to_bytes(8, "little")
    checkpoint.save(tmp_path / "x.bin", tabs)
    back = checkpoint.load(tmp_path / "x.bin")
    assert back.keys() == tabs.keys()
    np.testing.assert_array_equal(back["a"], tabs["a"])
    assert back["s"].shape == ()


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((4, 8)))
        w = Tensor(rng.standard_normal((8, 8)))
        return ops.layer_norm(ops.gelu(x @ w), Tensor(np.ones(8)), Tensor(np.zeros(8))).data.tobytes()

    assert run() == run()

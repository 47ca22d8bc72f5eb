import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semimatch import numerics as nx
from semimatch.numerics import Tensor, dump

from conftest import finite_difference, rel_error


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def check_grad(build, *arrays_in, tol=1e-4):
    """Compare the backward pass of ``sum(build(*leaves) * w)`` with central differences."""
    rng = np.random.default_rng(0)
    leaves = [leaf(a) for a in arrays_in]
    out = build(*leaves)
    w = rng.normal(size=out.shape)
    loss = nx.tsum(nx.mul(out, w))
    analytic = nx.grad(loss, leaves)
    for k, a in enumerate(arrays_in):
        x = np.array(a, dtype=np.float64)

        def f():
            args = [Tensor(x) if j == k else Tensor(arrays_in[j]) for j in range(len(arrays_in))]
            with nx.no_grad():
                return float(np.sum(build(*args).data * w))

        numeric = finite_difference(f, x)
        assert rel_error(analytic[k], numeric) < tol, f"input {k}"


def test_matmul_example():
    out = nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    p = nx.softmax(Tensor(np.random.default_rng(0).normal(size=(5, 7)) * 30))
    np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-9)


def test_square_gradient():
    x = leaf(3.0)
    loss = nx.mul(x, x)
    loss.backward()
    assert x.grad == pytest.approx(6.0)


def test_cross_entropy_gradient_vanishes_at_one_hot_optimum():
    logits = leaf([60.0, 0.0, 0.0])
    loss = -nx.tsum(nx.gather(nx.log_softmax(logits), (np.array([0]),)))
    loss.backward()
    assert np.max(np.abs(logits.grad)) < 1e-12


def test_shared_subexpression_accumulates():
    # y = a*b appears twice: same gradient as two independent copies of the subgraph
    a, b = leaf([1.5, -2.0]), leaf([0.5, 3.0])
    y = nx.mul(a, b)
    nx.tsum(nx.add(nx.mul(y, y), y)).backward()
    a2, b2 = leaf([1.5, -2.0]), leaf([0.5, 3.0])
    y1, y2, y3 = nx.mul(a2, b2), nx.mul(a2, b2), nx.mul(a2, b2)
    nx.tsum(nx.add(nx.mul(y1, y2), y3)).backward()
    np.testing.assert_allclose(a.grad, a2.grad)
    np.testing.assert_allclose(b.grad, b2.grad)


def test_five_parameter_network_gradient():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 2))
    target = rng.normal(size=(4,))
    theta = rng.normal(size=5)

    def loss_of(t: Tensor) -> Tensor:
        w1 = nx.reshape(t[0:4], (2, 2))
        hidden = nx.relu(nx.matmul(Tensor(x), w1))
        pred = nx.mul(nx.tsum(hidden, axis=1), t[4])
        diff = nx.sub(pred, Tensor(target))
        return nx.tsum(nx.mul(diff, diff))

    p = leaf(theta)
    loss_of(p).backward()

    def f():
        with nx.no_grad():
            return float(loss_of(Tensor(theta)).data)

    assert rel_error(p.grad, finite_difference(f, theta)) < 1e-4


@pytest.mark.parametrize(
    "name, build, shapes",
    [
        ("add", lambda a, b: nx.add(a, b), [(3, 4), (4,)]),
        ("sub", lambda a, b: nx.sub(a, b), [(3, 1), (3, 4)]),
        ("mul", lambda a, b: nx.mul(a, b), [(2, 3), (2, 3)]),
        ("div", lambda a, b: nx.div(a, b), [(2, 3), (2, 3)]),
        ("exp", lambda a: nx.exp(a), [(3, 3)]),
        ("sqrt", lambda a: nx.sqrt(nx.add(nx.mul(a, a), 1.0)), [(4,)]),
        ("log", lambda a: nx.log(nx.add(nx.mul(a, a), 0.5)), [(4,)]),
        ("matmul", lambda a, b: nx.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
        ("sum", lambda a: nx.tsum(a, axis=1, keepdims=True), [(3, 4)]),
        ("mean", lambda a: nx.mean(a, axis=0), [(3, 4)]),
        ("softmax", lambda a: nx.softmax(a, axis=-1), [(3, 5)]),
        ("log_softmax", lambda a: nx.log_softmax(a, axis=-1), [(3, 5)]),
        ("l2_normalize", lambda a: nx.l2_normalize(a, axis=1), [(2, 3, 4)]),
        ("vector_norm", lambda a: nx.vector_norm(a, axis=-1), [(5, 2)]),
        ("transpose", lambda a: nx.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
        ("reshape", lambda a: nx.reshape(a, (6, 2)), [(3, 4)]),
        ("concat", lambda a, b: nx.concat([a, b], axis=1), [(2, 3), (2, 2)]),
        ("slice", lambda a: a[1:, ::2], [(3, 4)]),
        ("gather", lambda a: nx.gather(a, (np.array([0, 2, 2]), np.array([1, 0, 1]))), [(3, 2)]),
        ("scale_exp", lambda a, g: nx.scale_exp(a, nx.tsum(g)), [(3, 3), (1,)]),
        ("conv2d", lambda x, w, b: nx.conv2d(x, w, nx.reshape(b, (2,)), stride=2, padding=1), [(2, 3, 5, 5), (2, 3, 3, 3), (2,)]),
        ("conv2d_1x1", lambda x, w: nx.conv2d(x, w), [(1, 2, 3, 3), (4, 2, 1, 1)]),
    ],
)
def test_op_gradients(name, build, shapes):
    rng = np.random.default_rng(hash(name) % 2**32)
    inputs = [rng.uniform(0.5, 1.5, size=s) * rng.choice([-1, 1], size=s) for s in shapes]
    if name in ("div",):
        inputs[1] = np.abs(inputs[1]) + 0.5
    check_grad(build, *inputs)


def test_relu_gradient_away_from_kink():
    x = np.array([-1.0, -0.3, 0.4, 2.0])
    check_grad(lambda a: nx.relu(a), x)


def test_grid_sample_gradient():
    rng = np.random.default_rng(2)
    coords = rng.uniform(-0.5, 4.5, size=(1, 3, 3, 2))
    check_grad(lambda a: nx.grid_sample(a, coords), rng.normal(size=(1, 2, 4, 5)))


def test_split_pieces_carry_gradient():
    a = leaf(np.arange(12.0).reshape(4, 3))
    top, bottom = nx.split(a, 2, axis=0)
    nx.tsum(nx.add(nx.mul(top, 2.0), bottom)).backward()
    np.testing.assert_array_equal(a.grad, [[2, 2, 2], [2, 2, 2], [1, 1, 1], [1, 1, 1]])


def test_no_grad_records_nothing():
    a = leaf([1.0, 2.0])
    with nx.no_grad():
        y = nx.mul(a, a)
    assert not y.requires_grad
    assert nx.is_grad_enabled()


def test_detach_stops_gradient():
    a = leaf([1.0, 2.0])
    loss = nx.tsum(nx.mul(a, a.detach()))
    loss.backward()
    np.testing.assert_array_equal(a.grad, [1.0, 2.0])


def test_backward_requires_scalar():
    with pytest.raises(nx.ShapeError):
        nx.mul(leaf([1.0, 2.0]), 2.0).backward()


def test_shape_errors():
    with pytest.raises(nx.ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(nx.ShapeError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(nx.ShapeError):
        nx.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_nonfinite_values_raise():
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        nx.log(Tensor([0.0, 1.0]))
    old = nx.set_finite_checks(False)
    try:
        with np.errstate(divide="ignore"):
            assert np.isinf(nx.log(Tensor([0.0])).data[0])
    finally:
        nx.set_finite_checks(old)


def test_named_leaf_gradients():
    w = Tensor([2.0, 3.0], requires_grad=True, name="w")
    grads = nx.backward(nx.tsum(nx.mul(w, w)))
    np.testing.assert_allclose(grads["w"], [4.0, 6.0])


def test_float32_stays_float32():
    a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    out = nx.softmax(nx.matmul(a, a))
    assert out.dtype == np.float32


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = nx.softmax_array(x)
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.exp(nx.log_softmax_array(x)), p, atol=1e-12)


@given(
    arrays(
        st.sampled_from([np.float32, np.float64, np.uint8, np.int64, np.bool_]),
        st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple),
    )
)
def test_dump_round_trip(arr):
    back = dump.read_tensor(io.BytesIO(dump.tensor_bytes(arr)))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_dump_layout_is_little_endian():
    raw = dump.tensor_bytes(np.array([[1.0, 2.0]], dtype=np.float64))
    assert raw[:4] == b"SMTN"
    assert raw[4:8] == bytes([1, 2, 2, 0])
    assert raw[8:24] == (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
    assert np.frombuffer(raw[24:], dtype="<f8").tolist() == [1.0, 2.0]


def test_archive_round_trip(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b.c": np.array([1, 2], dtype=np.int64)}
    nx.save_archive(tmp_path / "x.smt", tensors)
    back = nx.load_archive(tmp_path / "x.smt")
    assert list(back) == ["a", "b.c"]
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_dump_rejects_corruption(tmp_path):
    with pytest.raises(dump.DumpFormatError):
        dump.read_tensor(io.BytesIO(b"NOPE"))
    with pytest.raises(dump.DumpFormatError):
        dump.read_tensor(io.BytesIO(dump.tensor_bytes(np.ones(4))[:-3]))
    with pytest.raises(dump.DumpFormatError):
        dump.tensor_bytes(np.ones(2, dtype=np.complex128))
    (tmp_path / "bad.smt").write_bytes(b"SMTA\x07\x00\x00\x00\x00")
    with pytest.raises(dump.DumpFormatError):
        nx.load_archive(tmp_path / "bad.smt")


def test_gradient_keeps_leaf_dtype():
    x = Tensor(np.ones((3, 2), np.float32), requires_grad=True)
    c = Tensor(np.full((3, 2), 2.0))
    (nx.tsum(x * c) - c.sum()).backward()
    assert x.grad.dtype == np.float32
    np.testing.assert_array_equal(x.grad, 2.0)

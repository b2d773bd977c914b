import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmfuse import tensor as tn
from gradcheck import check_gradients


def rand(rng, *shape):
    return tn.Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=True)


class TestForward:
    def test_matmul_identity(self):
        a = tn.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        eye = tn.tensor(np.eye(3)[:, :2])
        out = tn.matmul(a, eye)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [4.0, 5.0]])

    def test_silu_values(self):
        assert tn.silu(tn.tensor(0.0)).item() == 0.0
        # silu(1) = 1 * sigmoid(1)
        sig1 = 1.0 / (1.0 + np.exp(-1.0))
        assert tn.silu(tn.tensor(1.0)).item() == pytest.approx(sig1, abs=1e-15)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(0)
        x = tn.Tensor(rng.normal(size=(4, 7)))
        s = tn.softmax(x, axis=1)
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        a = tn.zeros((2, 3))
        b = tn.zeros((4, 3))
        with pytest.raises(tn.ShapeError, match=r"\(2, 3\).*\(4, 3\)"):
            tn.add(a, b)

    def test_trailing_dim_broadcast(self):
        x = tn.tensor([[1.0, 2.0], [3.0, 4.0]])
        bias = tn.tensor([10.0, 20.0])
        np.testing.assert_array_equal((x + bias).data, [[11.0, 22.0], [13.0, 24.0]])

    def test_leading_dim_broadcast_rejected(self):
        x = tn.zeros((2, 3))
        col = tn.zeros((2, 1))
        with pytest.raises(tn.ShapeError):
            tn.add(x, col)

    def test_scalar_broadcast(self):
        x = tn.tensor([1.0, 2.0])
        assert ((x * 2.0) + 1.0).data.tolist() == [3.0, 5.0]

    def test_div_by_zero_raises(self):
        with pytest.raises(tn.NonFiniteError):
            tn.div(tn.tensor([1.0]), tn.tensor([0.0]))

    def test_log_of_negative_raises(self):
        with pytest.raises(tn.NonFiniteError):
            tn.log(tn.tensor([-1.0]))

    def test_forward_deterministic(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 5))
        a = tn.softmax(tn.exp(tn.Tensor(x) * 0.5), axis=0).data
        b = tn.softmax(tn.exp(tn.Tensor(x) * 0.5), axis=0).data
        assert np.array_equal(a, b)


class TestBackward:
    def test_square_sum_gradient(self):
        a = tn.tensor([1.0, 2.0, 3.0], requires_grad=True)
        with tn.record():
            loss = tn.sum(a * a)
        tn.backward(loss)
        np.testing.assert_array_equal(a.grad, [2.0, 4.0, 6.0])

    def test_constant_loss_zero_gradients(self):
        a = tn.tensor([1.0, 2.0], requires_grad=True)
        with tn.record():
            touched = tn.sum(a)  # registered on tape but unused by the loss
            loss = tn.tensor(5.0) * tn.tensor(2.0)
            loss = loss + touched * 0.0
        tn.backward(loss)
        np.testing.assert_array_equal(a.grad, [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        a = tn.tensor([1.0, 2.0], requires_grad=True)
        with tn.record():
            out = a * a
        with pytest.raises(tn.TapeError):
            tn.backward(out)

    def test_tape_single_use(self):
        a = tn.tensor([1.0], requires_grad=True)
        with tn.record():
            loss = tn.sum(a * a)
        tn.backward(loss)
        with pytest.raises(tn.TapeError):
            tn.backward(loss)

    def test_grad_accumulates_across_tapes(self):
        a = tn.tensor([2.0], requires_grad=True)
        for _ in range(3):
            with tn.record():
                loss = tn.sum(a * a)
            tn.backward(loss)
        np.testing.assert_array_equal(a.grad, [12.0])

    def test_gradient_map_returned(self):
        a = tn.tensor([1.0, -1.0], requires_grad=True)
        with tn.record():
            loss = tn.sum(a * 3.0)
        grads = tn.backward(loss)
        np.testing.assert_array_equal(grads[a], [3.0, 3.0])


UNARY_OPS = {
    "exp": tn.exp,
    "log": tn.log,
    "sqrt": tn.sqrt,
    "tanh": tn.tanh,
    "softplus": tn.softplus,
    "silu": tn.silu,
    "sigmoid": tn.sigmoid,
}


class TestGradOracle:
    @pytest.mark.parametrize("name", sorted(UNARY_OPS))
    def test_unary_ops(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        x = rng.uniform(-1.0, 1.0, (3, 4))
        if name in ("log", "sqrt"):
            x = np.abs(x) + 0.5
        p = tn.Tensor(x, requires_grad=True)
        check_gradients(lambda: tn.sum(UNARY_OPS[name](p) * 0.7), [p])

    @pytest.mark.parametrize("op", [tn.add, tn.sub, tn.mul, tn.div])
    def test_binary_ops(self, op):
        rng = np.random.default_rng(11)
        a = rand(rng, 3, 4)
        b = tn.Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True)
        check_gradients(lambda: tn.sum(op(a, b)), [a, b])

    def test_binary_trailing_broadcast_grad(self):
        rng = np.random.default_rng(12)
        a = rand(rng, 3, 4)
        b = rand(rng, 4)
        check_gradients(lambda: tn.sum(tn.mul(a, b) * tn.mul(a, b)), [a, b])

    def test_matmul_chain(self):
        rng = np.random.default_rng(13)
        a, b, c = rand(rng, 3, 3), rand(rng, 3, 3), rand(rng, 3, 3)
        check_gradients(lambda: tn.sum(tn.matmul(tn.matmul(a, b), c)), [a, b, c])

    def test_softmax_logsumexp(self):
        rng = np.random.default_rng(14)
        x = rand(rng, 2, 5)
        check_gradients(lambda: tn.sum(tn.softmax(x, axis=1) * tn.tensor(
            np.arange(10.0).reshape(2, 5))), [x])
        check_gradients(lambda: tn.sum(tn.logsumexp(x, axis=1)), [x])

    def test_reductions(self):
        rng = np.random.default_rng(15)
        x = rand(rng, 2, 3, 4)
        check_gradients(lambda: tn.sum(tn.mean(x, axes=(0, 2)) * tn.tensor([1.0, -2.0, 3.0])), [x])

    def test_concat_slice_scale_rows(self):
        rng = np.random.default_rng(16)
        a, b = rand(rng, 2, 3), rand(rng, 4, 3)
        s = tn.Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)

        def f():
            cat = tn.concat([a, b], axis=0)
            scaled = tn.scale_rows(cat, s)
            return tn.sum(scaled[1:5, :2] * scaled[1:5, :2])

        check_gradients(f, [a, b, s])

    def test_composite_matches_fd(self):
        rng = np.random.default_rng(17)
        w = rand(rng, 4, 4)
        x = rand(rng, 3, 4)

        def f():
            h = tn.tanh(tn.matmul(x, w))
            return tn.mean(tn.silu(h) * tn.exp(h * 0.3))

        err = check_gradients(f, [w, x])
        assert err < 1e-5


class TestThreadIsolation:
    def test_tapes_are_per_thread(self):
        import threading

        errors = []

        def worker(seed):
            try:
                rng = np.random.default_rng(seed)
                p = tn.Tensor(rng.normal(size=(8, 8)), requires_grad=True)
                for _ in range(20):
                    p.zero_grad()
                    with tn.record():
                        loss = tn.sum(tn.tanh(p) * tn.tanh(p))
                    tn.backward(loss)
                    expected = 2.0 * np.tanh(p.data) * (1.0 - np.tanh(p.data) ** 2)
                    np.testing.assert_allclose(p.grad, expected, atol=1e-12)
            except Exception as exc:  # noqa: BLE001 - surfacing to the main thread
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors, errors


class TestStructural:
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
    @settings(max_examples=25, deadline=None)
    def test_concat_then_slice_is_identity(self, n1, n2, d):
        rng = np.random.default_rng(n1 * 100 + n2 * 10 + d)
        a = tn.Tensor(rng.normal(size=(n1, d)))
        b = tn.Tensor(rng.normal(size=(n2, d)))
        cat = tn.concat([a, b], axis=0)
        np.testing.assert_array_equal(cat[:n1].data, a.data)
        np.testing.assert_array_equal(cat[n1:].data, b.data)

    def test_transpose_reshape_roundtrip(self):
        rng = np.random.default_rng(3)
        x = tn.Tensor(rng.normal(size=(3, 5)))
        np.testing.assert_array_equal(tn.transpose(tn.transpose(x)).data, x.data)
        np.testing.assert_array_equal(tn.reshape(tn.reshape(x, (15,)), (3, 5)).data, x.data)

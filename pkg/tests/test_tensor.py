import numpy as np
import pytest
from hypothesis import given, strategies as st

from nanonas import tensor as T
from nanonas.tensor import AdamW, Tape, TapeError, Tensor, conv_out_len, no_tape

from oracles import check_grads, naive_conv1d, weighted_sum


def away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


CONV_CASES = [
    # (n, c_in, c_out, length, k, stride, padding, groups, bias)
    (2, 3, 4, 9, 3, 1, 1, 1, True),  # general
    (2, 4, 4, 10, 5, 1, 2, 4, False),  # depthwise fast path
    (1, 4, 4, 11, 3, 2, 1, 4, False),  # strided depthwise
    (2, 4, 6, 8, 1, 1, 0, 1, False),  # pointwise
    (2, 4, 6, 9, 3, 1, 1, 2, True),  # grouped
    (1, 1, 5, 13, 5, 3, 2, 1, True),  # strided stem
]


class TestConv1d:
    @pytest.mark.parametrize("case", CONV_CASES)
    def test_matches_naive(self, case):
        n, c_in, c_out, length, k, stride, pad, groups, bias = case
        rng = np.random.default_rng(1)
        x = rng.normal(size=(n, c_in, length))
        w = rng.normal(size=(c_out, c_in // groups, k))
        b = rng.normal(size=c_out) if bias else None
        out = T.conv1d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                       None if b is None else Tensor(b, dtype=np.float64), stride, pad, groups)
        np.testing.assert_allclose(out.data, naive_conv1d(x, w, b, stride, pad, groups), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("case", CONV_CASES)
    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, case, seed):
        n, c_in, c_out, length, k, stride, pad, groups, bias = case
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, c_in, length))
        w = rng.normal(size=(c_out, c_in // groups, k))
        probe = rng.normal(size=(n, c_out, conv_out_len(length, k, stride, pad)))
        arrays = [x, w] + ([rng.normal(size=c_out)] if bias else [])

        def f(*ts):
            b = ts[2] if bias else None
            return weighted_sum(T.conv1d(ts[0], ts[1], b, stride, pad, groups), probe)

        assert check_grads(f, arrays) <= 1e-4

    def test_float32_preserved(self):
        out = T.conv1d(Tensor(np.ones((1, 2, 5))), Tensor(np.ones((2, 1, 3))), groups=2, padding=1)
        assert out.dtype == np.float32

    def test_bad_groups(self):
        with pytest.raises(ValueError):
            T.conv1d(Tensor(np.ones((1, 3, 5))), Tensor(np.ones((2, 1, 3))), groups=2)

    def test_output_too_short(self):
        with pytest.raises(ValueError):
            T.conv1d(Tensor(np.ones((1, 1, 2))), Tensor(np.ones((1, 1, 5))))

    @given(length=st.integers(1, 50), k=st.integers(1, 9), stride=st.integers(1, 4), pad=st.integers(0, 4))
    def test_out_len_formula(self, length, k, stride, pad):
        expected = (length + 2 * pad - k) // stride + 1
        assert conv_out_len(length, k, stride, pad) == expected


class TestBatchNorm:
    @pytest.mark.parametrize("training", [True, False])
    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, training, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4, 5)) * 2 + 1
        gamma, beta = rng.normal(size=4), rng.normal(size=4)
        mean, var = rng.normal(size=4), rng.uniform(0.5, 2, size=4)
        probe = rng.normal(size=x.shape)

        def f(xt, gt, bt):
            return weighted_sum(T.batch_norm1d(xt, gt, bt, mean.copy(), var.copy(), training), probe)

        assert check_grads(f, [x, gamma, beta]) <= 1e-4

    def test_normalizes_and_tracks(self):
        rng = np.random.default_rng(0)
        x = rng.normal(3.0, 2.0, size=(8, 2, 50))
        rm, rv = np.zeros(2), np.ones(2)
        out = T.batch_norm1d(Tensor(x, dtype=np.float64), Tensor(np.ones(2), dtype=np.float64),
                             Tensor(np.zeros(2), dtype=np.float64), rm, rv, True, momentum=0.5)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2)), 0, atol=1e-10)
        np.testing.assert_allclose(out.data.var(axis=(0, 2)), 1, atol=1e-4)
        m = x.shape[0] * x.shape[2]
        np.testing.assert_allclose(rm, 0.5 * x.mean(axis=(0, 2)))
        np.testing.assert_allclose(rv, 0.5 + 0.5 * x.var(axis=(0, 2)) * m / (m - 1))

    def test_eval_needs_stats(self):
        with pytest.raises(ValueError):
            T.batch_norm1d(Tensor(np.ones((1, 2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, None, False)


class TestElementwise:
    @pytest.mark.parametrize("seed", range(10))
    def test_relu_clamp_exp_grads(self, seed):
        rng = np.random.default_rng(seed)
        x = away_from_zero(rng, (3, 4))
        probe = rng.normal(size=x.shape)
        assert check_grads(lambda t: weighted_sum(T.relu(t), probe), [x]) <= 1e-4
        xc = x.copy()
        xc[np.abs(np.abs(xc) - 0.5) < 1e-2] += 0.05
        assert check_grads(lambda t: weighted_sum(T.clamp(t, -0.5, 0.5), probe), [xc]) <= 1e-4
        assert check_grads(lambda t: weighted_sum(T.exp(t), probe), [x]) <= 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_softmax_grads(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 5, 3))
        probe = rng.normal(size=x.shape)
        assert check_grads(lambda t: weighted_sum(T.log_softmax(t, axis=1), probe), [x]) <= 1e-4
        assert check_grads(lambda t: weighted_sum(T.softmax(t, axis=-1), probe), [x]) <= 1e-4

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_log_softmax_normalized(self, values):
        out = T.log_softmax(Tensor(np.array(values), dtype=np.float64)).data
        assert np.isclose(np.logaddexp.reduce(out), 0.0, atol=1e-12)

    def test_structural_grads(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
        probe = rng.normal(size=(4, 2, 3))
        f = lambda x, y: weighted_sum(T.transpose(T.add(T.mul(x, y), T.sub(x, y)), (2, 0, 1)), probe)
        assert check_grads(f, [a, b]) <= 1e-6
        assert check_grads(lambda x: T.mean(T.reshape(x, (6, 4))[1:3]), [a]) <= 1e-6

    def test_match_channels(self):
        x = Tensor(np.arange(6.0).reshape(1, 3, 2), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            wide = T.match_channels(x, 5)
            loss = T.tsum(wide)
        tape.backward(loss)
        assert wide.shape == (1, 5, 2) and np.all(wide.data[:, 3:] == 0)
        np.testing.assert_array_equal(x.grad, np.ones((1, 3, 2)))
        assert T.match_channels(x, 2).shape == (1, 2, 2)


class TestTape:
    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.tsum(T.mul(x, 2.0))
        with pytest.raises(TapeError):
            y.backward()

    def test_double_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = T.tsum(x)
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_no_tape_suspends(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_tape():
                frozen = T.mul(x, 3.0)
            y = T.tsum(T.mul(x, frozen))
        tape.backward(y)
        np.testing.assert_allclose(x.grad, 3.0)
        assert frozen.node_id is None

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            y = T.tsum(T.mul(x, x))
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [4.0])

    def test_nonscalar_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, 2.0)
        with pytest.raises(ValueError):
            tape.backward(y)


class TestAdamW:
    def test_matches_reference_update(self):
        w = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
        opt = AdamW([w], lr=0.1, betas=(0.9, 0.999), weight_decay=0.01, eps=1e-8)
        g = np.array([0.5, -1.0])
        w.grad = g.copy()
        opt.step()
        # first step: m_hat = g, v_hat = g^2, so the Adam update is lr * sign(g)
        decayed = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01)
        expected = decayed - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(w.data, expected, rtol=1e-9)

    def test_minimizes_quadratic(self):
        w = Tensor(np.array([5.0]), requires_grad=True, dtype=np.float64)
        opt = AdamW([w], lr=0.1, weight_decay=0.0)
        for _ in range(300):
            w.grad = 2 * w.data
            opt.step()
        assert abs(w.data[0]) < 0.05

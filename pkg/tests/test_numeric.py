import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aflnet import backend
from aflnet import numeric as nm


def triple_loop(a, b):
    n, m = len(a), len(a[0])
    p = len(b[0])
    out = [[0.0] * p for _ in range(n)]
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for k in range(m):
                acc += a[i][k] * b[k][j]
            out[i][j] = acc
    return np.array(out)


@pytest.fixture(params=backend.available())
def kernels(request):
    prev = backend.NAME
    backend.use(request.param)
    yield backend.kernels
    backend.use(prev)


class TestMatmul:
    def test_identity(self, kernels):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(nm.matmul(np.eye(2), x).value, x)

    def test_projector(self, kernels):
        out = nm.matmul([[1.0, 0.0], [0.0, 0.0]], [[5.0], [7.0]]).value
        assert np.array_equal(out, [[5.0], [0.0]])

    @pytest.mark.parametrize("shape", [(3, 4, 2), (1, 1, 1), (9, 13, 5), (4, 128, 3), (17, 3, 33)])
    def test_exactly_matches_triple_loop(self, kernels, shape):
        rng = np.random.default_rng(sum(shape))
        n, m, p = shape
        a, b = rng.normal(size=(n, m)), rng.normal(size=(m, p))
        assert np.array_equal(nm.matmul(a, b).value, triple_loop(a.tolist(), b.tolist()))

    def test_shape_mismatch_names_both_shapes(self, kernels):
        with pytest.raises(nm.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            nm.matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_backends_bit_identical(self):
        if "compiled" not in backend.available():
            pytest.skip("compiled kernels not built")
        rng = np.random.default_rng(7)
        fast, slow = backend.get("compiled"), backend.get("python")
        for n, m, p in [(1024, 128, 128), (5, 7, 3), (33, 64, 1)]:
            a, b = rng.normal(size=(n, m)), rng.normal(size=(m, p))
            assert np.array_equal(fast.matmul(a, b), slow.matmul(a, b))
        a3, b3 = rng.normal(size=(6, 10, 64)), rng.normal(size=(6, 64, 11))
        assert np.array_equal(fast.bmm(a3, b3), slow.bmm(a3, b3))

    def test_grouped_matmul_matches_per_group_triple_loop(self, kernels):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3 * 2, 4)), rng.normal(size=(3 * 4, 5))
        out = nm.group_matmul(a, b, 3).value
        for g in range(3):
            ref = triple_loop(a[2 * g : 2 * g + 2].tolist(), b[4 * g : 4 * g + 4].tolist())
            assert np.array_equal(out[2 * g : 2 * g + 2], ref)


class TestSoftmax:
    def test_uniform_row(self):
        assert np.array_equal(nm.softmax_rows([[0.0, 0.0]], 1.0).value, [[0.5, 0.5]])

    def test_log_two(self):
        out = nm.softmax_rows([[math.log(2.0), 0.0]], 1.0).value
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], rtol=0, atol=1e-15)

    @pytest.mark.parametrize("x", [-1e6, -3.0, 0.0, 42.0, 1e300])
    def test_single_key(self, x):
        assert nm.softmax_rows([[x]], 1.0).value[0, 0] == 1.0

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            nm.softmax_rows([[1.0, 2.0]], 0.0)

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
               elements=st.floats(-50, 50)),
        st.floats(0.1, 10.0),
        st.floats(-100, 100),
    )
    def test_rows_sum_to_one_and_shift_invariant(self, x, scale, shift):
        y = nm.softmax_rows(x, scale).value
        assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)
        shifted = nm.softmax_rows(x + shift, scale).value
        assert np.all(np.abs(shifted - y) <= 1e-12)


class TestActivations:
    def test_relu_values(self):
        assert nm.relu([[-2.0, 0.0, 3.0]]).value.tolist() == [[0.0, 0.0, 3.0]]

    def test_relu_gradient_is_the_on_mask(self):
        x = nm.parameter([[-1.0, 2.0, 0.5]])
        with nm.Tape() as tape:
            loss = nm.sum_all(nm.relu(x))
        tape.backward(loss, [x])
        assert x.grad.tolist() == [[0.0, 1.0, 1.0]]


class TestLinear:
    def test_identity_weight(self):
        x = np.array([[1.5, -2.0], [0.25, 3.0]])
        assert np.array_equal(nm.linear(x, np.eye(2), np.zeros((1, 2))).value, x)

    def test_zero_input_gives_bias(self):
        b = np.array([[0.3, -0.7, 1.1]])
        out = nm.linear(np.zeros((4, 2)), np.ones((2, 3)), b).value
        assert np.array_equal(out, np.repeat(b, 4, axis=0))

    def test_hand_example(self):
        out = nm.linear([[1.0, 2.0]], [[1.0, 0.0], [0.0, 2.0]], [[1.0, 1.0]]).value
        assert np.array_equal(out, [[2.0, 5.0]])

    def test_shape_errors(self):
        with pytest.raises(nm.DimensionError):
            nm.linear(np.ones((1, 3)), np.ones((2, 2)), np.zeros((1, 2)))
        with pytest.raises(nm.DimensionError):
            nm.linear(np.ones((1, 2)), np.ones((2, 2)), np.zeros((2, 2)))


class TestMse:
    def test_zero_at_target(self):
        assert nm.mse_scalar(0.7, 0.7).value[0, 0] == 0.0

    def test_hand_square(self):
        assert nm.mse_scalar(0.5, 1.0).value[0, 0] == 0.25

    def test_gradient(self):
        p = nm.parameter([[0.5]])
        with nm.Tape() as tape:
            loss = nm.mse_scalar(p, 1.0)
        tape.backward(loss, [p])
        h = 1e-5
        fd = ((0.5 + h - 1.0) ** 2 - (0.5 - h - 1.0) ** 2) / (2 * h)
        assert p.grad[0, 0] == -1.0
        assert abs(fd - -1.0) < 1e-9


class TestAdam:
    def test_zero_gradient_from_rest(self):
        p = np.array([[1.0, -2.0]])
        state = nm.AdamState.for_params([p])
        (new,) = nm.adam_step([p], [np.zeros_like(p)], state)
        assert np.array_equal(new, p)
        assert state.step == 1

    def test_zero_gradient_decays_moments(self):
        p = np.array([[1.0]])
        state = nm.AdamState.for_params([p])
        nm.adam_step([p], [np.array([[2.0]])], state)
        m1, v1 = state.m[0].copy(), state.v[0].copy()
        nm.adam_step([p], [np.zeros_like(p)], state)
        assert state.m[0][0, 0] == 0.9 * m1[0, 0]
        assert state.v[0][0, 0] == 0.999 * v1[0, 0]

    @pytest.mark.parametrize("g", [3.0, -0.01, 250.0])
    def test_first_step_is_learning_rate_times_sign(self, g):
        p = np.array([[0.0]])
        state = nm.AdamState.for_params([p], lr=5e-4)
        (new,) = nm.adam_step([p], [np.array([[g]])], state)
        # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
        expected = -5e-4 * g / (abs(g) + 1e-8)
        assert new[0, 0] == pytest.approx(expected, rel=1e-12)
        assert abs(abs(new[0, 0]) - 5e-4) < 5e-4 * 1e-6

    def test_two_step_hand_trace(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate([0.5, -1.5], start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        arr = np.array([[1.0]])
        state = nm.AdamState.for_params([arr], lr=lr)
        for g in [0.5, -1.5]:
            (arr,) = nm.adam_step([arr], [np.array([[g]])], state)
        assert arr[0, 0] == pytest.approx(p, rel=1e-14)
        assert state.step == 2

    def test_shape_mismatch(self):
        state = nm.AdamState.for_params([np.zeros((2, 2))])
        with pytest.raises(nm.DimensionError):
            nm.adam_step([np.zeros((2, 2))], [np.zeros((1, 2))], state)


class TestTape:
    def test_backward_visits_each_op_once(self):
        rng = np.random.default_rng(0)
        w = nm.parameter(rng.normal(size=(3, 3)))
        x = nm.Var(rng.normal(size=(4, 3)))
        with nm.Tape() as tape:
            h = nm.tanh(nm.matmul(x, w))
            s = nm.softmax_rows(nm.add(h, nm.matmul(h, w)), 2.0)
            loss = nm.sum_all(nm.mul(s, h))
        tape.backward(loss, [w])
        assert tape.visits == len(tape.ops) == 7

    def test_unused_parameter_gets_zero_gradient(self):
        used = nm.parameter([[1.0, 2.0]])
        unused = nm.parameter([[3.0]])
        with nm.Tape() as tape:
            loss = nm.sum_all(nm.mul(used, used))
        tape.backward(loss, [used, unused])
        assert np.array_equal(unused.grad, [[0.0]])
        assert np.array_equal(used.grad, [[2.0, 4.0]])

    def test_shared_subexpression_accumulates(self):
        x = nm.parameter([[2.0]])
        with nm.Tape() as tape:
            y = nm.add(nm.mul(x, 3.0), x)
            loss = nm.mul(y, x)
        tape.backward(loss, [x])
        # loss = 4x^2 -> 8x
        assert x.grad[0, 0] == 16.0

    def test_no_recording_outside_tape(self):
        p = nm.parameter([[1.0]])
        out = nm.mul(p, p)
        assert not out.requires_grad


class TestGradCheck:
    def test_sum_of_squares(self):
        rng = np.random.default_rng(11)
        x = nm.parameter(rng.normal(size=(3, 4)))
        err = nm.grad_check(lambda: nm.sum_all(nm.mul(x, x)), [x])
        assert err < 1e-7

    def test_constant_function(self):
        x = nm.parameter(np.ones((2, 2)))
        err = nm.grad_check(lambda: nm.Var([[3.0]]) + nm.scale(nm.sum_all(x), 0.0), [x])
        assert err == 0.0

    def test_non_finite_raises(self):
        x = nm.parameter([[0.0]])

        def f():
            v = x.value[0, 0]
            return nm.add(nm.scale(x, 1.0), np.array([[math.inf if v != 0 else 0.0]]))

        with pytest.raises(nm.EvaluationError):
            nm.grad_check(f, [x])

    def test_detects_wrong_gradient(self):
        x = nm.parameter([[0.3, -0.4]])

        def f():
            # emit an op whose backward is deliberately off by a factor
            y = nm.tanh(x)
            out = nm.sum_all(y)
            out.value = out.value * 1.0
            return out

        assert nm.grad_check(f, [x]) < 1e-7
        orig = nm.tanh

        def bad_tanh(v):
            v = nm._wrap(v)
            y = np.tanh(v.value)
            return nm._emit(y, (v,), lambda g: (2.0 * g * (1 - y * y),), "bad")

        nm.tanh = bad_tanh
        try:
            assert nm.grad_check(f, [x]) > 0.1
        finally:
            nm.tanh = orig


    def test_stencil_across_relu_kink(self):
        # x sits 5e-6 from the kink, inside the default central stencil
        x = nm.parameter([[5e-6, -2.0, 1.0]])
        w = np.array([[3.0, 1.0, -2.0]])

        def f():
            return nm.sum_all(nm.mul(nm.relu(x), w))

        assert nm.grad_check(f, [x]) < 1e-7

    def test_kink_handling_still_catches_wrong_gradients(self):
        x = nm.parameter([[5e-6, 1.0]])
        orig = nm.relu

        def bad_relu(v):
            out = orig(v)
            mask = (nm._wrap(v).value > 0).astype(float)
            return nm._emit(out.value, (nm._wrap(v),), lambda g: (2.0 * g * mask,), "bad_relu")

        def f():
            return nm.sum_all(bad_relu(x))

        assert nm.grad_check(f, [x]) > 0.4

def _random_points(seed, n=100):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield rng


OPS = {
    "matmul": (lambda a, b: nm.matmul(a, b), [(3, 4), (4, 2)]),
    "add_broadcast": (lambda a, b: nm.add(a, b), [(3, 4), (1, 4)]),
    "sub_broadcast": (lambda a, b: nm.sub(a, b), [(3, 4), (3, 1)]),
    "mul_broadcast": (lambda a, b: nm.mul(a, b), [(3, 4), (1, 4)]),
    "linear": (lambda x, w, b: nm.linear(x, w, b), [(2, 3), (3, 4), (1, 4)]),
    "tanh": (lambda a: nm.tanh(a), [(3, 3)]),
    "sigmoid": (lambda a: nm.sigmoid(a), [(3, 3)]),
    "relu": (lambda a: nm.relu(a), [(3, 3)]),
    "softmax": (lambda a: nm.softmax_rows(a, 1.7), [(3, 5)]),
    "transpose": (lambda a: nm.transpose(a), [(2, 5)]),
    "take_rows": (lambda a: nm.take_rows(a, [0, 2, 2, 1]), [(3, 2)]),
    "take_cols": (lambda a: nm.take_cols(a, [1, 1, 0]), [(3, 2)]),
    "concat_rows": (lambda a, b: nm.concat_rows([a, b]), [(2, 3), (1, 3)]),
    "concat_cols": (lambda a, b: nm.concat_cols([a, b]), [(2, 3), (2, 1)]),
    "group_matmul": (lambda a, b: nm.group_matmul(a, b, 2), [(4, 3), (6, 2)]),
    "group_matmul_nt": (lambda a, b: nm.group_matmul_nt(a, b, 2), [(4, 3), (6, 3)]),
    "group_concat": (lambda a, b: nm.group_concat([a, b], 2), [(2, 3), (6, 3)]),
    "group_mean": (lambda a: nm.group_mean(a, 3), [(6, 2)]),
    "reshape": (lambda a: nm.reshape(a, (3, 4)), [(2, 6)]),
    "sq_err": (lambda a: nm.squared_error_sum(a, np.ones((2, 3))), [(2, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        params = [nm.parameter(rng.normal(size=s)) for s in shapes]
        weights = rng.normal(size=fn(*[p.value for p in params]).shape)

        def f():
            return nm.sum_all(nm.mul(fn(*params), weights))

        worst = max(worst, nm.grad_check(f, params))
    assert worst < 1e-4

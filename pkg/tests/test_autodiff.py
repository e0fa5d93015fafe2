import math

import numpy as np
import pytest

from fairdice.autodiff import (
    Activation,
    AdamState,
    Head,
    MlpSpec,
    NonFiniteError,
    Schedule,
    Tensor,
    adam_step,
    backward,
    categorical_log_prob,
    flat_grad,
    flatten,
    forward,
    forward_backward,
    init_mlp,
    input_gradient,
    log_softmax,
    orthogonal_init,
    penalty_backward,
)

H = 1e-5


def fd_params(params, loss_fn, h=H):
    out = []
    for p in params:
        g = np.zeros_like(p.values)
        for i in np.ndindex(p.shape):
            old = p.values[i]
            p.values[i] = old + h
            a = loss_fn()
            p.values[i] = old - h
            b = loss_fn()
            p.values[i] = old
            g[i] = (a - b) / (2 * h)
        out.append(g)
    return np.concatenate([g.ravel() for g in out])


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def small_net(act, head=Head.SCALAR, widths=(4, 6, 5, 1), seed=0):
    spec = MlpSpec(widths, activation=act, head=head)
    params = init_mlp(spec, np.random.default_rng(seed))
    # non-zero biases so the FD check covers them
    for p in params[1::2]:
        p.values[:] = np.random.default_rng(seed + 1).normal(scale=0.1, size=p.shape)
    return spec, params


class TestInit:
    @pytest.mark.parametrize("rows,cols", [(5, 3), (3, 5), (4, 4)])
    def test_orthogonal(self, rows, cols):
        W = orthogonal_init(rows, cols, 1.0, np.random.default_rng(1))
        gram = W.T @ W if rows >= cols else W @ W.T
        assert np.allclose(gram, np.eye(min(rows, cols)), atol=1e-12)

    def test_gain_scales(self):
        W = orthogonal_init(6, 6, math.sqrt(2), np.random.default_rng(1))
        assert np.allclose(W.T @ W, 2 * np.eye(6))

    def test_seed_determinism(self):
        spec = MlpSpec((35, 64, 64, 7))
        a = flatten(init_mlp(spec, np.random.default_rng(42)))
        b = flatten(init_mlp(spec, np.random.default_rng(42)))
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, flatten(init_mlp(spec, np.random.default_rng(43))))

    def test_zero_biases_and_out_gain(self):
        spec = MlpSpec((3, 4, 2), out_gain=0.01)
        params = init_mlp(spec, np.random.default_rng(0))
        assert all(np.all(b.values == 0) for b in params[1::2])
        assert np.allclose(params[2].values.T @ params[2].values, 1e-4 * np.eye(2))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            MlpSpec((3,))
        with pytest.raises(ValueError):
            MlpSpec((3, 2), head=Head.SCALAR)
        with pytest.raises(ValueError):
            Tensor(np.zeros(3), grad=np.zeros(2))


class TestBackprop:
    @pytest.mark.parametrize("act", list(Activation))
    def test_parameter_gradients(self, act):
        spec, params = small_net(act)
        x = np.random.default_rng(5).normal(size=(7, 4))
        target = np.random.default_rng(6).normal(size=(7, 1))

        def head(out):
            r = out - target
            return 0.5 * float(np.sum(r ** 2)), r

        forward_backward(spec, params, x, head)
        analytic = flat_grad(params)
        numeric = fd_params(params, lambda: head(forward(spec, params, x).out)[0])
        assert rel_err(analytic, numeric) < 1e-4

    def test_categorical_head(self):
        spec, params = small_net(Activation.TANH, head=Head.CATEGORICAL, widths=(4, 8, 3))
        x = np.random.default_rng(2).normal(size=(6, 4))
        a = np.array([0, 2, 1, 1, 0, 2])

        def loss():
            return -float(categorical_log_prob(forward(spec, params, x).out, a)[0].sum())

        def head(out):
            lp, bp = categorical_log_prob(out, a)
            return -float(lp.sum()), bp(-np.ones(len(a)))

        forward_backward(spec, params, x, head)
        assert rel_err(flat_grad(params), fd_params(params, loss)) < 1e-4

    def test_input_gradient_returned_by_backward(self):
        spec, params = small_net(Activation.TANH)
        x = np.random.default_rng(3).normal(size=(2, 4))
        tape = forward(spec, params, x)
        dx = backward(spec, params, tape, np.ones((2, 1)))
        gx, _ = input_gradient(spec, params, tape)
        assert np.allclose(dx, gx)

    @pytest.mark.parametrize("act", list(Activation))
    def test_input_gradient_matches_fd(self, act):
        spec, params = small_net(act)
        x = np.random.default_rng(4).normal(size=(3, 4))
        gx, _ = input_gradient(spec, params, forward(spec, params, x))
        num = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i] += H
            xm[i] -= H
            num[i] = (forward(spec, params, xp).out[i[0], 0] - forward(spec, params, xm).out[i[0], 0]) / (2 * H)
        assert rel_err(gx, num) < 1e-6

    @pytest.mark.parametrize("act", list(Activation))
    def test_double_backprop_penalty(self, act):
        spec, params = small_net(act)
        x = np.random.default_rng(7).normal(size=(5, 4))

        def penalty():
            gx, _ = input_gradient(spec, params, forward(spec, params, x))
            n = np.linalg.norm(gx, axis=1)
            return float(np.sum(np.maximum(n - 0.5, 0.0) ** 2))

        tape = forward(spec, params, x)
        gx, deltas = input_gradient(spec, params, tape)
        n = np.linalg.norm(gx, axis=1)
        d_n = 2 * np.maximum(n - 0.5, 0.0)
        for p in params:
            p.zero_grad()
        penalty_backward(spec, params, tape, deltas, (d_n / n)[:, None] * gx)
        assert rel_err(flat_grad(params), fd_params(params, penalty)) < 1e-4

    def test_relu_derivative_at_zero_is_zero(self):
        spec = MlpSpec((1, 1, 1), head=Head.SCALAR)
        params = [Tensor(np.ones((1, 1))), Tensor(np.zeros(1)), Tensor(np.ones((1, 1))), Tensor(np.zeros(1))]
        tape = forward(spec, params, np.zeros((1, 1)))
        assert input_gradient(spec, params, tape)[0][0, 0] == 0.0

    def test_zero_weight_linear_layer(self):
        spec = MlpSpec((3, 2), head=Head.CATEGORICAL)
        params = [Tensor(np.zeros((3, 2))), Tensor(np.zeros(2))]
        x = np.arange(6.0).reshape(2, 3)
        tape = forward(spec, params, x)
        assert np.all(tape.out == 0)
        backward(spec, params, tape, np.ones((2, 2)))
        assert np.allclose(params[0].grad, x.T @ np.ones((2, 2)))
        assert np.allclose(params[1].grad, [2.0, 2.0])

    def test_non_finite_loss_names_layer(self):
        spec, params = small_net(Activation.RELU)
        params[2].values[0, 0] = np.inf
        with pytest.raises(NonFiniteError) as exc:
            forward_backward(spec, params, np.ones((1, 4)), lambda o: (float(o.sum()), np.ones_like(o)))
        assert exc.value.layer == 1

    def test_shape_checks(self):
        spec, params = small_net(Activation.RELU)
        with pytest.raises(ValueError):
            forward(spec, params, np.ones((2, 5)))
        with pytest.raises(ValueError):
            forward(spec, params[:2], np.ones((2, 4)))

    def test_log_softmax_stable(self):
        lp = log_softmax(np.array([[1000.0, 0.0, -1000.0]]))
        assert np.all(np.isfinite(lp[:, :2])) and lp[0, 0] == 0.0
        assert np.allclose(np.exp(log_softmax(np.random.default_rng(0).normal(size=(4, 5)))).sum(1), 1.0)


class TestAdam:
    def test_hand_trace(self):
        # two steps on a scalar with gradients 1 then -2
        p = [Tensor(np.array([0.5]))]
        st = AdamState.for_params(p, lr=0.1)
        adam_step(st, p, [np.array([1.0])])
        # bias-corrected m/sqrt(v) = 1 on the first step
        p1 = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8)
        assert p[0].values[0] == pytest.approx(p1, rel=1e-12)
        adam_step(st, p, [np.array([-2.0])])
        m = (0.9 * 0.1 * 1.0 + 0.1 * -2.0) / (1 - 0.81)
        v = (0.999 * 0.001 * 1.0 + 0.001 * 4.0) / (1 - 0.999 ** 2)
        assert p[0].values[0] == pytest.approx(p1 - 0.1 * m / (math.sqrt(v) + 1e-8), rel=1e-9)

    def test_cosine_endpoints(self):
        st = AdamState(lr=3e-4, shapes=[(1,)], schedule=Schedule.COSINE_TO_ZERO, total_steps=100)
        assert st.lr_at(0) == 3e-4
        assert st.lr_at(50) == pytest.approx(1.5e-4)
        assert st.lr_at(100) == pytest.approx(0.0, abs=1e-20)
        assert st.lr_at(500) == pytest.approx(0.0, abs=1e-20)

    def test_cosine_needs_total(self):
        with pytest.raises(ValueError):
            AdamState(lr=1.0, shapes=[(1,)], schedule="cosine")

    def test_rejects_non_finite_gradient(self):
        p = [Tensor(np.zeros(2))]
        st = AdamState.for_params(p, lr=0.1)
        with pytest.raises(NonFiniteError):
            adam_step(st, p, [np.array([np.nan, 0.0])])
        assert np.all(p[0].values == 0) and st.step == 0

    def test_minimizes_quadratic(self):
        p = [Tensor(np.array([3.0, -2.0]))]
        st = AdamState.for_params(p, lr=0.05)
        for _ in range(2000):
            adam_step(st, p, [2 * p[0].values])
        assert np.allclose(p[0].values, 0, atol=1e-3)

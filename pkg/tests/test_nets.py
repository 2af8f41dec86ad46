"""Decoder and optimizer tests.

The decoder oracle is a straight-line reimplementation of the two-layer
forward pass; gradients are checked against central finite differences;
the first Adam step is checked against its closed form.
"""

import numpy as np
import pytest

from octmap.nets import (
    AdamState,
    MlpDecoder,
    RowAdamState,
    adam_step,
    adam_step_rows,
    decode_color,
    decode_occupancy,
    occupancy_backward,
    sigmoid,
)


def forward_oracle(dec, x):
    """Independent straight-line evaluation of the two blocks."""
    x = np.atleast_2d(x)
    out = np.empty((x.shape[0], dec.out_dim))
    for n in range(x.shape[0]):
        h = np.zeros(dec.hidden)
        for i in range(dec.hidden):
            acc = dec.b1[i]
            for j in range(dec.in_dim):
                acc += dec.w1[i, j] * x[n, j]
            h[i] = acc if acc > 0 else 0.0
        for o in range(dec.out_dim):
            acc = dec.b2[o]
            for i in range(dec.hidden):
                acc += dec.w2[o, i] * h[i]
            out[n, o] = acc
    return out


def numeric_param_grads(dec, x, dout, h=1e-6):
    """Central-difference gradients of sum(dout * forward(x))."""
    grads = []
    for p in dec.params():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            up = float((dec.forward(x)[0] * dout).sum())
            p[idx] = orig - h
            dn = float((dec.forward(x)[0] * dout).sum())
            p[idx] = orig
            g[idx] = (up - dn) / (2 * h)
            it.iternext()
        grads.append(g)
    return grads


class TestForward:
    def test_zero_weights_give_half_occupancy(self):
        dec = MlpDecoder(4, 1, hidden=8)
        dec.set_params([np.zeros_like(p) for p in dec.params()])
        occ, _ = decode_occupancy(dec, np.random.default_rng(0).normal(size=(5, 4)))
        np.testing.assert_allclose(occ, 0.5, atol=1e-15)

    def test_saturated_bias(self):
        dec = MlpDecoder(4, 1, hidden=8)
        params = [np.zeros_like(p) for p in dec.params()]
        params[3] = np.array([10.0])
        dec.set_params(params)
        occ, _ = decode_occupancy(dec, np.zeros((1, 4)))
        assert occ[0] == pytest.approx(1.0 / (1.0 + np.exp(-10.0)), abs=1e-12)
        assert 0.0 < occ[0] < 1.0

    def test_occupancy_strictly_in_unit_interval(self):
        dec = MlpDecoder(6, 1, rng=np.random.default_rng(1))
        occ, _ = decode_occupancy(dec, np.random.default_rng(2).normal(size=(200, 6)))
        assert (occ > 0).all() and (occ < 1).all()

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(3)
        dec = MlpDecoder(5, 3, hidden=16, rng=rng)
        x = rng.normal(size=(7, 5))
        out, _ = dec.forward(x)
        np.testing.assert_allclose(out, forward_oracle(dec, x), atol=1e-12)

    def test_zero_weight_color_is_bias(self):
        dec = MlpDecoder(4, 3, hidden=8)
        params = [np.zeros_like(p) for p in dec.params()]
        params[3] = np.array([0.25, 0.5, 0.75])
        dec.set_params(params)
        col, _ = decode_color(dec, np.ones((2, 4)))
        np.testing.assert_allclose(col, [[0.25, 0.5, 0.75]] * 2, atol=1e-15)

    def test_hand_computed_two_layer(self):
        # w1 = [[1, 0], [0, -1]], b1 = (0.5, 0.5), relu
        # w2 = [[1, 2]], b2 = 0.1
        # x = (0.2, 0.3): pre1 = (0.7, 0.2) -> h = (0.7, 0.2)
        # y = 0.7 + 2*0.2 + 0.1 = 1.2
        dec = MlpDecoder(2, 1, hidden=2)
        dec.set_params([
            np.array([[1.0, 0.0], [0.0, -1.0]]),
            np.array([0.5, 0.5]),
            np.array([[1.0, 2.0]]),
            np.array([0.1]),
        ])
        out, _ = dec.forward(np.array([[0.2, 0.3]]))
        assert out[0, 0] == pytest.approx(1.2, abs=1e-15)

    def test_dimension_mismatch(self):
        dec = MlpDecoder(4, 1)
        with pytest.raises(ValueError):
            dec.forward(np.zeros((2, 5)))

    def test_forward_deterministic(self):
        dec = MlpDecoder(4, 3, rng=np.random.default_rng(4))
        x = np.random.default_rng(5).normal(size=(10, 4))
        a, _ = dec.forward(x)
        b, _ = dec.forward(x)
        assert (a == b).all()


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        dec = MlpDecoder(4, 3, rng=np.random.default_rng(6))
        x = np.random.default_rng(7).normal(size=(5, 4))
        _, acts = dec.forward(x)
        dx, grads = dec.backward(acts, np.zeros((5, 3)))
        assert (dx == 0).all()
        assert all((g == 0).all() for g in grads)

    def test_linear_layer_adjoint(self):
        # single effective linear layer: relu inactive on positive pre1
        dec = MlpDecoder(3, 2, hidden=3)
        dec.set_params([
            np.eye(3),
            np.full(3, 10.0),  # keeps relu active for small inputs
            np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
            np.zeros(2),
        ])
        x = np.array([[0.1, -0.2, 0.3]])
        _, acts = dec.forward(x)
        dout = np.array([[1.0, -1.0]])
        _, grads = dec.backward(acts, dout)
        # dW2 = dout^T . h with h = x + 10
        expected_dw2 = dout.T @ (x + 10.0)
        np.testing.assert_allclose(grads[2], expected_dw2, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        for trial in range(3):
            dec = MlpDecoder(4, 2, hidden=6, rng=rng)
            x = rng.normal(size=(3, 4))
            dout = rng.normal(size=(3, 2))
            _, acts = dec.forward(x)
            dx, grads = dec.backward(acts, dout)
            num = numeric_param_grads(dec, x, dout)
            for g, n in zip(grads, num):
                np.testing.assert_allclose(g, n, rtol=1e-4, atol=1e-7)
            # input gradient via finite differences
            h = 1e-6
            for i in range(x.shape[0]):
                for j in range(x.shape[1]):
                    xp, xm = x.copy(), x.copy()
                    xp[i, j] += h
                    xm[i, j] -= h
                    up = float((dec.forward(xp)[0] * dout).sum())
                    dn = float((dec.forward(xm)[0] * dout).sum())
                    fd = (up - dn) / (2 * h)
                    assert dx[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_occupancy_backward_chains_sigmoid(self):
        rng = np.random.default_rng(9)
        dec = MlpDecoder(4, 1, hidden=6, rng=rng)
        z = rng.normal(size=(4, 4))
        occ, acts = decode_occupancy(dec, z)
        docc = rng.normal(size=4)
        dz, _ = occupancy_backward(dec, acts, occ, docc)
        h = 1e-6
        for i in range(4):
            for j in range(4):
                zp, zm = z.copy(), z.copy()
                zp[i, j] += h
                zm[i, j] -= h
                up = float((decode_occupancy(dec, zp)[0] * docc).sum())
                dn = float((decode_occupancy(dec, zm)[0] * docc).sum())
                assert dz[i, j] == pytest.approx((up - dn) / (2 * h), rel=1e-4, abs=1e-8)

    def test_shape_mismatch_rejected(self):
        dec = MlpDecoder(4, 2)
        _, acts = dec.forward(np.zeros((3, 4)))
        with pytest.raises(ValueError):
            dec.backward(acts, np.zeros((2, 2)))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        rng = np.random.default_rng(10)
        params = [rng.normal(size=(3, 3)), rng.normal(size=3)]
        before = [p.copy() for p in params]
        state = AdamState.for_params(params, lr=1e-2)
        applied = adam_step(params, [np.zeros_like(p) for p in params], state)
        assert applied and state.step == 1
        for p, b in zip(params, before):
            np.testing.assert_allclose(p, b, atol=1e-15)

    def test_first_step_closed_form(self):
        # m_hat = g, v_hat = g^2 -> delta = lr * g / (|g| + eps) ~ lr * sign(g)
        params = [np.array([1.0, -2.0])]
        g = np.array([0.3, -0.7])
        state = AdamState.for_params(params, lr=1e-2)
        adam_step(params, [g], state)
        expected = np.array([1.0, -2.0]) - 1e-2 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(params[0], expected, atol=1e-12)

    def test_quadratic_convergence(self):
        params = [np.array([1.0])]
        state = AdamState.for_params(params, lr=1e-2)
        for _ in range(500):
            adam_step(params, [2.0 * params[0]], state)
        assert abs(params[0][0]) < 1e-3

    def test_non_finite_gradient_skipped(self):
        params = [np.array([1.0])]
        state = AdamState.for_params(params, lr=1e-2)
        applied = adam_step(params, [np.array([np.nan])], state)
        assert not applied
        assert state.step == 0
        assert params[0][0] == 1.0

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            dec = MlpDecoder(4, 2, rng=np.random.default_rng(12))
            state = AdamState.for_params(dec.params(), lr=1e-3)
            for _ in range(20):
                x = rng.normal(size=(8, 4))
                out, acts = dec.forward(x)
                _, grads = dec.backward(acts, out - 1.0)
                adam_step(dec.params(), grads, state)
            return [p.copy() for p in dec.params()]

        a, b = run(), run()
        for pa, pb in zip(a, b):
            assert (pa == pb).all()

    def test_row_adam_matches_dense_on_touched_rows(self):
        table = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        dense = [table[1:2].copy()]
        dense_state = AdamState.for_params(dense, lr=1e-2)
        g = np.array([[0.5, -0.5]])
        adam_step(dense, [g], dense_state)
        row_state = RowAdamState(lr=1e-2)
        adam_step_rows(table, np.array([1]), g, row_state, 3)
        np.testing.assert_allclose(table[1], dense[0][0], atol=1e-15)
        np.testing.assert_allclose(table[0], [1.0, 2.0], atol=1e-15)


class TestSigmoid:
    def test_extremes_stable(self):
        assert sigmoid(np.array([-800.0]))[0] == 0.0
        assert sigmoid(np.array([800.0]))[0] == 1.0
        assert sigmoid(np.array([0.0]))[0] == 0.5

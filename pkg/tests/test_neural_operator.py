"""Oracle tests for the kernel-integral trajectory operator.

The forward map has enough structure to pin down exactly: configured as an
identity chain it must reproduce its input bitwise, a dense per-step
evaluation with explicit kernel matrices must agree with the batched table
path, and the (Lambda, mu) decomposition must satisfy the rate identity
dY/dt = Lambda * dU/dt + mu against finite differences of the forward pass.
"""

import numpy as np
import pytest

from safebc.checkpoint import write_checkpoint
from safebc.neural_operator import (BoundaryOperator, CacheStaleError,
                                    trapezoid_weights, u_dot_forward)
from safebc.pde_sim import ConfigurationError, TimeGrid


def zero_all(params):
    for p in params:
        p[...] = 0.0


def identity_operator(grid, d_v=4, n_layers=1):
    """Lift into the first channel, identity mixing, read the first channel."""
    op = BoundaryOperator(grid, d_v=d_v, n_layers=n_layers,
                          activations=("linear",) * n_layers, seed=0,
                          kappa_hidden=4, b_hidden=3)
    zero_all(op.params())
    op.P.params()[0][0, 0] = 1.0
    for layer in op.layers:
        layer.W[...] = np.eye(d_v)
    op.Q.params()[0][0, 0] = 1.0
    return op


def dense_forward(op, U):
    """Per-step reference with explicit kernel matrices, no table batching."""
    grid = op.grid
    n = grid.M + 1
    t = grid.times()
    w = trapezoid_weights(grid)
    v = op.P.forward(np.asarray(U, dtype=float)[:, None])
    for layer in op.layers:
        do, di = layer.dim_out, layer.dim_in
        b_tab = layer.b.forward(t[:, None])
        z = np.empty((n, do))
        for m in range(n):
            acc = layer.W @ v[m]
            for j in range(n):
                K = layer.kappa.forward(
                    np.array([[t[m], t[j]]]))[0].reshape(do, di)
                acc = acc + w[j] * (K @ v[j])
            z[m] = acc + b_tab[m]
        v = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return op.Q.forward(v)[:, 0]


class TestBasics:
    def test_trapezoid_weights_sum_to_horizon(self):
        grid = TimeGrid(2.0, 10)
        w = trapezoid_weights(grid)
        assert w.shape == (11,)
        assert w[0] == w[-1] == grid.dt / 2.0
        assert np.allclose(w.sum(), grid.T, rtol=1e-13)

    def test_udot_forward_on_ramp(self):
        U = 3.0 * np.linspace(0.0, 1.0, 6)
        ud = u_dot_forward(U, 0.2)
        assert np.allclose(ud, 3.0, rtol=1e-12)
        assert ud[-1] == ud[-2]

    def test_constructor_validation(self):
        grid = TimeGrid(1.0, 4)
        with pytest.raises(ConfigurationError):
            BoundaryOperator(grid, n_layers=0)
        with pytest.raises(ConfigurationError):
            BoundaryOperator(grid, n_layers=2, activations=("relu",))

    def test_forward_rejects_wrong_length(self):
        op = BoundaryOperator(TimeGrid(1.0, 4), d_v=3, n_layers=1,
                              kappa_hidden=4, b_hidden=3, seed=1)
        with pytest.raises(ConfigurationError):
            op.forward(np.zeros(6))


class TestForwardOracles:
    def test_zero_readout_gives_zero_output(self):
        op = BoundaryOperator(TimeGrid(1.0, 6), d_v=4, n_layers=2,
                              kappa_hidden=4, b_hidden=3, seed=2)
        zero_all(op.Q.params())
        Y, _ = op.forward(np.linspace(-3.0, 5.0, 7))
        assert np.array_equal(Y, np.zeros(7))

    def test_identity_chain_reproduces_input(self):
        op = identity_operator(TimeGrid(1.0, 8))
        U = np.array([1.0, -2.0, 0.5, 3.25, -0.125, 7.0, 0.0, 2.5, -4.75])
        Y, _ = op.forward(U)
        assert np.array_equal(Y, U)

    def test_identity_chain_two_layers(self):
        op = identity_operator(TimeGrid(1.0, 5), n_layers=2)
        U = np.array([0.5, -1.5, 2.0, -2.5, 3.0, -3.5])
        Y, _ = op.forward(U)
        assert np.array_equal(Y, U)

    def test_dense_reference_agreement(self):
        grid = TimeGrid(1.5, 6)
        op = BoundaryOperator(grid, d_v=4, n_layers=2, kappa_hidden=8,
                              b_hidden=4, seed=3)
        rng = np.random.default_rng(5)
        U = rng.normal(size=7)
        Y, _ = op.forward(U)
        assert np.allclose(Y, dense_forward(op, U), rtol=1e-9, atol=1e-9)

    def test_dense_reference_agreement_linear(self):
        grid = TimeGrid(1.0, 5)
        op = BoundaryOperator(grid, d_v=3, n_layers=1,
                              activations=("linear",), kappa_hidden=4,
                              b_hidden=3, seed=4)
        rng = np.random.default_rng(6)
        U = rng.normal(size=6)
        Y, _ = op.forward(U)
        assert np.allclose(Y, dense_forward(op, U), rtol=1e-9, atol=1e-9)

    def test_batch_matches_single(self):
        op = BoundaryOperator(TimeGrid(1.0, 6), d_v=4, n_layers=2,
                              kappa_hidden=4, b_hidden=3, seed=7)
        rng = np.random.default_rng(8)
        UU = rng.normal(size=(3, 7))
        YY, _ = op.forward_batch(UU)
        for b in range(3):
            Yb, _ = op.forward(UU[b])
            assert np.allclose(YY[b], Yb, rtol=1e-12, atol=1e-13)


class TestDecomposition:
    def test_lambda_constant_without_kernel(self):
        """With the kernel tables zeroed, Lambda is the static chain product."""
        op = BoundaryOperator(TimeGrid(1.0, 8), d_v=4, n_layers=2,
                              activations=("linear", "linear"),
                              kappa_hidden=4, b_hidden=3, seed=9)
        for layer in op.layers:
            zero_all(layer.kappa.params())
        U = np.linspace(-1.0, 2.0, 9)
        _, cache = op.forward(U)
        lam, _ = op.decomposition(cache)
        p_vec = op.P.params()[0].ravel()
        q_vec = op.Q.params()[0].ravel()
        expected = q_vec @ op.layers[1].W @ op.layers[0].W @ p_vec
        assert np.allclose(lam, expected, rtol=1e-12)

    def test_mu_zero_for_static_kernel_and_bias(self):
        """Constant-in-t kernels and biases contribute nothing to mu."""
        op = BoundaryOperator(TimeGrid(1.0, 6), d_v=4, n_layers=1,
                              activations=("linear",), kappa_hidden=4,
                              b_hidden=3, seed=10)
        zero_all(op.layers[0].kappa.params())
        zero_all(op.layers[0].b.params())
        op.layers[0].b.params()[-1][...] = 0.7
        U = np.linspace(0.0, 3.0, 7)
        _, cache = op.forward(U)
        lam, mu = op.decomposition(cache)
        assert np.array_equal(mu, np.zeros(7))
        assert not np.allclose(lam, 0.0)

    def test_rate_identity_piecewise_flat_tables(self):
        """Linear table networks make the output affine in the step time, so
        central differences of the forward pass recover Lambda*U_dot + mu to
        near machine precision at every interior step."""
        grid = TimeGrid(2.0, 20)
        op = BoundaryOperator(grid, d_v=4, n_layers=1,
                              activations=("linear",), kappa_hidden=4,
                              b_hidden=3, table_hidden="linear", seed=11)
        t = grid.times()
        U = 0.8 * np.sin(1.3 * t) + 0.3 * t
        Y, cache = op.forward(U)
        lam, mu = op.decomposition(cache)
        fd = (Y[2:] - Y[:-2]) / (2.0 * grid.dt)
        ud = (U[2:] - U[:-2]) / (2.0 * grid.dt)
        model = lam[1:-1] * ud + mu[1:-1]
        assert np.allclose(fd, model, rtol=1e-8, atol=1e-8)

    def test_rate_identity_relu(self):
        """The frozen-quadrature central difference in the output time must
        agree with Lambda*U_dot + mu away from ReLU kink crossings."""
        from oracles import rate_identity_check
        grid = TimeGrid(2.0, 32)
        for seed in (0, 1, 2):
            op = BoundaryOperator(grid, d_v=8, n_layers=2, kappa_hidden=8,
                                  b_hidden=4, seed=seed)
            rng = np.random.default_rng(100 + seed)
            a, b = rng.uniform(0.5, 1.5, size=2)
            u = lambda t: a * np.sin(b * t) + 0.2 * np.cos(2.1 * t)
            du = lambda t: a * b * np.cos(b * t) - 0.42 * np.sin(2.1 * t)
            n_pass, n_off, n_total = rate_identity_check(op, u, du)
            assert n_off >= 0.8 * n_total
            assert n_pass >= 0.95 * n_off

    def test_affine_in_udot(self):
        """The rate is affine in U_dot; a zero rate input recovers mu."""
        op = BoundaryOperator(TimeGrid(1.0, 6), d_v=4, n_layers=1,
                              kappa_hidden=4, b_hidden=3, seed=21)
        U = np.linspace(0.5, -1.5, 7)
        _, cache = op.forward(U)
        lam, mu = op.decomposition(cache)
        ud = np.full(7, 0.75)
        _, r1 = op.time_derivative(ud, cache, 4)
        _, r2 = op.time_derivative(2.0 * ud, cache, 4)
        _, r0 = op.time_derivative(np.zeros(7), cache, 4)
        assert r0 == mu[4]
        assert np.allclose(r2 - r1, lam[4] * 0.75, rtol=1e-12)

    def test_time_derivative_entry(self):
        op = BoundaryOperator(TimeGrid(1.0, 6), d_v=4, n_layers=1,
                              kappa_hidden=4, b_hidden=3, seed=12)
        U = np.linspace(1.0, -1.0, 7)
        _, cache = op.forward(U)
        lam, mu = op.decomposition(cache)
        ud = u_dot_forward(U, op.grid.dt)
        (l3, m3), rate = op.time_derivative(ud, cache, 3)
        assert l3 == lam[3] and m3 == mu[3]
        assert rate == lam[3] * ud[3] + mu[3]

    def test_stale_cache_rejected(self):
        op = BoundaryOperator(TimeGrid(1.0, 5), d_v=3, n_layers=1,
                              kappa_hidden=4, b_hidden=3, seed=13)
        _, cache = op.forward(np.zeros(6))
        op.layers[0].W[0, 0] += 1.0
        with pytest.raises(CacheStaleError):
            op.decomposition(cache)


class TestLossAndGradients:
    def test_perfect_fit_leaves_penalty_only(self):
        grid = TimeGrid(1.0, 4)
        op = identity_operator(grid)
        UU = np.array([[1.0, 2.0, 3.0, 4.0, 5.0],
                       [0.0, -1.0, 1.0, -1.0, 0.0]])
        loss, _ = op.loss_and_grads(UU, UU, l2=0.0)
        assert loss == 0.0
        loss, _ = op.loss_and_grads(UU, UU, l2=0.01)
        # weights: one lift entry, the identity mixing, one readout entry
        assert np.allclose(loss, 0.01 * (1.0 + op.d_v + 1.0), rtol=1e-12)

    def test_zero_operator_unit_targets(self):
        op = BoundaryOperator(TimeGrid(1.0, 4), d_v=3, n_layers=1,
                              kappa_hidden=4, b_hidden=3, seed=14)
        zero_all(op.params())
        UU = np.ones((2, 5))
        loss, _ = op.loss_and_grads(UU, np.ones((2, 5)))
        assert loss == 1.0

    def test_sample_mask_selects_entries(self):
        op = BoundaryOperator(TimeGrid(1.0, 4), d_v=3, n_layers=1,
                              kappa_hidden=4, b_hidden=3, seed=15)
        zero_all(op.params())
        UU = np.zeros((1, 5))
        YY = np.array([[3.0, 0.0, 0.0, 0.0, 1.0]])
        mask = np.array([[True, False, False, False, True]])
        loss, _ = op.loss_and_grads(UU, YY, sample_mask=mask)
        assert loss == (9.0 + 1.0) / 2.0
        with pytest.raises(ValueError):
            op.loss_and_grads(UU, YY, sample_mask=np.zeros((1, 5), bool))

    def test_gradients_match_finite_differences(self):
        grid = TimeGrid(1.0, 5)
        op = BoundaryOperator(grid, d_v=3, n_layers=1, kappa_hidden=4,
                              b_hidden=3, seed=16)
        rng = np.random.default_rng(17)
        UU = rng.normal(size=(2, 6))
        YY = rng.normal(size=(2, 6))
        _, grads = op.loss_and_grads(UU, YY, l2=1e-3)
        params = op.params()
        h = 1e-6
        checked = 0
        for pi in rng.permutation(len(params))[:5]:
            p, g = params[pi], grads[pi]
            idx = tuple(rng.integers(0, s) for s in p.shape)
            keep = p[idx]
            p[idx] = keep + h
            up, _ = op.loss_and_grads(UU, YY, l2=1e-3)
            p[idx] = keep - h
            dn, _ = op.loss_and_grads(UU, YY, l2=1e-3)
            p[idx] = keep
            fd = (up - dn) / (2.0 * h)
            assert np.allclose(g[idx], fd, rtol=1e-4, atol=1e-7)
            checked += 1
        assert checked == 5


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        grid = TimeGrid(1.5, 6)
        op = BoundaryOperator(grid, d_v=4, n_layers=2, kappa_hidden=8,
                              b_hidden=4, seed=18)
        path = tmp_path / "op.ckpt"
        op.save(path)
        back = BoundaryOperator.load(path)
        assert back.grid.T == grid.T and back.grid.M == grid.M
        assert back.fingerprint() == op.fingerprint()
        U = np.linspace(-2.0, 2.0, 7)
        Ya, _ = op.forward(U)
        Yb, _ = back.forward(U)
        assert np.array_equal(Ya, Yb)

    def test_load_rejects_other_kinds(self, tmp_path):
        path = tmp_path / "other.ckpt"
        write_checkpoint(path, "mlp", {"W0": np.zeros((1, 1))})
        with pytest.raises(ConfigurationError):
            BoundaryOperator.load(path)

    def test_with_grid_resolution_consistency(self):
        """The quadrature refines smoothly: doubling the grid moves outputs
        at shared times by only a few percent for a smooth input."""
        coarse = TimeGrid(2.0, 25)
        fine = TimeGrid(2.0, 50)
        op = BoundaryOperator(coarse, d_v=4, n_layers=1, kappa_hidden=8,
                              b_hidden=4, seed=19)
        op2 = op.with_grid(fine)
        f = lambda t: np.sin(1.7 * t) + 0.5 * t
        Yc, _ = op.forward(f(coarse.times()))
        Yf, _ = op2.forward(f(fine.times()))
        scale = np.maximum(np.abs(Yc), 1.0)
        assert np.max(np.abs(Yc - Yf[::2]) / scale) <= 0.05

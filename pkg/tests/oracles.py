"""Shared reference implementations used by several test modules.

The operator's time derivative differentiates the output-time slot only: the
kernel's first argument, the bias, and the local path through U(t).  The
matching finite-difference oracle therefore evaluates the operator at
perturbed output times while keeping the integration nodes (and the layer
activations stored at them) frozen.
"""

import numpy as np

from safebc.neural_operator import trapezoid_weights


def frozen_quadrature_eval(op, cache, u_func, t, batch=0):
    """Operator output at an arbitrary output time.

    Returns (value, signs) where signs collects the sign pattern of every
    ReLU argument touched by the evaluation (layer activations and the
    hidden layers of the table networks); comparing patterns across nearby
    times detects kink crossings exactly.
    """
    w = trapezoid_weights(op.grid)
    nodes = op.grid.times()
    n = nodes.size
    signs = []
    v_t = op.P.forward(np.array([[float(u_func(t))]]))[0]
    for li, layer in enumerate(op.layers):
        v_nodes = cache.vs[li][batch]
        pairs = np.empty((n, 2))
        pairs[:, 0] = t
        pairs[:, 1] = nodes
        if layer.kappa.activations[0] == "relu":
            W0, b0 = layer.kappa.params()[0], layer.kappa.params()[1]
            signs.append((pairs @ W0.T + b0 > 0.0).ravel())
        K = layer.kappa.forward(pairs).reshape(n, layer.dim_out, layer.dim_in)
        integ = np.einsum("j,joi,ji->o", w, K, v_nodes)
        if layer.b.activations[0] == "relu":
            W0, b0 = layer.b.params()[0], layer.b.params()[1]
            signs.append((np.array([[t]]) @ W0.T + b0 > 0.0).ravel())
        z = layer.W @ v_t + integ + layer.b.forward(np.array([[t]]))[0]
        if layer.activation == "relu":
            signs.append(z > 0.0)
            v_t = np.maximum(z, 0.0)
        else:
            v_t = z
    value = float(op.Q.forward(v_t[None])[0, 0])
    return value, np.concatenate(signs) if signs else np.zeros(0, dtype=bool)


def rate_identity_check(op, u_func, du_func, h=1e-5, rel_tol=1e-3):
    """Compare Lambda*U_dot + mu against the frozen-quadrature central
    difference at every grid step.

    Returns (n_pass, n_offkink, n_total); a step counts as off-kink when the
    ReLU sign patterns at t-h, t, t+h all agree.
    """
    t_nodes = op.grid.times()
    U = np.array([u_func(t) for t in t_nodes])
    _, cache = op.forward(U)
    lam, mu = op.decomposition(cache)
    n_pass = n_off = 0
    for m, t in enumerate(t_nodes):
        lo, s_lo = frozen_quadrature_eval(op, cache, u_func, t - h)
        hi, s_hi = frozen_quadrature_eval(op, cache, u_func, t + h)
        _, s_mid = frozen_quadrature_eval(op, cache, u_func, t)
        if not (np.array_equal(s_lo, s_mid) and np.array_equal(s_mid, s_hi)):
            continue
        n_off += 1
        fd = (hi - lo) / (2.0 * h)
        model = lam[m] * du_func(t) + mu[m]
        if abs(fd - model) <= rel_tol * max(abs(fd), 1e-9):
            n_pass += 1
    return n_pass, n_off, t_nodes.size

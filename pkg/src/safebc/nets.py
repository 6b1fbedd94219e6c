"""Minimal neural substrate: ReLU/linear MLPs with exact input Jacobians,
reverse-mode parameter gradients, and an Adam optimizer with stepped
learning-rate decay.

Everything is float64 numpy. Reductions run in fixed index order so repeated
runs with the same seed are bitwise identical on the same machine.
"""

from __future__ import annotations

import numpy as np

_ACTIVATIONS = ("relu", "linear")


def subseed(seed, k):
    """Derive a child seed: flattens tuple seeds so numpy accepts them."""
    if isinstance(seed, tuple):
        return (*seed, k)
    return (seed, k)


def _as_batch(x, dim, name="x"):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{name} must have {dim} features, got shape {x.shape}")
    return x, squeeze


class Mlp:
    """Fully connected network; the final layer is always linear.

    Parameters
    ----------
    layer_dims : sequence of int
        Sizes [d_in, d_h1, ..., d_out]; at least two entries.
    activations : sequence of str, optional
        One tag per layer from {"relu", "linear"}. Defaults to relu on every
        hidden layer and linear on the output layer.
    seed : int or numpy seed-like
        Seeds the He-uniform weight initialization (biases start at zero).
    """

    def __init__(self, layer_dims, activations=None, seed=0):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"bad layer dims {layer_dims}")
        n_layers = len(dims) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["linear"]
        activations = list(activations)
        if len(activations) != n_layers:
            raise ValueError("need one activation per layer")
        if any(a not in _ACTIVATIONS for a in activations):
            raise ValueError(f"activations must be in {_ACTIVATIONS}")
        if activations[-1] != "linear":
            raise ValueError("final layer must be linear")
        self.layer_dims = dims
        self.activations = activations
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def params(self):
        """Parameter arrays in fixed order [W0, b0, W1, b1, ...] (live views)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def param_is_weight(self):
        """Parallel to params(): True for weight matrices, False for biases."""
        return [True, False] * len(self.weights)

    def forward(self, x):
        """Evaluate the network; x is (d_in,) or (B, d_in)."""
        a, squeeze = _as_batch(x, self.in_dim)
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ W.T + b
            a = np.maximum(z, 0.0) if act == "relu" else z
        return a[0] if squeeze else a

    def _forward_trace(self, a):
        # a is already a (B, d_in) batch; returns post-activations per layer
        # (inputs[0] is the batch itself) and relu masks (None for linear).
        inputs = [a]
        masks = []
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ W.T + b
            if act == "relu":
                mask = (z > 0.0).astype(np.float64)
                a = z * mask
            else:
                mask = None
                a = z
            masks.append(mask)
            inputs.append(a)
        return inputs, masks

    def input_jacobian(self, x):
        """Exact Jacobian dy/dx: (d_out, d_in) for a single x, (B, d_out, d_in)
        for a batch. At a ReLU kink the inactive subgradient (0) is used."""
        a, squeeze = _as_batch(x, self.in_dim)
        B = a.shape[0]
        J = np.broadcast_to(np.eye(self.in_dim), (B, self.in_dim, self.in_dim))
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ W.T + b
            J = np.einsum("oi,bij->boj", W, J)
            if act == "relu":
                mask = (z > 0.0).astype(np.float64)
                J = J * mask[:, :, None]
                a = z * mask
            else:
                a = z
        return J[0] if squeeze else J

    def backprop(self, x, upstream):
        """Reverse pass for the scalar sum_b upstream[b] . f(x[b]).

        Returns (grads, dx): grads in params() order summed over the batch,
        dx = d/dx with the same leading shape as x.
        """
        a, squeeze = _as_batch(x, self.in_dim)
        up, up_squeeze = _as_batch(upstream, self.out_dim, "upstream")
        if up.shape[0] != a.shape[0]:
            raise ValueError("upstream batch size does not match x")
        inputs, masks = self._forward_trace(a)
        n = len(self.weights)
        grads = [None] * (2 * n)
        delta = up  # final layer is linear: dL/dz = upstream
        for k in range(n - 1, -1, -1):
            grads[2 * k] = delta.T @ inputs[k]
            grads[2 * k + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[k]
            if k > 0 and masks[k - 1] is not None:
                delta = delta * masks[k - 1]
        dx = delta
        return grads, (dx[0] if squeeze else dx)

    def directional_derivative(self, x, d):
        """J(x) . d via a tangent pass with the activation pattern frozen at x."""
        a, squeeze = _as_batch(x, self.in_dim)
        u, _ = _as_batch(d, self.in_dim, "d")
        if u.shape[0] != a.shape[0]:
            raise ValueError("direction batch size does not match x")
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ W.T + b
            u = u @ W.T
            if act == "relu":
                mask = (z > 0.0).astype(np.float64)
                a = z * mask
                u = u * mask
            else:
                a = z
        return u[0] if squeeze else u

    def directional_param_backprop(self, x, d, upstream):
        """Parameter gradients of sum_b upstream[b] . (J(x[b]) . d[b]).

        The activation masks are treated as locally constant (exact away from
        kinks), so bias gradients are exactly zero.
        """
        a, squeeze = _as_batch(x, self.in_dim)
        u, _ = _as_batch(d, self.in_dim, "d")
        up, _ = _as_batch(upstream, self.out_dim, "upstream")
        tangent_in = [u]
        masks = []
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ W.T + b
            u = u @ W.T
            if act == "relu":
                mask = (z > 0.0).astype(np.float64)
                a = z * mask
                u = u * mask
            else:
                mask = None
                a = z
            masks.append(mask)
            tangent_in.append(u)
        n = len(self.weights)
        grads = [None] * (2 * n)
        g = up
        for k in range(n - 1, -1, -1):
            if masks[k] is not None:
                g = g * masks[k]
            grads[2 * k] = g.T @ tangent_in[k]
            grads[2 * k + 1] = np.zeros_like(self.biases[k])
            g = g @ self.weights[k]
        return grads

    def tensors(self, prefix=""):
        out = {}
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{k}"] = W
            out[f"{prefix}b{k}"] = b
        return out

    def set_tensors(self, tensors, prefix=""):
        for k in range(len(self.weights)):
            W = np.asarray(tensors[f"{prefix}W{k}"], dtype=np.float64)
            b = np.asarray(tensors[f"{prefix}b{k}"], dtype=np.float64)
            self.weights[k][...] = W.reshape(self.weights[k].shape)
            self.biases[k][...] = b.reshape(self.biases[k].shape)


class Adam:
    """Adam with bias correction; the learning rate can decay by a fixed factor
    every `decay_every` epochs (applied via start_epoch)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 decay_factor=None, decay_every=None):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        if (decay_factor is None) != (decay_every is None):
            raise ValueError("decay_factor and decay_every go together")
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def start_epoch(self, epoch):
        """Apply the decay schedule on entry to 0-based `epoch`."""
        if (self.decay_factor is not None and epoch > 0
                and epoch % self.decay_every == 0):
            self.lr *= self.decay_factor

    def step(self, params, grads):
        """One in-place update. Rejects non-finite gradients."""
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("params/grads do not match optimizer state")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise ValueError("non-finite gradient; update rejected")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

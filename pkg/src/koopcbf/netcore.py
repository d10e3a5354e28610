"""Dense feedforward networks with exact analytic derivatives.

Everything here operates on plain numpy arrays.  Networks are tanh MLPs
with an identity output layer; weights are stored as (out, in) matrices.
Besides the usual forward/backward passes, this module provides the
forward-over-reverse pass needed to differentiate directional derivatives
of a network output with respect to its parameters (used by the barrier
training loss), plus spectral-norm machinery for Lipschitz control.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised on input/parameter dimension mismatch."""


class RescaleError(ValueError):
    """Raised when spectral rescaling is undefined (zero weight matrix)."""


class OptimizerError(ValueError):
    """Raised when an optimizer step cannot be applied."""


@dataclass
class FeedforwardNet:
    """Tanh MLP: hidden layers tanh, last layer identity (affine)."""

    weights: list  # list of (out, in) float arrays
    biases: list   # list of (out,) float arrays

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights/biases count mismatch")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: bad shapes {W.shape} / {b.shape}")
            if i > 0 and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i}: dim chain broken")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def n_layers(self):
        return len(self.weights)

    def params(self):
        """Flat list of parameter arrays (weights then biases, layer order)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def copy(self):
        return FeedforwardNet([W.copy() for W in self.weights],
                              [b.copy() for b in self.biases])


def init_net(dims, rng):
    """Glorot-uniform initialized net for a dim chain like [3, 32, 32, 5]."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return FeedforwardNet(weights, biases)


def _as_batch(x, dim, name="x"):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != dim:
        raise ShapeError(f"{name} has dim {x.shape[-1]}, expected {dim}")
    return x, squeeze


def forward(net, x):
    """Evaluate the network; accepts a single vector or a (B, in_dim) batch."""
    x, squeeze = _as_batch(x, net.in_dim)
    a = x
    last = net.n_layers - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        s = a @ W.T + b
        a = s if i == last else np.tanh(s)
    return a[0] if squeeze else a


def forward_cached(net, x):
    """Forward pass keeping all layer activations (for backprop)."""
    x, _ = _as_batch(x, net.in_dim)
    acts = [x]
    last = net.n_layers - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        s = acts[-1] @ W.T + b
        acts.append(s if i == last else np.tanh(s))
    return acts[-1], acts


def grad_params(net, acts, out_grad):
    """Reverse pass for loss = sum_b out_grad[b] . net(x_b).

    `acts` must come from forward_cached on the same inputs.  Returns
    (dweights, dbiases, dinput); gradients are summed over the batch,
    dinput is per-sample (B, in_dim).
    """
    if acts is None or len(acts) != net.n_layers + 1:
        raise OptimizerError("missing or stale forward cache")
    g = np.asarray(out_grad, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    dW = [None] * net.n_layers
    db = [None] * net.n_layers
    last = net.n_layers - 1
    for i in range(last, -1, -1):
        # g is the gradient w.r.t. a[i+1]; convert to grad w.r.t. s_i
        gs = g if i == last else g * (1.0 - acts[i + 1] ** 2)
        dW[i] = gs.T @ acts[i]
        db[i] = gs.sum(axis=0)
        g = gs @ net.weights[i]
    return dW, db, g


def input_jacobian(net, x):
    """Exact Jacobian d net(x) / d x, shape (out_dim, in_dim)."""
    return input_jacobian_batch(np.asarray(x, dtype=float)[None, :], net)[0]


def input_jacobian_batch(x, net):
    """Batched Jacobians, shape (B, out_dim, in_dim)."""
    x, _ = _as_batch(x, net.in_dim)
    _, acts = forward_cached(net, x)
    J = np.broadcast_to(net.weights[-1], (x.shape[0],) + net.weights[-1].shape).copy()
    for i in range(net.n_layers - 2, -1, -1):
        d = 1.0 - acts[i + 1] ** 2        # tanh' at layer i output
        J = (J * d[:, None, :]) @ net.weights[i]
    return J


def jvp(net, x, v):
    """Forward pass together with the tangent pass J(x) @ v.

    Returns (y, tangent, cache) where cache feeds directional_grads.
    """
    x, _ = _as_batch(x, net.in_dim)
    v, _ = _as_batch(v, net.in_dim, "v")
    acts, tangs, pretangs = [x], [v], []
    last = net.n_layers - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        s = acts[-1] @ W.T + b
        ts = tangs[-1] @ W.T
        pretangs.append(ts)
        if i == last:
            acts.append(s)
            tangs.append(ts)
        else:
            a = np.tanh(s)
            acts.append(a)
            tangs.append((1.0 - a ** 2) * ts)
    return acts[-1], tangs[-1], (acts, tangs, pretangs)


def directional_grads(net, cache, coeff):
    """Gradients of L = sum_b coeff[b] . (J(x_b) @ v_b) from a jvp cache.

    This is reverse mode over the combined primal+tangent graph, so it
    carries exact second-order information through tanh''.  Returns
    (dweights, dbiases, dx, dv) with dx, dv per-sample.
    """
    acts, tangs, pretangs = cache
    g_t = np.asarray(coeff, dtype=float)
    if g_t.ndim == 1:
        g_t = g_t[None, :]
    g_a = np.zeros_like(g_t)
    dW = [None] * net.n_layers
    db = [None] * net.n_layers
    last = net.n_layers - 1
    for i in range(last, -1, -1):
        if i == last:
            g_ts, g_s = g_t, g_a
        else:
            a = acts[i + 1]
            d1 = 1.0 - a ** 2
            d2 = -2.0 * a * d1             # tanh''
            g_ts = g_t * d1
            g_s = g_a * d1 + g_t * pretangs[i] * d2
        dW[i] = g_ts.T @ tangs[i] + g_s.T @ acts[i]
        db[i] = g_s.sum(axis=0)
        g_t = g_ts @ net.weights[i]
        g_a = g_s @ net.weights[i]
    return dW, db, g_a, g_t


def spectral_norm(W, iters=100, seed=0):
    """Largest singular value of W via seeded power iteration."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    W = np.asarray(W, dtype=float)
    if not np.any(W):
        return 0.0
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(W.shape[1])
    u /= np.linalg.norm(u)
    sigma = 0.0
    for _ in range(iters):
        v = W @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            # u landed in the null space; restart from a fresh direction
            u = rng.standard_normal(W.shape[1])
            u /= np.linalg.norm(u)
            continue
        v /= nv
        u = W.T @ v
        sigma = np.linalg.norm(u)
        u /= sigma
    return float(sigma)


def spectral_normalize(net, K_target, iters=100, seed=0):
    """Rescale every weight matrix so the layer norms multiply to K_target.

    Each layer gets spectral norm K_target**(1/n_layers); biases are left
    untouched (they do not affect the Lipschitz bound).  Modifies the net
    in place and returns it.
    """
    if K_target <= 0:
        raise ValueError("K_target must be positive")
    per_layer = K_target ** (1.0 / net.n_layers)
    for i, W in enumerate(net.weights):
        sigma = spectral_norm(W, iters=iters, seed=seed)
        if sigma == 0.0:
            raise RescaleError(f"layer {i} is the zero matrix")
        W *= per_layer / sigma
    return net


@dataclass
class OptimizerState:
    """Adam (default) or plain SGD over a flat list of parameter arrays."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "adam"  # "adam" | "sgd"
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        """Apply one descent update in place."""
        if len(params) != len(grads):
            raise OptimizerError("params/grads length mismatch")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise OptimizerError("non-finite gradient; step rejected")
        if self.mode == "sgd":
            for p, g in zip(params, grads):
                p -= self.lr * g
            self.step_count += 1
            return params
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params

"""Fully-connected encoder with analytic backpropagation and SGD.

The encoder maps a task descriptor t to actuation amplitudes a.  Every
layer applies tanh; the final activation is additionally scaled by
out_scale, which callers set to the actuation bound a_max = 0.6 x cell
width.  The bound therefore holds structurally: |a_i| < out_scale for
any weights.

Weights are a list of (W, b) pairs with W of shape (n_out, n_in).
forward/backward accept a single descriptor (m,) or a batch (B, m);
batched backward sums weight gradients over the batch, matching the
fixed-order summed reduction used by the trainer.
"""

import numpy as np
from dataclasses import dataclass, field

from .geometry import project_params


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes (input, hidden..., output) and output scale."""

    sizes: tuple
    out_scale: float = 1.0

    def __post_init__(self):
        if len(self.sizes) < 3:
            raise ValueError("need at least one hidden layer")
        if any(int(n) <= 0 for n in self.sizes):
            raise ValueError("layer sizes must be positive")
        if not self.out_scale > 0:
            raise ValueError("out_scale must be positive")


def init_weights(spec, seed):
    """Seeded uniform fan-in initialization: U(-1/sqrt(n_in), 1/sqrt(n_in))."""
    rng = np.random.default_rng(seed)
    theta = []
    for n_in, n_out in zip(spec.sizes[:-1], spec.sizes[1:]):
        s = 1.0 / np.sqrt(n_in)
        W = rng.uniform(-s, s, size=(n_out, n_in))
        b = rng.uniform(-s, s, size=n_out)
        theta.append((W, b))
    return theta


def forward(spec, theta, t):
    """Encoder output and the activation cache needed by backward."""
    t = np.asarray(t, dtype=float)
    single = t.ndim == 1
    x = np.atleast_2d(t)
    if x.shape[1] != spec.sizes[0]:
        raise ValueError("descriptor has %d entries, expected %d"
                         % (x.shape[1], spec.sizes[0]))
    hs = [x]
    for W, b in theta:
        x = np.tanh(x @ W.T + b)
        hs.append(x)
    a = spec.out_scale * x
    return (a[0] if single else a), hs


def backward(spec, theta, cache, dL_da):
    """Reverse-mode gradients: list of (dW, db) plus dL/dt.

    Weight gradients are summed over the batch dimension; the input
    gradient keeps the shape of dL_da.
    """
    g = np.asarray(dL_da, dtype=float)
    single = g.ndim == 1
    delta = np.atleast_2d(g) * spec.out_scale * (1.0 - cache[-1] ** 2)
    grads = [None] * len(theta)
    for l in range(len(theta) - 1, -1, -1):
        W, _ = theta[l]
        grads[l] = (delta.T @ cache[l], delta.sum(axis=0))
        delta = delta @ W
        if l > 0:
            delta = delta * (1.0 - cache[l] ** 2)
    return grads, (delta[0] if single else delta)


def theta_to_vector(theta):
    """Flatten weights for checkpointing."""
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in theta])


def vector_to_theta(spec, vec):
    """Inverse of theta_to_vector for the given architecture."""
    theta, k = [], 0
    for n_in, n_out in zip(spec.sizes[:-1], spec.sizes[1:]):
        W = vec[k:k + n_out * n_in].reshape(n_out, n_in).copy()
        k += n_out * n_in
        b = vec[k:k + n_out].copy()
        k += n_out
        theta.append((W, b))
    if k != vec.size:
        raise ValueError("vector length does not match architecture")
    return theta


@dataclass
class OptimState:
    """Plain SGD state; geometry may use its own rate."""

    lr: float
    lr_geometry: float = None
    step: int = 0

    def __post_init__(self):
        if self.lr_geometry is None:
            self.lr_geometry = self.lr


def sgd_step(theta, d_theta, state, *, geometry=None, d_radii=None,
             d_corners=None, d_color=None, layout=None):
    """In-place descent step, then box projection of geometry params.

    Encoder weights are unconstrained; radii clip to [0.1, 0.9], corner
    offsets to their boxes and the color field to [0, 1] (projection
    requires layout when geometry is given).
    """
    if theta is not None:
        for (W, b), (dW, db) in zip(theta, d_theta):
            W -= state.lr * dW
            b -= state.lr * db
    if geometry is not None:
        if d_radii is not None:
            geometry.radii -= state.lr_geometry * d_radii
        if d_corners is not None:
            geometry.corners -= state.lr_geometry * d_corners
        if d_color is not None:
            geometry.color -= state.lr_geometry * d_color
        project_params(layout, geometry)
    state.step += 1
    return theta, geometry

"""Finite-difference checks of the analytic gradients.

The reference forward pass below is written directly in numpy, separately
from the tape, and evaluated in extended precision so that the central
difference with a 1e-6 step is not swamped by float64 rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import WINDOW
from .nn import Params, depth_of, init_params, loss_and_grad

EXT = np.longdouble


def _act(name, a):
    return np.tanh(a) if name == "tanh" else np.maximum(a, 0)


def reference_forward(kind, activation, views, X):
    """Forward pass on plain arrays; ``views`` maps parameter names to arrays."""
    if kind == "sirnn":
        h = np.zeros((X.shape[0], views["W_hh_0"].shape[0]), dtype=X.dtype)
        ks = []
        for i in range(WINDOW):
            s = f"_{i}"
            W_in = np.concatenate([views["W_xh" + s], views["W_yh" + s], views["W_uh" + s]], axis=1)
            h = _act(activation, X[:, i] @ W_in.T + h @ views["W_hh" + s].T + views["b_1" + s])
            ks.append(_act(activation, h @ views["W_h" + s].T + views["b" + s]))
        return np.concatenate(ks, axis=1) @ views["W_l"].T + views["b_l"]
    W_in = np.concatenate([views["W_xh"], views["W_yh"], views["W_uh"]], axis=1)
    h = np.zeros((X.shape[0], views["W_hh"].shape[0]), dtype=X.dtype)
    for i in range(WINDOW - depth_of(kind), WINDOW):
        h = _act(activation, X[:, i] @ W_in.T + h @ views["W_hh"].T + views["b_1"])
    return h @ views["W_h"].T + views["b_h"]


def reference_loss(p: Params, theta, X, T, dtype=EXT):
    theta = np.asarray(theta, dtype=dtype)
    views, off = {}, 0
    for name, shape in p.shapes.items():
        n = int(np.prod(shape))
        views[name] = theta[off:off + n].reshape(shape)
        off += n
    err = reference_forward(p.kind, p.activation, views, np.asarray(X, dtype=dtype)) - np.asarray(T, dtype=dtype)
    return np.mean(np.sum(err * err, axis=1))


def relative_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)


@dataclass
class GradcheckResult:
    max_rel_err: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def check_params(p: Params, X, T, coords, h: float = 1e-6) -> float:
    """Largest relative error between tape gradients and central differences."""
    _, grad = loss_and_grad(p, X, T)
    base = p.theta.astype(EXT)
    worst = 0.0
    for i in coords:
        up, dn = base.copy(), base.copy()
        up[i] += h
        dn[i] -= h
        fd = (reference_loss(p, up, X, T) - reference_loss(p, dn, X, T)) / (2 * h)
        worst = max(worst, float(relative_error(fd, grad[i])))
    return worst


def gradcheck(kind: str = "sirnn", activation: str = "tanh", hidden: int = 50, n_seeds: int = 10,
              n_coords: int = 100, batch: int = 16, seed: int = 0, tol: float = 1e-5) -> GradcheckResult:
    """Random parameters, random normalized batch, random coordinates; repeated per seed."""
    worst, checked = 0.0, 0
    for s in np.random.SeedSequence(seed).spawn(n_seeds):
        rng = np.random.default_rng(s)
        p = init_params(kind, hidden, activation, seed=int(rng.integers(2**31)))
        X = rng.standard_normal((batch, WINDOW, 7))
        T = rng.standard_normal((batch, 3))
        coords = rng.choice(p.size, size=min(n_coords, p.size), replace=False)
        worst = max(worst, check_params(p, X, T, coords))
        checked += len(coords)
    return GradcheckResult(worst, checked, tol)

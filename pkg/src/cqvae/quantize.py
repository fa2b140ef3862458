"""Coordinate-quantized latent space.

A latent code is an M x N matrix whose rows are distributions over N fixed
coordinates.  ``coordinate_map`` sends it to an M-vector, so a one-hot code
selects one grid point out of N**M.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS = 1e-20


def coordinates(n, low=-2.0, high=2.0):
    """N evenly spaced coordinates on [low, high]."""
    if n < 1:
        raise ValueError("need at least one coordinate")
    if n == 1:
        return np.array([0.5 * (low + high)])
    c = np.linspace(low, high, n)
    check_coordinates(c)
    return c


def check_coordinates(c):
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ValueError(f"coordinate vector must be 1-D and nonempty, got shape {c.shape}")
    if np.any(np.diff(c) <= 0):
        raise ValueError("coordinate vector must be strictly increasing")
    return c


def coordinate_map(z, c):
    """z' = z @ c, row by row.  Accepts arrays or Tensors with trailing (M, N) axes."""
    n = np.shape(c)[-1] if not isinstance(c, Tensor) else c.shape[-1]
    zn = z.shape[-1]
    if zn != n:
        raise ad.ShapeError(f"coordinate_map: code has {zn} columns but c has {n} entries")
    if isinstance(z, Tensor):
        c = c if isinstance(c, Tensor) else Tensor(np.asarray(c), dtype=z.dtype)
        return ad.matmul(z, c)
    return np.asarray(z) @ np.asarray(c)


def count_codes(m, n):
    """Number of distinct one-hot codes, N**M, as an exact integer."""
    if m < 1 or n < 1:
        raise ValueError("M and N must be positive")
    return int(n) ** int(m)


def entropy(z):
    """Natural-log entropy summed over every entry, with 0 log 0 = 0."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0):
        raise ValueError("entropy: probability matrix has negative entries")
    safe = np.where(z > 0, z, 1.0)
    return float(-np.sum(z * np.log(safe))) + 0.0  # + 0.0 turns -0.0 into 0.0


def row_entropy(z):
    z = np.asarray(z, dtype=np.float64)
    safe = np.where(z > 0, z, 1.0)
    return -np.sum(z * np.log(safe), axis=-1) + 0.0


def kl_to_uniform(z):
    """Sum over rows of KL(row || uniform over N)."""
    z = np.asarray(z, dtype=np.float64)
    m, n = z.shape[-2:]
    return float(np.sum(m * math.log(n) - np.sum(row_entropy(z), axis=-1)))


def entropy_tensor(log_p):
    """Differentiable entropy from log-probabilities, summed over the last two axes."""
    p = ad.exp(log_p)
    return -ad.sum_(ad.mul(p, log_p), axis=(-2, -1))


def check_probability_matrix(pi, atol=1e-6):
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi < -atol) or np.any(pi > 1 + atol):
        raise ValueError("probability matrix entries must lie in [0, 1]")
    if not np.allclose(pi.sum(axis=-1), 1.0, atol=atol):
        raise ValueError("probability matrix rows must sum to 1")
    return pi


def gumbel_noise(shape, rng, dtype=np.float64):
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_softmax_sample(pi, tau, rng=None, noise=None, straight_through=False, log_pi=None):
    """Relaxed categorical sample per row: softmax((g + log pi) / tau).

    ``pi`` may be a Tensor, in which case the sample is differentiable w.r.t.
    it.  Pass precomputed ``log_pi`` to skip the ``log(pi + eps)`` guard.
    With ``straight_through`` the forward value is the hardened one-hot row
    while gradients follow the relaxed softmax.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if log_pi is None:
        log_pi = ad.log(ad.add(ad.as_tensor(pi), EPS)) if isinstance(pi, Tensor) else np.log(np.asarray(pi) + EPS)
    shape = log_pi.shape
    if noise is None:
        if rng is None:
            raise ValueError("need either rng or noise")
        noise = gumbel_noise(shape, rng)
    if isinstance(log_pi, Tensor):
        y = ad.softmax(ad.mul(ad.add(log_pi, np.asarray(noise, dtype=log_pi.dtype)), 1.0 / tau))
        if straight_through:
            hard = harden(y.data).astype(y.dtype)
            y = ad.add(ad.sub(y, ad.stop_gradient(y)), hard)
        return y
    logits = (np.asarray(log_pi, dtype=np.float64) + noise) / tau
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    y = e / e.sum(axis=-1, keepdims=True)
    return harden(y) if straight_through else y


def gumbel_max_sample(pi, rng=None, noise=None):
    """Exact categorical sample per row as a one-hot code (the zero-temperature limit)."""
    log_pi = np.log(np.asarray(pi, dtype=np.float64) + EPS)
    if noise is None:
        noise = gumbel_noise(log_pi.shape, rng)
    return harden(log_pi + noise)


def harden(sample):
    """One-hot at each row's argmax; ties go to the lowest column."""
    sample = np.asarray(sample)
    idx = np.argmax(sample, axis=-1)
    out = np.zeros(sample.shape, dtype=np.float64)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def random_codes(count, m, n, rng):
    """Uniformly random one-hot codes, shape (count, M, N)."""
    idx = rng.integers(0, n, size=(count, m))
    out = np.zeros((count, m, n))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


class TemperatureSchedule:
    """Exponential anneal from ``start`` to ``end`` over ``steps``, then flat."""

    def __init__(self, start=1.0, end=0.3, steps=10000):
        if start <= 0 or end <= 0:
            raise ValueError("temperatures must be positive")
        self.start, self.end, self.steps = start, end, max(int(steps), 1)

    def __call__(self, step):
        frac = min(step / self.steps, 1.0)
        return self.start * (self.end / self.start) ** frac

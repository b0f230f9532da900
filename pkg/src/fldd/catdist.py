"""Categorical and Concrete (relaxed categorical) distributions.

Categories are 0-based indices. Probability vectors ("simplexes") are float64
arrays whose last axis sums to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd

SIMPLEX_TOL = 1e-9
PROB_FLOOR = 1e-8
# lower clamp inside logs of probabilities that may be exactly zero
LOG_TINY = 1e-30


def check_simplex(p: np.ndarray, tol: float = SIMPLEX_TOL):
    """Raise ValueError unless every row of p is a valid probability vector."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 1:
        raise ValueError("empty probability vector")
    if np.any(p < 0):
        raise ValueError("negative probability entry")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > tol):
        raise ValueError(f"probabilities sum to {s} (expected 1 within {tol})")
    return p


def floor_simplex(p: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    """Clamp entries to at least `floor`, then renormalize rows."""
    q = np.maximum(np.asarray(p, dtype=np.float64), floor)
    return q / q.sum(axis=-1, keepdims=True)


def floor_simplex_var(p: nd.Var, floor: float = PROB_FLOOR) -> nd.Var:
    """Differentiable counterpart of floor_simplex."""
    q = nd.clamp(p, lo=floor)
    return nd.div(q, nd.vsum(q, axis=-1, keepdims=True))


def sample_cat(p, rng: np.random.Generator) -> int:
    """Draw one category index from a single probability vector."""
    p = check_simplex(np.asarray(p, dtype=np.float64))
    if p.ndim != 1:
        raise ValueError("sample_cat expects a single probability vector")
    return int(sample_cat_batch(p[None, :], rng)[0])


def sample_cat_batch(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of p (shape (..., K)) via inverse CDF."""
    p = np.asarray(p, dtype=np.float64)
    cum = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1])
    idx = (u[..., None] >= cum).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def kl_cat(q, p) -> float:
    """KL(q || p) for two probability vectors, with 0*log(0/.) = 0.

    Returns +inf when q puts mass where p has none; training code must keep
    the second argument floored away from zero.
    """
    q = check_simplex(q)
    p = check_simplex(p)
    if q.shape != p.shape:
        raise ValueError(f"kl_cat: shape mismatch {q.shape} vs {p.shape}")
    support = q > 0.0
    if np.any(support & (p == 0.0)):
        return float("inf")
    qs, ps = q[support], p[support]
    return float(np.sum(qs * (np.log(qs) - np.log(ps))))


def kl_rows(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Row-wise KL over the last axis for batched simplexes (numpy path).

    p must be strictly positive (use floor_simplex); q may have exact zeros.
    """
    q = np.asarray(q, dtype=np.float64)
    terms = q * (np.log(np.maximum(q, LOG_TINY)) - np.log(p))
    return terms.sum(axis=-1)


def kl_rows_var(q: nd.Var, p: nd.Var) -> nd.Var:
    """Differentiable row-wise KL over the last axis.

    Same contract as kl_rows: p strictly positive, q may touch zero.
    """
    logq = nd.log(nd.clamp(q, lo=LOG_TINY))
    terms = nd.mul(q, nd.sub(logq, nd.log(p)))
    return nd.vsum(terms, axis=-1)


def entropy_rows(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -(p * np.log(np.maximum(p, LOG_TINY))).sum(axis=-1)


@dataclass
class RelaxedSample:
    """Interior-of-simplex weights drawn from a Concrete distribution."""

    weights: object  # ndgrad.Var or ndarray, shape (..., K)
    tau: float


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def concrete_weights(logits, noise: np.ndarray, tau: float):
    """softmax((logits + noise)/tau); differentiable when logits is a Var."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if isinstance(logits, nd.Var):
        return nd.softmax(nd.mul(nd.add(logits, noise), 1.0 / tau))
    z = (np.asarray(logits, dtype=np.float64) + noise) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_concrete(logits, tau: float, rng: np.random.Generator) -> RelaxedSample:
    """Draw a relaxed categorical sample with temperature tau."""
    shape = logits.value.shape if isinstance(logits, nd.Var) else np.shape(logits)
    g = gumbel_noise(shape, rng)
    return RelaxedSample(weights=concrete_weights(logits, g, tau), tau=tau)

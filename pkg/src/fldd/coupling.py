"""Maximum Coupling of two categorical distributions.

Given source marginals u_t and destination marginals u_s over the same K
categories, the maximum coupling is the transport plan that keeps the
category unchanged with the largest possible probability. Conditioned on the
source category k, the destination stays at k with probability
min(u_s[k], u_t[k]) / u_t[k]; the excess mass (u_t[k] - u_s[k])+ leaves k and
lands on deficit bins proportionally to (u_s - u_t)+.

Row k of the resulting matrix is the conditional distribution of the
destination given source category k. Mixing rows by u_t reproduces u_s
exactly (marginal consistency), and the stay probability sums to
1 - TV(u_s, u_t), which no coupling can exceed.
"""

from __future__ import annotations

import numpy as np

from .catdist import check_simplex

IDENTITY_TOL = 1e-12


def deficit_dist(u_s: np.ndarray, u_t: np.ndarray) -> np.ndarray:
    """Normalized positive part of (u_s - u_t); zeros when there is no deficit."""
    d = np.maximum(np.asarray(u_s, dtype=np.float64) - u_t, 0.0)
    total = d.sum()
    if total <= IDENTITY_TOL:
        return np.zeros_like(d)
    return d / total


def max_coupling_row(u_s, u_t, k: int) -> np.ndarray:
    """Conditional destination distribution given source category k."""
    u_s = check_simplex(u_s)
    u_t = check_simplex(u_t)
    if u_t[k] <= 0.0:
        raise ValueError(f"conditioning on zero-probability category {k}")
    row = np.zeros_like(u_t)
    if np.max(np.abs(u_s - u_t)) <= IDENTITY_TOL:
        row[k] = 1.0
        return row
    row[k] = min(u_s[k], u_t[k]) / u_t[k]
    excess = u_t[k] - u_s[k]
    if excess > 0.0:
        row = row + (excess / u_t[k]) * deficit_dist(u_s, u_t)
    return row


def coupling_matrix(u_s, u_t) -> np.ndarray:
    """All K conditional rows stacked; rows[k] == max_coupling_row(u_s, u_t, k).

    Source categories with u_t[k] == 0 get identity rows; they carry no mass,
    so marginal consistency is unaffected.
    """
    u_s = check_simplex(u_s)
    u_t = check_simplex(u_t)
    K = u_t.shape[0]
    if np.max(np.abs(u_s - u_t)) <= IDENTITY_TOL:
        return np.eye(K)
    safe_t = np.where(u_t > 0.0, u_t, 1.0)
    stay = np.minimum(u_s, u_t) / safe_t
    stay = np.where(u_t > 0.0, stay, 1.0)
    excess = np.maximum(u_t - u_s, 0.0) / safe_t
    m = deficit_dist(u_s, u_t)
    return np.diag(stay) + np.outer(excess, m)


def expected_stay_mass(u_s, u_t) -> float:
    """P(destination == source) under the plan: sum_k min(u_s[k], u_t[k]).

    Equals 1 - TV(u_s, u_t), the maximum over all couplings.
    """
    u_s = check_simplex(u_s)
    u_t = check_simplex(u_t)
    return float(np.minimum(u_s, u_t).sum())


def coupling_rows_batch(u_s: np.ndarray, u_t: np.ndarray,
                        k: np.ndarray) -> np.ndarray:
    """Vectorized conditional rows for batched marginals.

    u_s, u_t: (..., K) simplexes; k: (...) source categories. Returns
    (..., K) rows. Zero-probability conditioning (u_t[k] ~ 0, a transient
    during training) falls back to an identity row.
    """
    u_s = np.asarray(u_s, dtype=np.float64)
    u_t = np.asarray(u_t, dtype=np.float64)
    k = np.asarray(k)
    ut_k = np.take_along_axis(u_t, k[..., None], axis=-1)
    us_k = np.take_along_axis(u_s, k[..., None], axis=-1)
    safe = np.maximum(ut_k, IDENTITY_TOL)

    deficit = np.maximum(u_s - u_t, 0.0)
    total = deficit.sum(axis=-1, keepdims=True)
    m = deficit / np.maximum(total, IDENTITY_TOL)

    stay = np.minimum(us_k, ut_k) / safe
    excess = np.maximum(ut_k - us_k, 0.0) / safe
    rows = excess * m
    np.put_along_axis(rows, k[..., None],
                      np.take_along_axis(rows, k[..., None], axis=-1) + stay,
                      axis=-1)

    degenerate = (total[..., 0] <= IDENTITY_TOL) | (ut_k[..., 0] <= IDENTITY_TOL)
    if np.any(degenerate):
        eye = np.zeros_like(rows)
        np.put_along_axis(eye, k[..., None], 1.0, axis=-1)
        rows = np.where(degenerate[..., None], eye, rows)
    return rows

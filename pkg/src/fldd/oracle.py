"""Exact brute-force references for small instances.

Everything here enumerates joint states directly: the target distribution
induced by the noising process, exact expectations of the score-function
estimator, and finite-difference gradient checks. These are the ground truth
the stochastic training paths are tested against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .catdist import LOG_TINY, kl_rows_var
from .coupling import coupling_rows_batch
from .forward_process import coupling_rows_var
from .reverse_model import enumerate_states

DEFAULT_CAP = 10000


@dataclass
class EnumeratedLaw:
    """A full joint probability table over {0..K-1}^D."""

    K: int
    D: int
    probs: np.ndarray  # (K^D,), indexed by ravel_multi_index of the state

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        total = self.probs.sum()
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"law sums to {total}, expected 1 within 1e-10")

    @property
    def states(self) -> np.ndarray:
        return enumerate_states(self.K, self.D, cap=self.probs.shape[0])

    def marginal(self, i: int) -> np.ndarray:
        table = self.probs.reshape((self.K,) * self.D)
        axes = tuple(j for j in range(self.D) if j != i)
        return table.sum(axis=axes)

    def product_of_marginals(self) -> np.ndarray:
        out = np.ones_like(self.probs)
        states = self.states
        for i in range(self.D):
            out = out * self.marginal(i)[states[:, i]]
        return out


def induced_target(data_law: EnumeratedLaw, fwd, s: int, t: int,
                   z_t: np.ndarray, cap: int = DEFAULT_CAP) -> EnumeratedLaw:
    """Marginalize the posterior over q(x | z_t): the reverse-process target.

    q(x|z_t) is proportional to q(x) * q(z_t|x) by enumeration over all x;
    the result mixes the per-x coupling posteriors with those weights.
    """
    if s != t - 1:
        raise ValueError("adjacent steps only (s = t - 1)")
    K, D = data_law.K, data_law.D
    if K ** D > cap:
        raise ValueError(f"state space K^D = {K ** D} exceeds cap {cap}")
    xs = data_law.states
    X = xs.shape[0]
    z_t = np.asarray(z_t)

    u_t = fwd.marginals_np(xs, np.full(X, t))  # (X, D, K)
    lik = np.take_along_axis(
        u_t, np.broadcast_to(z_t, (X, D))[..., None], axis=-1)[..., 0].prod(axis=-1)
    w = data_law.probs * lik
    total = w.sum()
    if total <= 0.0:
        raise ValueError("z_t has zero probability under every data point")
    w = w / total

    u_s = fwd.marginals_np(xs, np.full(X, s))
    rows = coupling_rows_batch(u_s, u_t, np.broadcast_to(z_t, (X, D)))  # (X, D, K)

    zs = enumerate_states(K, D, cap)
    probs = np.zeros(zs.shape[0])
    chunk = max(1, int(2 ** 22 / max(zs.shape[0], 1)))
    for lo in range(0, X, chunk):
        hi = min(lo + chunk, X)
        block = np.ones((hi - lo, zs.shape[0]))
        for i in range(D):
            block *= rows[lo:hi, i, zs[:, i]]
        probs += w[lo:hi] @ block
    probs = probs / probs.sum()
    return EnumeratedLaw(K=K, D=D, probs=probs)


def factorization_gap(law: EnumeratedLaw) -> float:
    """KL(joint || product of marginals): zero iff the law is factorized."""
    p = law.probs
    q = law.product_of_marginals()
    support = p > 0.0
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def exact_diffusion_term(fwd, rev, x: np.ndarray, t: int,
                         cap: int = DEFAULT_CAP) -> float:
    """sum_{z_t} q(z_t|x) * KL(z_t) for a single data point, by enumeration."""
    val, _ = _enumerated_term_var(fwd, rev, x, t, cap)
    return val


def exact_reinforce_grad(fwd, rev, x: np.ndarray, t: int,
                         cap: int = DEFAULT_CAP):
    """Exact gradient of the enumerated diffusion term w.r.t. all parameters.

    Ground truth for the score-function estimator: differentiates
    sum_{z_t} q(z_t|x) KL(z_t) term by term. Returns (value, grads) with one
    gradient array per entry of fwd.params() + rev.params().
    """
    params = fwd.params() + rev.params()
    for p in params:
        p.grad = None
    val, term = _enumerated_term_var(fwd, rev, x, t, cap)
    term.backward()
    grads = [np.zeros_like(p.value) if p.grad is None else p.grad.copy()
             for p in params]
    return val, grads


def _enumerated_term_var(fwd, rev, x: np.ndarray, t: int, cap: int):
    if fwd.kind != "general":
        raise ValueError("enumerated estimator oracle supports the general process")
    x = np.asarray(x).reshape(1, -1)
    K, D = fwd.K, fwd.D
    states = enumerate_states(K, D, cap)
    S = states.shape[0]
    tb = np.full(S, t)

    u_s = fwd.marginals(x, np.array([t - 1]))  # (1, D, K)
    u_t = fwd.marginals(x, np.array([t]))
    us_b = nd.broadcast_to(u_s, (S, D, K))
    ut_b = nd.broadcast_to(u_t, (S, D, K))
    rows = coupling_rows_var(us_b, ut_b, states)
    v = rev.dist(rev.encode(states), tb)
    kl = nd.vsum(kl_rows_var(rows, v), axis=-1)  # (S,)
    logq = nd.vsum(nd.log(nd.clamp(nd.gather(ut_b, states), lo=LOG_TINY)), axis=-1)
    q = nd.exp(logq)
    term = nd.vsum(nd.mul(q, kl))
    return float(term.value), term


def fd_check(loss_fn, params, h: float = 1e-5) -> float:
    """Max relative error between autodiff gradients and central differences.

    loss_fn must rebuild the loss Var deterministically from the params'
    current values (fix any noise outside). The error is measured per
    parameter array at the scale of that array's gradient:
    max|ad - fd| / max(max|ad|, max|fd|, 1e-8).
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [np.zeros_like(p.value) if p.grad is None else p.grad.copy()
             for p in params]

    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.value.reshape(-1)
        fd = np.zeros_like(flat)
        for j in range(flat.shape[0]):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(loss_fn().value)
            flat[j] = orig - h
            f_minus = float(loss_fn().value)
            flat[j] = orig
            fd[j] = (f_plus - f_minus) / (2.0 * h)
        gflat = g.reshape(-1)
        scale = max(np.abs(gflat).max(initial=0.0), np.abs(fd).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(gflat - fd).max(initial=0.0)) / scale)
    return worst

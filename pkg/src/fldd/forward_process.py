"""Learnable noising process: factorized marginals with coupling posteriors.

Marginals u(x, t) are convex blends of the data one-hot, the prior, and a
network-predicted simplex, with hard overrides pinning t=0 to the data and
t=T to the prior. Per-step posteriors are the maximum-coupling conditionals
between the marginals at s = t-1 and t, applied independently per coordinate.

Two variants share the machinery: the general process over all K categories,
and a masking-restricted process where each coordinate only interpolates
between its data value and a distinguished MASK category.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .catdist import LOG_TINY, sample_cat_batch
from .coupling import IDENTITY_TOL, coupling_rows_batch
from .reverse_model import NetSpec, TimeCondMLP


@dataclass
class PriorSpec:
    """Terminal-noise distribution: uniform, or all mass on a mask category."""

    kind: str = "uniform"  # "uniform" | "mask"
    mask_index: int | None = None

    def vector(self, K: int) -> np.ndarray:
        if self.kind == "uniform":
            return np.full(K, 1.0 / K)
        if self.kind == "mask":
            if self.mask_index is None or not (0 <= self.mask_index < K):
                raise ValueError(f"invalid mask index {self.mask_index} for K={K}")
            v = np.zeros(K)
            v[self.mask_index] = 1.0
            return v
        raise ValueError(f"unknown prior kind {self.kind!r}")


def _expand(v: nd.Var) -> nd.Var:
    """Append a trailing singleton axis."""
    return nd.reshape(v, v.value.shape + (1,))


def stack2(a: nd.Var, b: nd.Var) -> nd.Var:
    """Stack two (B, D) Vars into (B, D, 2)."""
    return nd.concat([_expand(a), _expand(b)], axis=-1)


def coupling_rows_var(u_s: nd.Var, u_t: nd.Var, z: np.ndarray) -> nd.Var:
    """Differentiable maximum-coupling rows conditioned on source categories.

    u_s, u_t: (..., K) marginal Vars; z: (...) sampled source categories.
    Matches coupling.coupling_rows_batch on the values.
    """
    K = u_t.value.shape[-1]
    us_k = nd.gather(u_s, z)
    ut_k = nd.gather(u_t, z)
    safe = nd.clamp(ut_k, lo=IDENTITY_TOL)
    deficit = nd.clamp(nd.sub(u_s, u_t), lo=0.0)
    total = nd.vsum(deficit, axis=-1, keepdims=True)
    m = nd.div(deficit, nd.clamp(total, lo=IDENTITY_TOL))
    stay = nd.div(nd.minimum(us_k, ut_k), safe)
    excess = nd.div(nd.clamp(nd.sub(ut_k, us_k), lo=0.0), safe)
    rows = nd.add(nd.mul(_expand(excess), m),
                  nd.mul(_expand(stay), nd.onehot(z, K)))
    return rows


def relaxed_posterior_mix(u_s: nd.Var, u_t: nd.Var, zbar: nd.Var) -> nd.Var:
    """Posterior for a relaxed source sample: zbar-weighted coupling rows.

    Computes sum_k zbar[k] * row_k without materializing the K x K plan:
    mix_j = zbar_j * min(u_s,u_t)_j / u_t_j
            + (sum_k zbar_k * (u_t-u_s)+_k / u_t_k) * m_j.
    """
    safe = nd.clamp(u_t, lo=IDENTITY_TOL)
    deficit = nd.clamp(nd.sub(u_s, u_t), lo=0.0)
    total = nd.vsum(deficit, axis=-1, keepdims=True)
    m = nd.div(deficit, nd.clamp(total, lo=IDENTITY_TOL))
    diag = nd.mul(zbar, nd.div(nd.minimum(u_s, u_t), safe))
    excess = nd.div(nd.clamp(nd.sub(u_t, u_s), lo=0.0), safe)
    coef = nd.vsum(nd.mul(zbar, excess), axis=-1, keepdims=True)
    return nd.add(diag, nd.mul(coef, m))


class _BlendTable:
    """Per-timestep weights (a, b, c) over (data, prior, network) targets.

    Learned mode keeps one free logit triple per timestep behind a softmax;
    fixed mode is the linear interpolation a = 1 - t/T, b = t/T, c = 0.
    The learned table starts strongly on the network target: hedged inits
    (data/network mixtures) train into noisy hybrid codes that the reverse
    process then fails to decode.
    """

    INIT = (0.0, -4.0, 4.0)

    def __init__(self, T: int, learned: bool):
        self.T = T
        self.learned = learned
        self.logits = None
        if learned:
            self.logits = nd.Var(np.tile(self.INIT, (T + 1, 1)))

    def params(self) -> list[nd.Var]:
        return [self.logits] if self.learned else []

    def weights_np(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t)
        if self.learned:
            lg = self.logits.value[t]
            lg = lg - lg.max(axis=-1, keepdims=True)
            e = np.exp(lg)
            return e / e.sum(axis=-1, keepdims=True)
        frac = t.astype(np.float64) / self.T
        return np.stack([1.0 - frac, frac, np.zeros_like(frac)], axis=-1)

    def weights(self, t: np.ndarray) -> nd.Var:
        if not self.learned:
            return nd.Var(self.weights_np(t))
        sel = nd.onehot(np.asarray(t), self.T + 1)  # (B, T+1)
        return nd.softmax(nd.matmul(nd.Var(sel), self.logits))


def _boundary_masks(t: np.ndarray, T: int):
    t = np.asarray(t)
    at0 = (t == 0).astype(np.float64)
    atT = (t == T).astype(np.float64)
    interior = 1.0 - at0 - atT
    return at0[:, None, None], atT[:, None, None], interior[:, None, None]


class ForwardProcess:
    """General learnable marginals over all K categories."""

    kind = "general"

    def __init__(self, K: int, D: int, T: int, prior: PriorSpec,
                 spec: NetSpec | None = None,
                 rng: np.random.Generator | None = None,
                 learned: bool = True):
        self.K = K
        self.D = D
        self.T = T
        self.prior = prior
        self.prior_probs = prior.vector(K)
        self.learned = learned
        self.blend = _BlendTable(T, learned)
        self.net = None
        if learned:
            if spec is None or rng is None:
                raise ValueError("learned forward process needs a NetSpec and rng")
            self.net = TimeCondMLP(D * K, D * K, spec, rng)

    def params(self) -> list[nd.Var]:
        out = self.blend.params()
        if self.net is not None:
            out += self.net.params()
        return out

    def _encode(self, x: np.ndarray) -> np.ndarray:
        return nd.onehot(x, self.K).reshape(x.shape[0], self.D * self.K)

    def _check_t(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=int))
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        return t

    def marginals(self, x: np.ndarray, t) -> nd.Var:
        """Differentiable per-coordinate marginals u(x, t), shape (B, D, K).

        Exactly one-hot(x) at t=0 and exactly the prior at t=T for any
        network weights; a convex blend in between.
        """
        t = self._check_t(t)
        if t.shape[0] == 1 and x.shape[0] > 1:
            t = np.full(x.shape[0], t[0])
        B = x.shape[0]
        oh = nd.onehot(x, self.K)  # (B, D, K) constant
        prior = np.broadcast_to(self.prior_probs, (B, self.D, self.K))
        at0, atT, interior = _boundary_masks(t, self.T)

        if not self.learned:
            w = self.blend.weights_np(t)
            u = w[:, 0, None, None] * oh + w[:, 1, None, None] * prior
            u = at0 * oh + atT * prior + interior * u
            return nd.Var(u)

        w = self.blend.weights(t)  # (B, 3) Var
        a = nd.reshape(nd.gather(w, np.zeros(B, dtype=int)), (B, 1, 1))
        b = nd.reshape(nd.gather(w, np.ones(B, dtype=int)), (B, 1, 1))
        c = nd.reshape(nd.gather(w, np.full(B, 2)), (B, 1, 1))
        logits = self.net(self._encode(x), t)
        net_sx = nd.softmax(nd.reshape(logits, (B, self.D, self.K)))
        u = nd.add(nd.add(nd.mul(a, oh), nd.mul(b, prior)), nd.mul(c, net_sx))
        return nd.add(nd.add(nd.mul(at0, oh), nd.mul(atT, prior)),
                      nd.mul(interior, u))

    def marginals_np(self, x: np.ndarray, t) -> np.ndarray:
        """Tape-free marginals (no gradient bookkeeping)."""
        t = self._check_t(t)
        if t.shape[0] == 1 and x.shape[0] > 1:
            t = np.full(x.shape[0], t[0])
        B = x.shape[0]
        oh = nd.onehot(x, self.K)
        prior = np.broadcast_to(self.prior_probs, (B, self.D, self.K))
        at0, atT, interior = _boundary_masks(t, self.T)
        w = self.blend.weights_np(t)
        if self.learned:
            logits = self.net.forward_np(self._encode(x), t)
            logits = logits.reshape(B, self.D, self.K)
            shifted = logits - logits.max(axis=-1, keepdims=True)
            e = np.exp(shifted)
            net_sx = e / e.sum(axis=-1, keepdims=True)
            u = (w[:, 0, None, None] * oh + w[:, 1, None, None] * prior
                 + w[:, 2, None, None] * net_sx)
        else:
            u = w[:, 0, None, None] * oh + w[:, 1, None, None] * prior
        return at0 * oh + atT * prior + interior * u

    def sample_zt(self, x: np.ndarray, t, rng: np.random.Generator) -> np.ndarray:
        return sample_cat_batch(self.marginals_np(x, t), rng)

    def posterior_rows_np(self, x: np.ndarray, t, z_t: np.ndarray) -> np.ndarray:
        """Coupling rows q(z_s | z_t, x) per coordinate at s = t-1 (numpy)."""
        t = self._check_t(t)
        if np.any(t < 1):
            raise ValueError("posterior needs t >= 1 (s = t - 1)")
        u_s = self.marginals_np(x, t - 1)
        u_t = self.marginals_np(x, t)
        return coupling_rows_batch(u_s, u_t, z_t)

    def log_q_zt(self, u_t: nd.Var, z_t: np.ndarray) -> nd.Var:
        """log q(z_t | x) summed over coordinates, shape (B,)."""
        picked = nd.clamp(nd.gather(u_t, z_t), lo=LOG_TINY)
        return nd.vsum(nd.log(picked), axis=-1)


class MaskedForwardProcess:
    """Masking-restricted noising: per-coordinate mask probabilities.

    Each coordinate's marginal has support {x_i, MASK}; the network predicts
    only how likely each coordinate is to be masked at time t, gated by the
    same blend schedule (weight b pulls toward fully masked, weight a toward
    clean data, weight c toward the network's sigmoid output).
    """

    kind = "masked"

    def __init__(self, K: int, D: int, T: int, prior: PriorSpec,
                 spec: NetSpec | None = None,
                 rng: np.random.Generator | None = None,
                 learned: bool = True, monotone: bool = False):
        if prior.kind != "mask":
            raise ValueError("masking-restricted process needs a mask prior")
        self.K = K
        self.D = D
        self.T = T
        self.prior = prior
        self.prior_probs = prior.vector(K)
        self.mask_index = prior.mask_index
        self.learned = learned
        self.monotone = monotone and learned
        self.blend = _BlendTable(T, learned and not self.monotone)
        self.net = None
        if learned:
            if spec is None or rng is None:
                raise ValueError("learned forward process needs a NetSpec and rng")
            self.net = TimeCondMLP(D * K, D, spec, rng)

    def params(self) -> list[nd.Var]:
        out = self.blend.params()
        if self.net is not None:
            out += self.net.params()
        return out

    def _encode(self, x: np.ndarray) -> np.ndarray:
        return nd.onehot(x, self.K).reshape(x.shape[0], self.D * self.K)

    def _check_t(self, t, B: int) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=int))
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        if t.shape[0] == 1 and B > 1:
            t = np.full(B, t[0])
        return t

    def _monotone_fracs(self, x: np.ndarray) -> nd.Var:
        """Cumulative mask fractions at t = 1..T, shape (B, D, T).

        Normalized running sums of positive per-step increments; the final
        column is exactly 1, so m grows monotonically from 0 to 1.
        """
        B = x.shape[0]
        incs = []
        for tau in range(1, self.T + 1):
            raw = self.net(self._encode(x), np.full(B, tau))  # (B, D)
            incs.append(nd.reshape(nd.add(nd.softplus(raw), 1e-6), (B, self.D, 1)))
        w = nd.concat(incs, axis=-1)  # (B, D, T)
        tri = np.tril(np.ones((self.T, self.T)))  # lower-triangular cumsum
        cum = nd.reshape(nd.matmul(nd.reshape(w, (B * self.D, self.T)), tri.T),
                         (B, self.D, self.T))
        total = nd.gather(cum, np.full((B, self.D), self.T - 1))
        return nd.div(cum, nd.reshape(total, (B, self.D, 1)))

    def _monotone_fracs_np(self, x: np.ndarray) -> np.ndarray:
        B = x.shape[0]
        cols = []
        for tau in range(1, self.T + 1):
            raw = self.net.forward_np(self._encode(x), np.full(B, tau))
            cols.append(np.maximum(raw, 0.0) + np.log1p(np.exp(-np.abs(raw))) + 1e-6)
        w = np.stack(cols, axis=-1)
        cum = np.cumsum(w, axis=-1)
        return cum / cum[..., -1:]

    def mask_prob(self, x: np.ndarray, t) -> nd.Var:
        """Differentiable masking probability per coordinate, shape (B, D).

        Exactly 0 at t=0 and exactly 1 at t=T.
        """
        B = x.shape[0]
        t = self._check_t(t, B)
        if self.monotone:
            frac = self._monotone_fracs(x)
            idx = np.broadcast_to(np.clip(t - 1, 0, self.T - 1)[:, None],
                                  (B, self.D))
            live = (t >= 1).astype(np.float64)[:, None]
            return nd.mul(nd.gather(frac, idx), nd.Var(live))
        at0 = (t == 0).astype(np.float64)[:, None]
        atT = (t == self.T).astype(np.float64)[:, None]
        interior = 1.0 - at0 - atT
        if not self.learned:
            w = self.blend.weights_np(t)
            m = np.broadcast_to(w[:, 1, None], (B, self.D)).copy()
            return nd.Var(atT * 1.0 + interior * m)
        w = self.blend.weights(t)
        b = nd.reshape(nd.gather(w, np.ones(B, dtype=int)), (B, 1))
        c = nd.reshape(nd.gather(w, np.full(B, 2)), (B, 1))
        gate = nd.sigmoid(self.net(self._encode(x), t))
        m = nd.add(b, nd.mul(c, gate))
        return nd.add(nd.Var(atT), nd.mul(nd.Var(interior), m))

    def mask_prob_np(self, x: np.ndarray, t) -> np.ndarray:
        B = x.shape[0]
        t = self._check_t(t, B)
        if self.monotone:
            frac = self._monotone_fracs_np(x)
            idx = np.broadcast_to(np.clip(t - 1, 0, self.T - 1)[:, None],
                                  (B, self.D))
            live = (t >= 1).astype(np.float64)[:, None]
            return np.take_along_axis(frac, idx[..., None], axis=-1)[..., 0] * live
        at0 = (t == 0).astype(np.float64)[:, None]
        atT = (t == self.T).astype(np.float64)[:, None]
        interior = 1.0 - at0 - atT
        w = self.blend.weights_np(t)
        if self.learned:
            raw = self.net.forward_np(self._encode(x), t)
            gate = 1.0 / (1.0 + np.exp(-raw))
            m = w[:, 1, None] + w[:, 2, None] * gate
        else:
            m = np.broadcast_to(w[:, 1, None], (B, self.D)).copy()
        return atT * 1.0 + interior * m

    def marginals_np(self, x: np.ndarray, t) -> np.ndarray:
        """Full (B, D, K) marginals embedding the two-point support."""
        m = self.mask_prob_np(x, t)
        u = (1.0 - m)[..., None] * nd.onehot(x, self.K)
        u[..., self.mask_index] += m
        return u

    def marginals(self, x: np.ndarray, t) -> nd.Var:
        m = self.mask_prob(x, t)
        oh_x = nd.onehot(x, self.K)
        oh_m = np.zeros_like(oh_x)
        oh_m[..., self.mask_index] = 1.0
        keep = nd.sub(1.0, m)
        return nd.add(nd.mul(_expand(keep), oh_x), nd.mul(_expand(m), oh_m))

    def support2(self, m: nd.Var) -> nd.Var:
        """Compressed two-point marginal (keep-data, mask), shape (B, D, 2)."""
        return stack2(nd.sub(1.0, m), m)

    def sample_zt(self, x: np.ndarray, t, rng: np.random.Generator):
        """Sample the masked latent; returns (z_t ints, is_masked ints)."""
        m = self.mask_prob_np(x, t)
        masked = (rng.random(m.shape) < m).astype(int)
        z = np.where(masked == 1, self.mask_index, x)
        return z, masked

    def posterior_rows_np(self, x: np.ndarray, t, masked: np.ndarray) -> np.ndarray:
        """Compressed coupling rows over (keep-data, mask), shape (B, D, 2)."""
        B = x.shape[0]
        t = self._check_t(t, B)
        if np.any(t < 1):
            raise ValueError("posterior needs t >= 1 (s = t - 1)")
        m_s = self.mask_prob_np(x, t - 1)
        m_t = self.mask_prob_np(x, t)
        u_s = np.stack([1.0 - m_s, m_s], axis=-1)
        u_t = np.stack([1.0 - m_t, m_t], axis=-1)
        return coupling_rows_batch(u_s, u_t, masked)

    def log_q_zt(self, u2_t: nd.Var, masked: np.ndarray) -> nd.Var:
        picked = nd.clamp(nd.gather(u2_t, masked), lo=LOG_TINY)
        return nd.vsum(nd.log(picked), axis=-1)

"""Factorized reverse (generative) process and the shared network architecture.

The reverse process maps a latent state z_t to D per-coordinate categorical
distributions over K categories; every coordinate's distribution may depend
on the whole state. Both the reverse process and the learnable noising
marginals use the same small MLP-with-time-embedding architecture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import ndgrad as nd
from .catdist import PROB_FLOOR, floor_simplex, floor_simplex_var, sample_cat_batch


@dataclass
class NetSpec:
    width: int = 256
    depth: int = 3
    time_dim: int = 16


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (B, dim); dim even."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class TimeCondMLP:
    """MLP over an encoded state concatenated with a time embedding.

    Hidden layers use gelu; the output layer starts at zero so both processes
    begin at maximum-entropy predictions. Evaluation calls are counted for
    cost audits.
    """

    def __init__(self, in_features: int, out_features: int, spec: NetSpec,
                 rng: np.random.Generator):
        self.spec = spec
        self.in_features = in_features
        self.out_features = out_features
        self.eval_count = 0
        dims = [in_features + spec.time_dim] + [spec.width] * spec.depth + [out_features]
        self.weights: list[nd.Var] = []
        self.biases: list[nd.Var] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append(nd.Var(w))
            self.biases.append(nd.Var(np.zeros(fan_out)))

    def params(self) -> list[nd.Var]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def __call__(self, enc, t) -> nd.Var:
        """Differentiable forward pass; enc is (B, in_features) Var or array."""
        self.eval_count += 1
        emb = time_embedding(t, self.spec.time_dim)
        h = nd.concat([nd.as_var(enc), nd.Var(emb)], axis=-1)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = nd.add(nd.matmul(h, w), b)
            if i < n - 1:
                h = nd.gelu(h)
        return h

    def forward_np(self, enc: np.ndarray, t) -> np.ndarray:
        """Tape-free forward pass for sampling and evaluation."""
        self.eval_count += 1
        emb = time_embedding(t, self.spec.time_dim)
        h = np.concatenate([np.asarray(enc, dtype=np.float64), emb], axis=-1)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if i < n - 1:
                phi = 0.5 * (1.0 + erf(h / np.sqrt(2.0)))
                h = h * phi
        return h


class ReverseModel:
    """p(z_s | z_t) as D parallel categoricals parameterized by one network.

    Output simplexes are floored at PROB_FLOOR and renormalized; the floored
    distribution *is* the model, used consistently by the sampler, the exact
    likelihood, and the training objective.
    """

    def __init__(self, K: int, D: int, T: int, spec: NetSpec,
                 prior_probs: np.ndarray, rng: np.random.Generator):
        self.K = K
        self.D = D
        self.T = T
        self.prior_probs = np.asarray(prior_probs, dtype=np.float64)
        self.net = TimeCondMLP(D * K, D * K, spec, rng)

    def params(self) -> list[nd.Var]:
        return self.net.params()

    def encode(self, z: np.ndarray) -> np.ndarray:
        """One-hot encode integer latents to the flat network input."""
        return nd.onehot(z, self.K).reshape(z.shape[0], self.D * self.K)

    def dist(self, z_enc, t) -> nd.Var:
        """Differentiable reverse simplexes, shape (B, D, K).

        z_enc: (B, D*K) or (B, D, K) encoding; hard states via encode(),
        relaxed states pass their weights directly.
        """
        enc = nd.as_var(z_enc)
        if enc.value.ndim == 3:
            enc = nd.reshape(enc, (enc.value.shape[0], self.D * self.K))
        logits = self.net(enc, t)
        probs = nd.softmax(nd.reshape(logits, (enc.value.shape[0], self.D, self.K)))
        return floor_simplex_var(probs, PROB_FLOOR)

    def dist_np(self, z: np.ndarray, t) -> np.ndarray:
        """Tape-free reverse simplexes for integer latents, shape (B, D, K)."""
        z = np.asarray(z)
        if np.ndim(t) == 0:
            t = np.full(z.shape[0], int(t))
        logits = self.net.forward_np(self.encode(z), t)
        logits = logits.reshape(z.shape[0], self.D, self.K)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return floor_simplex(e / e.sum(axis=-1, keepdims=True), PROB_FLOOR)

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        p = np.broadcast_to(self.prior_probs, (n, self.D, self.K))
        return sample_cat_batch(p, rng)

    def sample(self, n: int, rng: np.random.Generator, T: int | None = None,
               chunk: int = 8192, record_trajectory: bool = False):
        """Generate n data points in T parallel steps (no noising network).

        Draws z_T from the prior, then repeatedly samples every coordinate
        from the reverse distributions for t = T..1. Uses exactly T network
        evaluations per chunk. With record_trajectory, also returns the list
        of intermediate states [z_T, ..., z_0].
        """
        T = self.T if T is None else T
        outs = []
        trajs: list[list[np.ndarray]] = []
        for start in range(0, n, chunk):
            b = min(chunk, n - start)
            z = self.sample_prior(b, rng)
            steps = [z.copy()]
            for t in range(T, 0, -1):
                probs = self.dist_np(z, t)
                z = sample_cat_batch(probs, rng)
                if record_trajectory:
                    steps.append(z.copy())
            outs.append(z)
            trajs.append(steps)
        samples = np.concatenate(outs, axis=0) if outs else np.zeros((0, self.D), dtype=int)
        if record_trajectory:
            merged = [np.concatenate([c[i] for c in trajs], axis=0)
                      for i in range(T + 1)]
            return samples, merged
        return samples


def enumerate_states(K: int, D: int, cap: int = 10000) -> np.ndarray:
    """All joint states in {0..K-1}^D as an (K^D, D) int array."""
    n = K ** D
    if n > cap:
        raise ValueError(
            f"state space K^D = {n} exceeds enumeration cap {cap}; "
            "use an oracle-scale instance")
    grids = np.meshgrid(*[np.arange(K)] * D, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def exact_model_probs(model: ReverseModel, T: int | None = None,
                      cap: int = 10000) -> np.ndarray:
    """Exact p(x) for every joint state via dynamic programming.

    Pushes the prior through the factorized reverse kernels one step at a
    time; O(T * K^(2D)) work, so only for enumerable instances.
    """
    T = model.T if T is None else T
    K, D = model.K, model.D
    states = enumerate_states(K, D, cap)
    S = states.shape[0]
    p = np.ones(S)
    for i in range(D):
        p = p * model.prior_probs[states[:, i]]
    for t in range(T, 0, -1):
        v = model.dist_np(states, t)  # (S, D, K)
        logv = np.log(v)
        p_next = np.zeros(S)
        for lo in range(0, S, 2048):  # chunk source states to bound memory
            hi = min(lo + 2048, S)
            logM = np.zeros((hi - lo, S))
            for i in range(D):
                logM += logv[lo:hi, i, states[:, i]]
            p_next += p[lo:hi] @ np.exp(logM)
        p = p_next
    return p


def exact_model_nll(model: ReverseModel, points: np.ndarray,
                    T: int | None = None, cap: int = 10000,
                    weights: np.ndarray | None = None) -> float:
    """Mean -log p(x) over points (or weighted states) by exact enumeration."""
    probs = exact_model_probs(model, T, cap)
    K, D = model.K, model.D
    points = np.asarray(points)
    idx = np.ravel_multi_index(tuple(points.T), (K,) * D)
    nll = -np.log(probs[idx])
    if weights is not None:
        return float(np.sum(weights * nll) / np.sum(weights))
    return float(nll.mean())

"""Exact Gaussian inference on linear-Gaussian Markov chains.

The posterior of a chain prior multiplied by Gaussian site potentials

    p(s_1..s_T) * prod_j exp(lambda1_j' s_j - 1/2 s_j' Lambda2_j s_j)
                * prod_j exp(-s_j' X_j s_{j+1})

has a block-tridiagonal precision.  ``info_smooth`` runs the forward
elimination (an information-form Kalman filter: ``D_j`` is the filtered
precision of s_j given everything up to j) and the backward RTS-style pass
for means, marginal covariances and adjacent cross-covariances.  The optional
cross potentials ``X_j`` are what a datum lying between two knots contributes;
they keep the natural-gradient site update exact.

``info_smooth`` is written with ``lax.scan`` over knots, so it can be traced
and differentiated, and its compile time does not grow with the number of
knots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import cho_solve, solve_triangular

from . import InvalidInput, NumericalFailure

LOG2PI = float(np.log(2.0 * np.pi))


def symmetrize(M):
    return 0.5 * (M + jnp.swapaxes(M, -1, -2))


@dataclass(frozen=True, eq=False)
class LinearGaussianChain:
    """Markov prior s_{j+1} = A_j s_j + N(0, Q_j), s_1 ~ N(m0, P0).

    ``transition_fn`` / ``noise_fn`` give A(dt), Q(dt) for arbitrary gaps and
    are needed only by ``bridge_conditional``.
    """

    times: np.ndarray
    transitions: np.ndarray
    noises: np.ndarray
    initial_cov: np.ndarray
    initial_mean: Optional[np.ndarray] = None
    transition_fn: Optional[Callable] = field(default=None, repr=False)
    noise_fn: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        if times.size < 1:
            raise InvalidInput("a chain needs at least one knot")
        if np.any(np.diff(times) <= 0):
            raise InvalidInput("knot times must be strictly increasing")
        object.__setattr__(self, "times", times)
        n = np.shape(self.initial_cov)[0]
        if np.shape(self.initial_cov) != (n, n):
            raise InvalidInput("initial_cov must be square")
        T = times.size
        for name in ("transitions", "noises"):
            shape = np.shape(getattr(self, name))
            if shape != (T - 1, n, n) and not (T == 1 and np.size(getattr(self, name)) == 0):
                raise InvalidInput(f"{name} must have shape {(T - 1, n, n)}, got {shape}")
        if T == 1:
            object.__setattr__(self, "transitions", np.zeros((0, n, n)))
            object.__setattr__(self, "noises", np.zeros((0, n, n)))
        if self.initial_mean is None:
            object.__setattr__(self, "initial_mean", np.zeros(n))

    @property
    def num_knots(self):
        return self.times.size

    @property
    def state_dim(self):
        return np.shape(self.initial_cov)[0]


@dataclass(frozen=True)
class GaussianSite:
    """Per-knot potential exp(lambda1' s - 1/2 s' Lambda2 s)."""

    lambda1: np.ndarray
    Lambda2: np.ndarray

    @classmethod
    def zero(cls, n):
        return cls(np.zeros(n), np.zeros((n, n)))


@dataclass(frozen=True)
class ChainPosterior:
    means: np.ndarray  # (T, n)
    covs: np.ndarray  # (T, n, n)
    cross_covs: np.ndarray  # (T-1, n, n), Cov(s_j, s_{j+1})
    log_normalizer: float


def _chol_logdet(L):
    return 2.0 * jnp.sum(jnp.log(jnp.diagonal(L)))


def prior_precision_blocks(transitions, noises, initial_cov, initial_mean):
    """Block-tridiagonal precision of the chain prior.

    Returns (diag, upper, h, const): ``h`` = Lambda_p m_p and ``const`` =
    -1/2 log|Sigma_p| - 1/2 m_p' Lambda_p m_p, the terms the log normalizer
    needs.
    """
    T = transitions.shape[0] + 1
    n = initial_cov.shape[0]
    L0 = jnp.linalg.cholesky(symmetrize(initial_cov))
    eye = jnp.eye(n)
    P0inv = cho_solve((L0, True), eye)
    logdet = _chol_logdet(L0)
    diag = [P0inv] + [None] * (T - 1)
    upper = []
    for j in range(T - 1):
        A = transitions[j]
        Lq = jnp.linalg.cholesky(symmetrize(noises[j]))
        QinvA = cho_solve((Lq, True), A)
        Qinv = cho_solve((Lq, True), eye)
        logdet = logdet + _chol_logdet(Lq)
        diag[j] = diag[j] + A.T @ QinvA
        diag[j + 1] = Qinv
        upper.append(-QinvA.T)
    diag = jnp.stack([symmetrize(D) for D in diag])
    upper = jnp.stack(upper) if upper else jnp.zeros((0, n, n))

    m = [jnp.asarray(initial_mean)]
    for j in range(T - 1):
        m.append(transitions[j] @ m[-1])
    m = jnp.stack(m)
    h = jnp.einsum("tij,tj->ti", diag, m)
    if T > 1:
        h = h.at[:-1].add(jnp.einsum("tij,tj->ti", upper, m[1:]))
        h = h.at[1:].add(jnp.einsum("tji,tj->ti", upper, m[:-1]))
    const = -0.5 * logdet - 0.5 * jnp.sum(m * h)
    return diag, upper, h, const


def info_smooth(diag, upper, h, const=0.0):
    """Posterior moments of a Gaussian with block-tridiagonal precision.

    ``diag`` (T, n, n) and ``upper`` (T-1, n, n) are the posterior precision
    blocks Lambda_jj and Lambda_{j,j+1}; ``h`` (T, n) the precision-weighted
    mean.  ``const`` carries the prior normalization so that the returned log
    normalizer is log of the integral of prior times sites.

    Returns (means, covs, cross_covs, log_normalizer, ok) where ``ok`` (T,)
    flags finite Cholesky factors per step.
    """
    T = diag.shape[0]
    n = diag.shape[1]
    eye = jnp.eye(n)

    def factor(D, hj):
        Lc = jnp.linalg.cholesky(symmetrize(D))
        w = solve_triangular(Lc, hj, lower=True)
        return Lc, w @ w, _chol_logdet(Lc), jnp.all(jnp.isfinite(Lc))

    L0, quad, logdet, ok0 = factor(diag[0], h[0])
    if T == 1:
        cov = symmetrize(cho_solve((L0, True), eye))
        mean = cho_solve((L0, True), h[0])
        return mean[None], cov[None], jnp.zeros((0, n, n)), const + 0.5 * quad - 0.5 * logdet, ok0[None]

    def forward(carry, xs):
        Lp, hp = carry
        Dj, Uj, hj = xs
        G = cho_solve((Lp, True), Uj)  # D_{j-1}^{-1} Lambda_{j-1,j}
        hf = hj - G.T @ hp
        Lc, q, ld, okj = factor(Dj - Uj.T @ G, hf)
        return (Lc, hf), (Lc, hf, G, q, ld, okj)

    _, (Ls, hfs, gains, qs, lds, oks) = jax.lax.scan(forward, (L0, h[0]), (diag[1:], upper, h[1:]))
    chols = jnp.concatenate([L0[None], Ls])
    hf = jnp.concatenate([h[0][None], hfs])
    quad = quad + jnp.sum(qs)
    logdet = logdet + jnp.sum(lds)
    ok = jnp.concatenate([ok0[None], oks])

    m_last = cho_solve((chols[-1], True), hf[-1])
    S_last = symmetrize(cho_solve((chols[-1], True), eye))

    def backward(carry, xs):
        m_next, S_next = carry
        Lc, hj, G = xs  # G = D_j^{-1} Lambda_{j,j+1}
        m = cho_solve((Lc, True), hj) - G @ m_next
        C = -G @ S_next
        S = symmetrize(cho_solve((Lc, True), eye) + G @ S_next @ G.T)
        return (m, S), (m, S, C)

    _, (ms, Ss, Cs) = jax.lax.scan(backward, (m_last, S_last), (chols[:-1], hf[:-1], gains), reverse=True)
    means = jnp.concatenate([ms, m_last[None]])
    covs = jnp.concatenate([Ss, S_last[None]])
    return means, covs, Cs, const + 0.5 * quad - 0.5 * logdet, ok


# Standalone calls see many small shapes; padding to buckets bounds the number
# of XLA compilations.  Padded knots and state dimensions are independent
# standard normals without sites, which integrate to one and leave the real
# block's moments and log normalizer unchanged.
_KNOT_BUCKET = 16
_DIM_BUCKET = 8


def _round_up(k, b):
    return max(b, -(-k // b) * b)


@jax.jit
def _chain_posterior(transitions, noises, initial_cov, initial_mean, lam1, lam2, cross):
    diag, upper, h, const = prior_precision_blocks(transitions, noises, initial_cov, initial_mean)
    prior_ok = jnp.all(jnp.isfinite(diag))
    means, covs, xcov, logz, ok = info_smooth(diag + symmetrize(lam2), upper + cross, h + lam1, const)
    return means, covs, xcov, logz, ok, prior_ok


def _pad(a, shape, fill_eye=False):
    """Zero-pad ``a`` to ``shape`` (identity on the padded diagonal if ``fill_eye``)."""
    out = np.zeros(shape)
    out[tuple(slice(0, k) for k in a.shape)] = a
    if fill_eye:
        n = a.shape[-1]
        idx = np.arange(n, shape[-1])
        out[..., idx, idx] = 1.0
    return out


def kalman_filter_smooth(
    chain: LinearGaussianChain,
    sites: Sequence[GaussianSite],
    cross: Optional[Sequence] = None,
) -> ChainPosterior:
    """Exact posterior of ``chain`` times per-knot ``sites``.

    ``cross`` optionally holds T-1 matrices X_j for pairwise potentials
    exp(-s_j' X_j s_{j+1}).  Cost is linear in the number of knots and cubic
    in the state dimension.
    """
    T, n = chain.num_knots, chain.state_dim
    if len(sites) != T:
        raise InvalidInput(f"expected {T} sites, got {len(sites)}")
    lam1 = np.stack([np.asarray(s.lambda1, dtype=float).reshape(-1) for s in sites])
    lam2 = np.stack([np.asarray(s.Lambda2, dtype=float) for s in sites])
    if lam1.shape != (T, n) or lam2.shape != (T, n, n):
        raise InvalidInput("site dimensions do not match the chain state dimension")
    X = np.zeros((T - 1, n, n))
    if cross is not None:
        X = np.stack([np.asarray(c, dtype=float) for c in cross]) if T > 1 else X
        if X.shape != (T - 1, n, n):
            raise InvalidInput("cross potentials must have shape (T-1, n, n)")
    Tp, npad = _round_up(T, _KNOT_BUCKET), _round_up(n, _DIM_BUCKET)
    A = _pad(np.asarray(chain.transitions, dtype=float), (Tp - 1, npad, npad))
    Q = _pad(np.asarray(chain.noises, dtype=float), (Tp - 1, npad, npad), fill_eye=True)
    Q[T - 1:] = np.eye(npad)  # padded knots are fresh standard normals
    means, covs, xcov, logz, ok, prior_ok = _chain_posterior(
        A, Q,
        _pad(np.asarray(chain.initial_cov, dtype=float), (npad, npad), fill_eye=True),
        _pad(np.asarray(chain.initial_mean, dtype=float), (npad,)),
        _pad(lam1, (Tp, npad)), _pad(lam2, (Tp, npad, npad)), _pad(X, (Tp - 1, npad, npad)),
    )
    if not bool(prior_ok):
        raise NumericalFailure("prior chain covariance is not positive definite")
    ok = np.asarray(ok)[:T]
    if not ok.all():
        step = int(np.argmin(ok))
        raise NumericalFailure(f"filtered precision lost positive definiteness at step {step}")
    return ChainPosterior(np.asarray(means)[:T, :n], np.asarray(covs)[:T, :n, :n],
                          np.asarray(xcov)[:T - 1, :n, :n], float(logz))


def _gauss_kl(m_q, S_q, m_p, S_p):
    n = m_q.shape[0]
    Lp = jnp.linalg.cholesky(S_p)
    Lq = jnp.linalg.cholesky(S_q)
    d = solve_triangular(Lp, m_p - m_q, lower=True)
    M = solve_triangular(Lp, Lq, lower=True)
    return 0.5 * (jnp.sum(M**2) + d @ d - n + _chol_logdet(Lp) - _chol_logdet(Lq))


def chain_kl(q: ChainPosterior, p: LinearGaussianChain) -> float:
    """KL(q || p) between two Markov-Gaussian chains on the same knots.

    Sums the first-knot marginal KL and the expected KL of the transition
    conditionals, both read off the pairwise joints of ``q``.
    """
    means = jnp.asarray(q.means)
    covs = jnp.asarray(q.covs)
    xc = jnp.asarray(q.cross_covs)
    if means.shape[0] != p.num_knots or means.shape[1] != p.state_dim:
        raise InvalidInput("posterior and prior chains differ in knots or state dimension")
    kl = _gauss_kl(means[0], covs[0], jnp.asarray(p.initial_mean), jnp.asarray(p.initial_cov))
    n = p.state_dim
    for j in range(p.num_knots - 1):
        A = jnp.asarray(p.transitions[j])
        Lq = jnp.linalg.cholesky(symmetrize(jnp.asarray(p.noises[j])))
        Ls = jnp.linalg.cholesky(covs[j])
        F = cho_solve((Ls, True), xc[j]).T  # C_j' Sigma_j^{-1}
        S = symmetrize(covs[j + 1] - F @ xc[j])
        B = F - A
        delta = means[j + 1] - A @ means[j]
        E = S + B @ covs[j] @ B.T
        trace = jnp.sum(solve_triangular(Lq, solve_triangular(Lq, E, lower=True).T, lower=True).diagonal())
        d = solve_triangular(Lq, delta, lower=True)
        _, logdet_s = jnp.linalg.slogdet(S)
        kl = kl + 0.5 * (trace + d @ d - n + _chol_logdet(Lq) - logdet_s)
    return float(kl)


@dataclass(frozen=True)
class Bridge:
    """s(t) | s(lo), s(hi) ~ N(C_minus s(lo) + C_plus s(hi), V)."""

    lo: int
    hi: int
    C_minus: np.ndarray
    C_plus: np.ndarray
    V: np.ndarray


def bridge_conditional(t: float, chain: LinearGaussianChain) -> Bridge:
    """Conditional of the state at ``t`` given its neighbouring knots.

    Outside the knot range only the nearest knot is used, with C = A(|dt|)
    and V = Q(|dt|); this is the exact backward conditional for the
    reversible (OU-type) chains built here.
    """
    if chain.transition_fn is None or chain.noise_fn is None:
        raise InvalidInput("bridge_conditional needs a chain with transition_fn/noise_fn")
    times = chain.times
    n = chain.state_dim
    t = float(t)
    zero = np.zeros((n, n))
    if t <= times[0] or t >= times[-1] or times.size == 1:
        k = 0 if t <= times[0] else times.size - 1
        gap = abs(t - times[k])
        A = np.asarray(chain.transition_fn(gap))
        Q = np.asarray(chain.noise_fn(gap))
        return Bridge(k, k, A, zero, symmetrize(Q))
    hi = int(np.searchsorted(times, t, side="right"))
    lo = hi - 1
    A1 = np.asarray(chain.transition_fn(t - times[lo]))
    Q1 = np.asarray(chain.noise_fn(t - times[lo]))
    A2 = np.asarray(chain.transition_fn(times[hi] - t))
    Qfull = np.asarray(chain.noises[lo])
    # condition s(t) = A1 s_lo + e1 on s_hi = A2 A1 s_lo + A2 e1 + e2
    G = np.linalg.solve(Qfull.T, (Q1 @ A2.T).T).T
    C_minus = A1 - G @ A2 @ A1
    V = Q1 - G @ A2 @ Q1
    return Bridge(lo, hi, C_minus, G, 0.5 * (V + V.T))

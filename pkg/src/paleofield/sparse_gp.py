"""Doubly sparse variational GP: spatial inducing points x Markov temporal knots.

The inducing state at knot j is s_j = f(Z, tau_j), an M_s-vector (d = 1).  Its
prior is a Kronecker-structured chain

    P0 = K_zz (x) sigma_f**2,  A_j = a_j I,  Q_j = K_zz (x) sigma_f**2 (1 - a_j**2),

and q(u) = p(u) * prod(sites) / Z.  Sites are stored as natural parameters in
s-coordinates: a per-knot pair (lambda1_j, Lambda2_j) plus a cross block X_j
coupling knots j and j+1 (the potential exp(-s_j' X_j s_{j+1})), which is
what a datum lying strictly between two knots contributes.

Numerics run in whitened coordinates v_j = L^{-1} s_j with L = chol(K_zz),
where the prior is M_s independent OU chains.  Predictions, the ELBO and the
natural-gradient tilts cost O((M_t + N_b) M_s**3) at most.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular

from . import InvalidInput, NumericalFailure
from .kernels import DEFAULT_JITTER, SpatialParams, TemporalParams, matern32, spatial_gram
from .state_space import ChainPosterior, GaussianSite, LinearGaussianChain, info_smooth, symmetrize

LOG2PI = float(np.log(2.0 * np.pi))
PARAM_KEYS = ("log_ell_lon", "log_ell_lat", "log_ell_t", "log_sigma_f", "log_sigma", "Z")


@dataclass(frozen=True, eq=False)
class InducingStructure:
    Z: np.ndarray  # (M_s, 2) lon/lat
    knots: np.ndarray  # (M_t,) ka, increasing toward the present
    bounding_box: tuple  # (lon_min, lon_max, lat_min, lat_max)

    def __post_init__(self):
        Z = np.array(self.Z, dtype=float).reshape(-1, 2)
        knots = np.array(self.knots, dtype=float).reshape(-1)
        box = tuple(float(b) for b in self.bounding_box)
        if len(Z) < 1 or len(knots) < 1:
            raise InvalidInput("need at least one spatial and one temporal inducing point")
        if np.any(np.diff(knots) <= 0):
            raise InvalidInput("temporal knots must be strictly increasing")
        if len(box) != 4 or box[0] > box[1] or box[2] > box[3]:
            raise InvalidInput(f"malformed bounding box {box}")
        inside = (Z[:, 0] >= box[0]) & (Z[:, 0] <= box[1]) & (Z[:, 1] >= box[2]) & (Z[:, 1] <= box[3])
        if not inside.all():
            raise InvalidInput("spatial inducing points must lie inside the bounding box")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "bounding_box", box)

    @property
    def num_spatial(self):
        return len(self.Z)

    @property
    def num_temporal(self):
        return len(self.knots)

    def clamp(self, Z):
        lo = np.array([self.bounding_box[0], self.bounding_box[2]])
        hi = np.array([self.bounding_box[1], self.bounding_box[3]])
        return np.clip(Z, lo, hi)


@dataclass(frozen=True, eq=False)
class Hyperparams:
    spatial: SpatialParams
    temporal: TemporalParams
    noise_sigma: float
    inducing: InducingStructure
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if not np.isfinite(self.noise_sigma) or self.noise_sigma <= 0:
            raise InvalidInput(f"noise_sigma must be positive, got {self.noise_sigma!r}")

    @classmethod
    def canonical(cls, inducing, jitter=DEFAULT_JITTER):
        """Fitted European values: 19.6 deg, 13.2 deg, 9.9 ka, 2.9 degC, 1.6 degC."""
        return cls(SpatialParams(19.6, 13.2), TemporalParams(9.9, 2.9), 1.6, inducing, jitter)

    def unconstrained(self):
        return {
            "log_ell_lon": jnp.log(self.spatial.ell_lon),
            "log_ell_lat": jnp.log(self.spatial.ell_lat),
            "log_ell_t": jnp.log(self.temporal.ell_t),
            "log_sigma_f": jnp.log(self.temporal.sigma_f),
            "log_sigma": jnp.log(self.noise_sigma),
            "Z": jnp.asarray(self.inducing.Z),
        }

    def with_unconstrained(self, params):
        p = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        inducing = replace(self.inducing, Z=self.inducing.clamp(p["Z"]))
        return Hyperparams(
            SpatialParams(float(np.exp(p["log_ell_lon"])), float(np.exp(p["log_ell_lat"]))),
            TemporalParams(float(np.exp(p["log_ell_t"])), float(np.exp(p["log_sigma_f"]))),
            float(np.exp(p["log_sigma"])),
            inducing,
            self.jitter,
        )


@dataclass(eq=False)
class VariationalState:
    """Site natural parameters of q(u); ``posterior`` caches the smoothed chain."""

    lambda1: np.ndarray  # (M_t, n)
    Lambda2: np.ndarray  # (M_t, n, n)
    cross: np.ndarray  # (max(M_t - 1, 0), n, n)
    posterior: Optional[ChainPosterior] = field(default=None, repr=False)

    @classmethod
    def zeros(cls, num_temporal, n):
        return cls(np.zeros((num_temporal, n)), np.zeros((num_temporal, n, n)),
                   np.zeros((max(num_temporal - 1, 0), n, n)))

    @property
    def sites(self):
        return [GaussianSite(l1, l2) for l1, l2 in zip(self.lambda1, self.Lambda2)]

    def arrays(self):
        return (jnp.asarray(self.lambda1), jnp.asarray(self.Lambda2), jnp.asarray(self.cross))


@dataclass(frozen=True)
class PredictiveMarginal:
    mean: float
    var_latent: float
    var_observation: float


@dataclass(frozen=True, eq=False)
class PredictiveMarginals:
    mean: np.ndarray
    var_latent: np.ndarray
    var_observation: np.ndarray

    def __len__(self):
        return len(self.mean)

    def __getitem__(self, i):
        return PredictiveMarginal(float(self.mean[i]), float(self.var_latent[i]), float(self.var_observation[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


class Batch(NamedTuple):
    X: np.ndarray  # (N, 2) lon/lat
    t: np.ndarray  # (N,) ka
    y: np.ndarray  # (N,) centered values


def as_batch(data) -> Batch:
    """Accept a Batch, anything with ``to_batch()``, or a sequence of records."""
    if isinstance(data, Batch):
        return data
    if hasattr(data, "to_batch"):
        return data.to_batch()
    records = list(data)
    X = np.array([[r.lon, r.lat] for r in records], dtype=float).reshape(-1, 2)
    t = np.array([-r.age / 1000.0 for r in records], dtype=float)
    y = np.array([r.value_centered for r in records], dtype=float)
    return Batch(X, t, y)


# -- pure jax core -------------------------------------------------------------


def _hyper(params):
    return (
        jnp.exp(params["log_ell_lon"]),
        jnp.exp(params["log_ell_lat"]),
        jnp.exp(params["log_ell_t"]),
        jnp.exp(params["log_sigma_f"]),
        jnp.exp(params["log_sigma"]),
    )


def _kzz_chol(params, jitter):
    ell_lon, ell_lat = jnp.exp(params["log_ell_lon"]), jnp.exp(params["log_ell_lat"])
    Z = params["Z"]
    K = matern32(Z, Z, ell_lon, ell_lat) + jitter * jnp.eye(Z.shape[0])
    return jnp.linalg.cholesky(K)


def _ou_precision(knots, ell_t, sigma_f):
    """Tridiagonal precision of a stationary OU chain at the knots."""
    s2 = sigma_f**2
    T = knots.shape[0]
    if T == 1:
        return jnp.array([1.0 / s2]), jnp.zeros(0), jnp.log(s2)
    a = jnp.exp(-jnp.diff(knots) / ell_t)
    one_m = -jnp.expm1(-2.0 * jnp.diff(knots) / ell_t)  # 1 - a**2
    inv = 1.0 / (s2 * one_m)
    diag = jnp.concatenate([jnp.array([0.0]), inv]) + jnp.concatenate([a**2 * inv, jnp.array([0.0])])
    diag = diag.at[0].add(1.0 / s2)
    off = -a * inv
    logdet = jnp.log(s2) + jnp.sum(jnp.log(s2 * one_m))
    return diag, off, logdet


class _Posterior(NamedTuple):
    L: jnp.ndarray
    means: jnp.ndarray  # whitened
    covs: jnp.ndarray
    cross: jnp.ndarray
    logz: jnp.ndarray
    ok: jnp.ndarray
    h: jnp.ndarray  # whitened site parameters
    J: jnp.ndarray
    X: jnp.ndarray


def _posterior(params, sites, knots, jitter):
    lam1, lam2, cross = sites
    L = _kzz_chol(params, jitter)
    M = L.shape[0]
    _, _, ell_t, sigma_f, _ = _hyper(params)
    d, off, logdet = _ou_precision(knots, ell_t, sigma_f)
    eye = jnp.eye(M)
    h = lam1 @ L  # rows: L' lambda1_j
    J = symmetrize(jnp.einsum("ai,tab,bj->tij", L, lam2, L))
    X = jnp.einsum("ai,tab,bj->tij", L, cross, L)
    diag = d[:, None, None] * eye + J
    upper = off[:, None, None] * eye + X
    means, covs, xc, logz, ok = info_smooth(diag, upper, h, -0.5 * M * logdet)
    return _Posterior(L, means, covs, xc, logz, ok, h, J, X)


class _Projection(NamedTuple):
    a: jnp.ndarray  # (N, M) whitened spatial weights L^{-1} k(Z, x)
    lo: jnp.ndarray
    hi: jnp.ndarray
    c_minus: jnp.ndarray
    c_plus: jnp.ndarray
    gamma: jnp.ndarray


def _bridge(t, knots, ell_t, sigma_f):
    T = knots.shape[0]
    s2 = sigma_f**2
    if T == 1:
        e = jnp.exp(-jnp.abs(t - knots[0]) / ell_t)
        zero = jnp.zeros_like(t, dtype=int)
        return zero, zero, e, jnp.zeros_like(t), -s2 * jnp.expm1(-2.0 * jnp.abs(t - knots[0]) / ell_t)
    tc = jnp.clip(t, knots[0], knots[-1])
    lo = jnp.clip(jnp.searchsorted(knots, tc, side="right") - 1, 0, T - 2)
    hi = lo + 1
    d1 = tc - knots[lo]
    d2 = knots[hi] - tc
    a1, a2 = jnp.exp(-d1 / ell_t), jnp.exp(-d2 / ell_t)
    om1, om2 = -jnp.expm1(-2.0 * d1 / ell_t), -jnp.expm1(-2.0 * d2 / ell_t)
    den = -jnp.expm1(-2.0 * (d1 + d2) / ell_t)
    out = jnp.abs(t - tc)
    e = jnp.exp(-out / ell_t)
    c_minus = e * a1 * om2 / den
    c_plus = e * a2 * om1 / den
    V = s2 * om1 * om2 / den - s2 * jnp.expm1(-2.0 * out / ell_t)
    return lo, hi, c_minus, c_plus, V


def _project(params, L, X, t, knots):
    ell_lon, ell_lat, ell_t, sigma_f, _ = _hyper(params)
    kzx = matern32(params["Z"], X, ell_lon, ell_lat)  # (M, N)
    a = solve_triangular(L, kzx, lower=True).T
    lo, hi, cm, cp, V = _bridge(t, knots, ell_t, sigma_f)
    q = jnp.sum(a**2, axis=1)
    gamma = jnp.maximum(sigma_f**2 * (1.0 - q) + q * V, 0.0)
    return _Projection(a, lo, hi, cm, cp, gamma)


def _marginals(post, proj):
    # quadratic forms against every knot, then pick the bracketing pair:
    # O(N M_t M_s^2), which stays within O((M_t + N) M_s^3) while M_t <= M_s
    a = proj.a
    pick = lambda A, idx: jnp.take_along_axis(A, idx[:, None], axis=1)[:, 0]  # noqa: E731
    mu = a @ post.means.T  # (N, T)
    qf = jnp.einsum("ni,tij,nj->nt", a, post.covs, a)
    cm, cp = proj.c_minus, proj.c_plus
    mean = cm * pick(mu, proj.lo) + cp * pick(mu, proj.hi)
    var = cm**2 * pick(qf, proj.lo) + cp**2 * pick(qf, proj.hi) + proj.gamma
    if post.cross.shape[0]:
        qc = jnp.einsum("ni,tij,nj->nt", a, post.cross, a)
        var = var + 2.0 * cm * cp * pick(qc, jnp.minimum(proj.lo, post.cross.shape[0] - 1))
    return mean, jnp.maximum(var, 0.0)


def _kl_from_sites(post):
    """KL(q || p) = E_q[log sites] - log Z, all in whitened coordinates."""
    m, S = post.means, post.covs
    e_site = jnp.sum(post.h * m) - 0.5 * jnp.sum(post.J * (S + m[:, :, None] * m[:, None, :]))
    if post.X.shape[0]:
        pair = post.cross + m[:-1, :, None] * m[1:, None, :]
        e_site = e_site - jnp.sum(post.X * pair)
    return e_site - post.logz


def _expected_log_lik(y, mean, var, sigma):
    s2 = sigma**2
    return -0.5 * (LOG2PI + jnp.log(s2)) - 0.5 * ((y - mean) ** 2 + var) / s2


def _kl(params, sites, knots, jitter):
    post = _posterior(params, sites, knots, jitter)
    return _kl_from_sites(post), post.ok


def _objective(params, sites, X, t, y, wts, kl_weight, knots, jitter):
    """sum_n wts_n E_q[log p(y_n | f_n)] - kl_weight * KL; chunks of a batch add up to the ELBO."""
    post = _posterior(params, sites, knots, jitter)
    proj = _project(params, post.L, X, t, knots)
    mean, var = _marginals(post, proj)
    sigma = jnp.exp(params["log_sigma"])
    lik = jnp.sum(wts * _expected_log_lik(y, mean, var, sigma))
    return lik - kl_weight * _kl_from_sites(post), post.ok


def _tilts(params, sites, X, t, y, wts, knots, jitter):
    """Weighted CVI site targets from a chunk of data, in s-coordinates."""
    post = _posterior(params, sites, knots, jitter)
    proj = _project(params, post.L, X, t, knots)
    mean, _ = _marginals(post, proj)
    s2 = jnp.exp(2.0 * params["log_sigma"])
    g1 = (y - mean) / s2  # d E[log p] / d mean
    g2 = -0.5 / s2  # d E[log p] / d var
    r = wts * (g1 - 2.0 * g2 * mean)
    prec = -2.0 * g2 * wts
    T = knots.shape[0]
    M = proj.a.shape[1]
    # whitened targets, then back to s-coordinates: b = L^{-T} a
    B = solve_triangular(post.L.T, proj.a.T, lower=False).T  # (N, M)
    cm, cp = proj.c_minus, proj.c_plus
    if T == 1:
        cp = jnp.zeros_like(cp)
    W = jax.nn.one_hot(proj.lo, T) * cm[:, None] + jax.nn.one_hot(proj.hi, T) * cp[:, None]  # (N, T)
    h = (W * r[:, None]).T @ B
    J = jnp.einsum("nt,ni,nj->tij", W**2 * prec[:, None], B, B, optimize="optimal")
    if T > 1:
        Wc = jax.nn.one_hot(proj.lo, T - 1) * (cm * cp * prec)[:, None]
        X_ = jnp.einsum("nt,ni,nj->tij", Wc, B, B, optimize="optimal")
    else:
        X_ = jnp.zeros((0, M, M))
    return h, symmetrize(J), X_


def _predict_core(params, sites, X, t, knots, jitter):
    post = _posterior(params, sites, knots, jitter)
    proj = _project(params, post.L, X, t, knots)
    mean, var = _marginals(post, proj)
    return mean, var, post.ok


_kl_jit = jax.jit(_kl)
_objective_jit = jax.jit(_objective)
_value_and_grad_jit = jax.jit(jax.value_and_grad(_objective, has_aux=True))
_tilts_jit = jax.jit(_tilts)
_predict_jit = jax.jit(_predict_core)
_posterior_jit = jax.jit(_posterior)


# -- public operations ---------------------------------------------------------


def _raise_if_failed(ok, what):
    ok = np.asarray(ok)
    if not ok.all():
        raise NumericalFailure(f"{what}: filtered precision lost positive definiteness at step {int(np.argmin(ok))}")


def build_prior_chain(h: Hyperparams) -> LinearGaussianChain:
    """Dense Kronecker prior over inducing states (used for inspection and tests)."""
    Kzz = spatial_gram(h.inducing.Z, h.inducing.Z, h.spatial, h.jitter, same=True)
    try:
        np.linalg.cholesky(Kzz)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure("K_zz is singular after jitter") from e
    sf2, ell = h.temporal.sigma_f**2, h.temporal.ell_t
    dts = np.diff(h.inducing.knots)
    a = np.exp(-dts / ell)
    M = h.inducing.num_spatial
    return LinearGaussianChain(
        times=h.inducing.knots,
        transitions=a[:, None, None] * np.eye(M),
        noises=(sf2 * -np.expm1(-2.0 * dts / ell))[:, None, None] * Kzz,
        initial_cov=sf2 * Kzz,
        transition_fn=lambda dt: np.exp(-dt / ell) * np.eye(M),
        noise_fn=lambda dt: sf2 * -np.expm1(-2.0 * dt / ell) * Kzz,
    )


@dataclass(frozen=True)
class Projection:
    """f(x, t) | s(lo), s(hi) ~ N(W_minus s(lo) + W_plus s(hi), gamma)."""

    lo: int
    hi: int
    W_minus: np.ndarray  # (1, M_s)
    W_plus: np.ndarray
    gamma: float


def project(x, t, h: Hyperparams) -> Projection:
    params = h.unconstrained()
    knots = jnp.asarray(h.inducing.knots)
    L = _kzz_chol(params, h.jitter)
    p = _project(params, L, jnp.asarray(np.reshape(x, (1, 2)), dtype=float), jnp.array([float(t)]), knots)
    b = np.asarray(solve_triangular(L.T, p.a.T, lower=False)).T  # K_zz^{-1} k(Z, x)
    return Projection(int(p.lo[0]), int(p.hi[0]), float(p.c_minus[0]) * b, float(p.c_plus[0]) * b, float(p.gamma[0]))


def expected_log_lik(y_centered, marg: PredictiveMarginal, sigma) -> float:
    """E_q[log N(y; f, sigma**2)] for f ~ N(marg.mean, marg.var_latent)."""
    if not sigma > 0:
        raise InvalidInput(f"sigma must be positive, got {sigma!r}")
    if marg.var_latent < 0:
        raise InvalidInput("latent variance must be non-negative")
    return float(_expected_log_lik(y_centered, marg.mean, marg.var_latent, sigma))


def _batch_arrays(batch):
    b = as_batch(batch)
    if len(b.y) == 0:
        raise InvalidInput("batch is empty")
    return np.asarray(b.X, dtype=float), np.asarray(b.t, dtype=float), np.asarray(b.y, dtype=float)


def _chunks(batch, N_total, chunk):
    """Fixed-size padded chunks (X, t, y, weights); padding rows carry zero weight."""
    X, t, y = _batch_arrays(batch)
    n = len(y)
    if N_total < n:
        raise InvalidInput("N_total must be at least the batch size")
    size = min(chunk, n)
    scale = float(N_total) / n
    for s in range(0, n, size):
        idx = np.arange(s, s + size)
        w = np.where(idx < n, scale, 0.0)
        idx = np.minimum(idx, n - 1)
        yield jnp.asarray(X[idx]), jnp.asarray(t[idx]), jnp.asarray(y[idx]), jnp.asarray(w)


def kl_divergence(v: VariationalState, h: Hyperparams) -> float:
    """KL(q(u) || p(u)) of the variational posterior over inducing states."""
    kl, ok = _kl_jit(h.unconstrained(), v.arrays(), jnp.asarray(h.inducing.knots), h.jitter)
    _raise_if_failed(ok, "kl")
    return float(kl)


def elbo(batch, v: VariationalState, h: Hyperparams, N_total, chunk=1000) -> float:
    """Unbiased minibatch ELBO estimate: (N_total / N_b) sum E_q[log p(y|f)] - KL."""
    params, sites, knots = h.unconstrained(), v.arrays(), jnp.asarray(h.inducing.knots)
    total = 0.0
    for k, (X, t, y, w) in enumerate(_chunks(batch, N_total, chunk)):
        val, ok = _objective_jit(params, sites, X, t, y, w, 1.0 if k == 0 else 0.0, knots, h.jitter)
        _raise_if_failed(ok, "elbo")
        total += float(val)
    return total


def refresh_posterior(v: VariationalState, h: Hyperparams) -> VariationalState:
    """Recompute the cached smoothed chain (in s-coordinates)."""
    post = _posterior_jit(h.unconstrained(), v.arrays(), jnp.asarray(h.inducing.knots), h.jitter)
    _raise_if_failed(post.ok, "posterior")
    L = np.asarray(post.L)
    means = np.asarray(post.means) @ L.T
    covs = L @ np.asarray(post.covs) @ L.T
    cross = L @ np.asarray(post.cross) @ L.T
    v.posterior = ChainPosterior(means, covs, cross, float(post.logz))
    return v


def natgrad_step(batch, v: VariationalState, h: Hyperparams, N_total, rho, chunk=1000) -> VariationalState:
    """One conjugate-computation (natural-gradient) update of the sites.

    new sites = (1 - rho) * old + rho * (N_total / N_b) * sum of per-datum tilts,
    each datum touching only its two neighbouring knots.
    """
    if not 0.0 <= rho <= 1.0:
        raise InvalidInput(f"step size must lie in (0, 1], got {rho!r}")
    if rho == 0.0:
        return VariationalState(v.lambda1.copy(), v.Lambda2.copy(), v.cross.copy(), v.posterior)
    params, sites, knots = h.unconstrained(), v.arrays(), jnp.asarray(h.inducing.knots)
    lam1 = lam2 = cross = 0.0
    for X, t, y, w in _chunks(batch, N_total, chunk):
        l1, l2, x = _tilts_jit(params, sites, X, t, y, w, knots, h.jitter)
        lam1, lam2, cross = lam1 + np.asarray(l1), lam2 + np.asarray(l2), cross + np.asarray(x)
    new = VariationalState(
        (1.0 - rho) * v.lambda1 + rho * np.asarray(lam1),
        (1.0 - rho) * v.Lambda2 + rho * np.asarray(lam2),
        (1.0 - rho) * v.cross + rho * np.asarray(cross),
    )
    return refresh_posterior(new, h)


def elbo_and_gradient(batch, v: VariationalState, h: Hyperparams, N_total, chunk=1000):
    """Minibatch ELBO estimate and its gradient w.r.t. the unconstrained hyperparameters."""
    params, sites, knots = h.unconstrained(), v.arrays(), jnp.asarray(h.inducing.knots)
    total, grad = 0.0, None
    for k, (X, t, y, w) in enumerate(_chunks(batch, N_total, chunk)):
        (val, ok), g = _value_and_grad_jit(params, sites, X, t, y, w, 1.0 if k == 0 else 0.0, knots, h.jitter)
        _raise_if_failed(ok, "elbo")
        total += float(val)
        g = {key: np.asarray(gv) for key, gv in g.items()}
        grad = g if grad is None else {key: grad[key] + g[key] for key in grad}
    return total, grad


def hyper_gradient(batch, v: VariationalState, h: Hyperparams, N_total):
    """ELBO gradient w.r.t. log length scales, log sigma_f, log sigma and raw Z (sites held fixed)."""
    return elbo_and_gradient(batch, v, h, N_total)[1]


def predict(points, v: VariationalState, h: Hyperparams, baseline=None, chunk=2000) -> PredictiveMarginals:
    """Marginal posterior of C(x, t) = m(x) + f(x, t).

    ``points`` is an (N, 3) array of lon, lat, t (ka).  ``baseline`` is any
    callable m(lon, lat); omitted means zero.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        z = np.zeros(0)
        return PredictiveMarginals(z, z, z)
    params = h.unconstrained()
    knots = jnp.asarray(h.inducing.knots)
    means, vars_ = [], []
    size = chunk
    for start in range(0, len(P), size):
        part = P[start:start + size]
        n = len(part)
        # fixed chunk shape: one compilation, and a point's result does not depend on its neighbours
        part = np.concatenate([part, np.repeat(part[:1], size - n, axis=0)])
        m, var, ok = _predict_jit(params, v.arrays(), jnp.asarray(part[:, :2]), jnp.asarray(part[:, 2]), knots,
                                  h.jitter)
        _raise_if_failed(ok, "predict")
        means.append(np.asarray(m)[:n])
        vars_.append(np.asarray(var)[:n])
    mean = np.concatenate(means)
    var = np.concatenate(vars_)
    if baseline is not None:
        mean = mean + np.asarray(baseline(P[:, 0], P[:, 1]), dtype=float)
    return PredictiveMarginals(mean, var, var + h.noise_sigma**2)


# -- initialization --------------------------------------------------------------


def kmeanspp_select(coords, k, rng):
    """k-means++ seeding over unique coordinates (returns at most #unique points)."""
    U = np.unique(np.asarray(coords, dtype=float).reshape(-1, 2), axis=0)
    if len(U) <= k:
        return U
    chosen = [int(rng.integers(len(U)))]
    d2 = np.sum((U - U[chosen[0]]) ** 2, axis=1)
    for _ in range(k - 1):
        total = d2.sum()
        idx = int(rng.choice(len(U), p=d2 / total)) if total > 0 else int(rng.integers(len(U)))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((U - U[idx]) ** 2, axis=1))
    return U[np.array(chosen)]


def init_inducing(X, t, num_spatial, num_temporal, rng) -> InducingStructure:
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    t = np.asarray(t, dtype=float)
    box = (X[:, 0].min(), X[:, 0].max(), X[:, 1].min(), X[:, 1].max())
    Z = kmeanspp_select(X, num_spatial, rng)
    times = np.unique(t)
    if len(times) <= num_temporal:
        # few distinct times: put a knot on each, which makes the temporal part exact
        knots = times
    elif num_temporal == 1:
        knots = np.array([0.5 * (t.min() + t.max())])
    else:
        knots = np.linspace(t.min(), t.max(), num_temporal)
    return InducingStructure(Z, knots, box)

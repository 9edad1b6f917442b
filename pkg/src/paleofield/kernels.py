"""Separable space-time prior covariance.

k((x, t), (x', t')) = k_x(x, x') * k_t(t, t')

``k_x`` is an anisotropic Matern-3/2 kernel on raw (lon, lat) degrees with unit
variance; ``k_t`` is the Matern-1/2 (Ornstein-Uhlenbeck) kernel and carries the
whole amplitude sigma_f**2.  Time is in ka with t = -age, so it increases
toward the present.

The array-level functions (``matern32``, ``ou``) are written with ``jax.numpy``
so the sparse model can differentiate through them; the ``eval_*`` wrappers
take parameter dataclasses and validate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from . import InvalidInput

SQRT3 = float(np.sqrt(3.0))
DEFAULT_JITTER = 1e-6


def _check_positive(name, value):
    if not np.isfinite(value) or value <= 0:
        raise InvalidInput(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class SpatialParams:
    ell_lon: float
    ell_lat: float

    def __post_init__(self):
        _check_positive("ell_lon", self.ell_lon)
        _check_positive("ell_lat", self.ell_lat)


@dataclass(frozen=True)
class TemporalParams:
    ell_t: float  # ka
    sigma_f: float  # degC

    def __post_init__(self):
        _check_positive("ell_t", self.ell_t)
        _check_positive("sigma_f", self.sigma_f)


def _safe_sqrt(r2):
    # zero gradient at r2 == 0 instead of nan; correct for Matern-3/2
    positive = r2 > 0
    return jnp.where(positive, jnp.sqrt(jnp.where(positive, r2, 1.0)), 0.0)


def matern32(X1, X2, ell_lon, ell_lat):
    """Unit-variance anisotropic Matern-3/2 Gram between (N, 2) and (M, 2) arrays."""
    X1 = jnp.asarray(X1)
    X2 = jnp.asarray(X2)
    dlon = (X1[:, None, 0] - X2[None, :, 0]) / ell_lon
    dlat = (X1[:, None, 1] - X2[None, :, 1]) / ell_lat
    r = _safe_sqrt(dlon**2 + dlat**2)
    return (1.0 + SQRT3 * r) * jnp.exp(-SQRT3 * r)


def ou(dt, ell_t, sigma_f):
    return sigma_f**2 * jnp.exp(-jnp.abs(dt) / ell_t)


def _as_coord(x):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (2,):
        raise InvalidInput(f"expected a (lon, lat) pair, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput(f"non-finite coordinate {x!r}")
    return x


def eval_spatial(x1, x2, p: SpatialParams) -> float:
    """Matern-3/2 correlation between two (lon, lat) points."""
    a, b = _as_coord(x1), _as_coord(x2)
    return float(matern32(a[None], b[None], p.ell_lon, p.ell_lat)[0, 0])


def eval_temporal(dt, p: TemporalParams) -> float:
    dt = float(dt)
    if not np.isfinite(dt):
        raise InvalidInput(f"non-finite time gap {dt!r}")
    return float(ou(dt, p.ell_t, p.sigma_f))


def spatial_gram(X1, X2, p: SpatialParams, jitter: float = DEFAULT_JITTER, same=None):
    """Gram matrix of ``eval_spatial`` over two coordinate lists.

    Jitter is added on the diagonal only for a self-gram, detected by identity
    or equality of the inputs unless ``same`` is given explicitly.
    """
    X1 = np.asarray(X1, dtype=float).reshape(-1, 2)
    X2 = np.asarray(X2, dtype=float).reshape(-1, 2)
    if len(X1) == 0 or len(X2) == 0:
        raise InvalidInput("coordinate lists must be nonempty")
    if not (np.all(np.isfinite(X1)) and np.all(np.isfinite(X2))):
        raise InvalidInput("non-finite coordinates")
    K = np.asarray(matern32(X1, X2, p.ell_lon, p.ell_lat))
    if same is None:
        same = X1.shape == X2.shape and np.array_equal(X1, X2)
    if same:
        K = K + jitter * np.eye(len(X1))
    return K


@dataclass(frozen=True)
class StateSpaceRep:
    """Exact state-space form of the OU kernel (state dimension 1)."""

    ell_t: float
    sigma_f: float
    state_dim: int = 1

    @property
    def emission(self):
        return np.ones((1, 1))

    @property
    def stationary_cov(self):
        return np.array([[self.sigma_f**2]])

    def _check(self, dt):
        dt = float(dt)
        if not np.isfinite(dt) or dt < 0:
            raise InvalidInput(f"time step must be finite and >= 0, got {dt!r}")
        return dt

    def transition(self, dt):
        dt = self._check(dt)
        return np.array([[np.exp(-dt / self.ell_t)]])

    def process_noise(self, dt):
        dt = self._check(dt)
        return np.array([[self.sigma_f**2 * -np.expm1(-2.0 * dt / self.ell_t)]])


def ou_state_space(p: TemporalParams) -> StateSpaceRep:
    return StateSpaceRep(ell_t=p.ell_t, sigma_f=p.sigma_f)

"""Training loop (natural-gradient sites + Adam hyperparameters) and validation statistics."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.stats import gaussian_kde

from . import InvalidInput, NumericalFailure
from .data_pipeline import ObservationTable, split_leave_time_slice_out
from .kernels import DEFAULT_JITTER, SpatialParams, TemporalParams
from .sparse_gp import (
    PARAM_KEYS,
    Batch,
    Hyperparams,
    PredictiveMarginals,
    VariationalState,
    elbo_and_gradient,
    init_inducing,
    natgrad_step,
    predict,
    refresh_posterior,
)

log = logging.getLogger(__name__)

INTERVAL_LEVELS = (20, 40, 60, 80, 95)
COVERAGE_KS = (1, 2, 3)


def substream(seed, name):
    """Independent generator for one named consumer of the run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1000
    num_spatial: int = 100
    num_temporal: int = 6
    rho: Optional[float] = None  # natural-gradient step size; None means N_b / N
    warmup_epochs: int = 1  # site-only passes before the first hyperparameter step
    polish_epochs: int = 1  # site-only passes after the last one
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    jitter: float = DEFAULT_JITTER
    init: str = "data"  # "data" or "canonical"
    learn_inducing: bool = True

    def __post_init__(self):
        for name in ("batch_size", "num_spatial", "num_temporal"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be >= 1")
        for name in ("epochs", "warmup_epochs", "polish_epochs"):
            if getattr(self, name) < 0:
                raise InvalidInput(f"{name} must be >= 0")
        if self.rho is not None and not 0.0 < self.rho <= 1.0:
            raise InvalidInput("rho must lie in (0, 1]")
        if not (self.learning_rate >= 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidInput("invalid Adam settings")
        if not self.jitter > 0:
            raise InvalidInput("jitter must be positive")
        if self.init not in ("data", "canonical"):
            raise InvalidInput(f"unknown init {self.init!r}")


# -- Adam ------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({k: np.zeros_like(np.asarray(p, dtype=float)) for k, p in params.items()},
                   {k: np.zeros_like(np.asarray(p, dtype=float)) for k, p in params.items()}, 0)


def adam_step(grad, state: AdamState, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam for minimization: returns (delta to add to the parameters, new state)."""
    if set(grad) != set(state.m):
        raise InvalidInput("gradient keys do not match the optimizer state")
    step = state.step + 1
    m, v, delta = {}, {}, {}
    for k, g in grad.items():
        g = np.asarray(g, dtype=float)
        if g.shape != state.m[k].shape:
            raise InvalidInput(f"gradient shape mismatch for {k}")
        m[k] = beta1 * state.m[k] + (1 - beta1) * g
        v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = m[k] / (1 - beta1**step)
        v_hat = v[k] / (1 - beta2**step)
        delta[k] = -lr * m_hat / (np.sqrt(v_hat) + eps)
    return delta, AdamState(m, v, step)


# -- model -----------------------------------------------------------------------


@dataclass(eq=False)
class TraceRow:
    iteration: int
    epoch: int
    elbo: float


@dataclass(eq=False)
class FittedModel:
    hyper: Hyperparams
    state: VariationalState
    baseline: object  # callable m(lon, lat) or None
    trace: list = field(default_factory=list)
    config: Optional[TrainConfig] = None

    def predict(self, lon, lat, age_bp, chunk=20000) -> PredictiveMarginals:
        pts = np.column_stack([np.asarray(lon, float).reshape(-1), np.asarray(lat, float).reshape(-1),
                               -np.asarray(age_bp, float).reshape(-1) / 1000.0])
        return predict(pts, self.state, self.hyper, self.baseline, chunk=chunk)


def initial_hyperparams(config: TrainConfig, batch: Batch, rng) -> Hyperparams:
    inducing = init_inducing(batch.X, batch.t, config.num_spatial, config.num_temporal, rng)
    if config.init == "canonical":
        return Hyperparams.canonical(inducing, config.jitter)

    def span(x):
        s = float(np.ptp(x)) if len(x) else 0.0
        return s / 4.0 if s > 0 else 1.0

    sd = float(np.std(batch.y))
    sd = sd if sd > 0 else 1.0
    return Hyperparams(SpatialParams(span(batch.X[:, 0]), span(batch.X[:, 1])),
                       TemporalParams(span(batch.t), sd), sd / 2.0, inducing, config.jitter)


def _dump(h: Hyperparams):
    return (f"ell_lon={h.spatial.ell_lon!r} ell_lat={h.spatial.ell_lat!r} ell_t={h.temporal.ell_t!r} "
            f"sigma_f={h.temporal.sigma_f!r} sigma={h.noise_sigma!r} Z={h.inducing.Z.tolist()!r}")


def _check_finite(it, h, value, grad):
    bad = [k for k in PARAM_KEYS if not np.all(np.isfinite(grad[k]))]
    if not np.isfinite(value) or bad:
        raise NumericalFailure(f"iteration {it}: non-finite ELBO or gradient ({', '.join(bad) or 'elbo'}); {_dump(h)}")


def _assert_inside(Z, box):
    if not (np.all(Z[:, 0] >= box[0]) and np.all(Z[:, 0] <= box[1])
            and np.all(Z[:, 1] >= box[2]) and np.all(Z[:, 1] <= box[3])):
        raise AssertionError("inducing locations left the bounding box")


def _site_pass(batches, v, h, N, what):
    """One epoch of site updates with rho_k = n_k / (n_1 + ... + n_k).

    For a Gaussian likelihood the tilts do not depend on q, so after a full
    pass the sites equal the exact full-data optimum for the current
    hyperparameters, whatever the minibatch size.
    """
    seen = 0
    for B in batches:
        seen += len(B.y)
        try:
            v = natgrad_step(B, v, h, N, len(B.y) / seen)
        except NumericalFailure as e:
            raise NumericalFailure(f"{what}: {e}; {_dump(h)}") from e
    return v


def fit(config: TrainConfig, data: ObservationTable, baseline=None, hyper: Optional[Hyperparams] = None,
        callback=None) -> FittedModel:
    """Alternate natural-gradient site updates with Adam hyperparameter steps.

    ``data`` must be centered.  Each epoch visits a seeded permutation of the
    records in consecutive minibatches; every minibatch gets one site update
    followed by one Adam step.  Site-only passes run before the first and
    after the last epoch.  ``hyper`` overrides the initialization.
    """
    batch = data.to_batch() if hasattr(data, "to_batch") else data
    N = len(batch.y)
    if N == 0:
        raise InvalidInput("no training data")
    h = hyper if hyper is not None else initial_hyperparams(config, batch, substream(config.seed, "init"))
    shuffle = substream(config.seed, "shuffle")
    v = refresh_posterior(VariationalState.zeros(h.inducing.num_temporal, h.inducing.num_spatial), h)
    params = {k: np.asarray(p, dtype=float) for k, p in h.unconstrained().items()}
    adam = AdamState.zeros(params)
    trace = []
    Nb = min(config.batch_size, N)
    rho = config.rho if config.rho is not None else Nb / N
    it = 0

    def batches():
        perm = shuffle.permutation(N)
        for s in range(0, N, Nb):
            idx = np.sort(perm[s:s + Nb])
            yield Batch(batch.X[idx], batch.t[idx], batch.y[idx])

    if config.epochs > 0:
        for _ in range(config.warmup_epochs):
            v = _site_pass(batches(), v, h, N, "initial site pass")
    for epoch in range(config.epochs):
        for B in batches():
            it += 1
            try:
                v = natgrad_step(B, v, h, N, rho)
                value, grad = elbo_and_gradient(B, v, h, N)
            except NumericalFailure as e:
                raise NumericalFailure(f"iteration {it}: {e}; {_dump(h)}") from e
            _check_finite(it, h, value, grad)
            trace.append(TraceRow(it, epoch, value))
            if not config.learn_inducing:
                grad["Z"] = np.zeros_like(grad["Z"])
            # Adam minimizes; the ELBO is maximized
            delta, adam = adam_step({k: -g for k, g in grad.items()}, adam, config.learning_rate, config.beta1,
                                    config.beta2, config.eps)
            h = h.with_unconstrained({k: params[k] + delta[k] for k in params})
            params = {k: np.asarray(p, dtype=float) for k, p in h.unconstrained().items()}
            _assert_inside(h.inducing.Z, h.inducing.bounding_box)
            if callback is not None:
                callback(it, epoch, value, h)
        log.info("epoch %d: elbo %.6g", epoch, trace[-1].elbo if trace else float("nan"))
    if config.epochs > 0:
        for _ in range(config.polish_epochs):
            v = _site_pass(batches(), v, h, N, "final site pass")
    v = refresh_posterior(v, h)
    return FittedModel(h, v, baseline, trace, config)


def smoothed(values, window=50):
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# -- evaluation --------------------------------------------------------------------


@dataclass(eq=False)
class EvalReport:
    n: int
    mean_error: float
    mean_abs_error: float
    intervals: dict  # level (percent) -> (lo, hi)
    coverage: dict  # k -> fraction with |normalized| <= k
    prior_mae: float  # MAE of predicting the baseline m(x) alone
    errors: np.ndarray
    normalized: np.ndarray
    prior_errors: np.ndarray

    def to_text(self):
        lines = [f"n = {self.n}", f"mean_error = {self.mean_error!r}", f"mean_abs_error = {self.mean_abs_error!r}",
                 f"prior_mae = {self.prior_mae!r}"]
        for lvl in INTERVAL_LEVELS:
            lo, hi = self.intervals[lvl]
            lines.append(f"interval_{lvl} = {lo!r}, {hi!r}")
        for k in COVERAGE_KS:
            lines.append(f"coverage_{k}sigma = {self.coverage[k]!r}")
        return "\n".join(lines) + "\n"

    def save(self, prefix):
        """Write ``prefix.txt`` (key = value) and ``prefix_errors.csv`` (raw samples)."""
        with open(f"{prefix}.txt", "w") as fh:
            fh.write(self.to_text())
        with open(f"{prefix}_errors.csv", "w") as fh:
            fh.write("error,normalized,prior_error\n")
            for e, z, p in zip(self.errors, self.normalized, self.prior_errors):
                fh.write(f"{float(e)!r},{float(z)!r},{float(p)!r}\n")


def report_from_errors(errors, normalized, prior_errors) -> EvalReport:
    e = np.asarray(errors, dtype=float)
    z = np.asarray(normalized, dtype=float)
    p = np.asarray(prior_errors, dtype=float)
    if len(e) == 0:
        raise InvalidInput("cannot build a report from zero errors")
    intervals = {}
    for lvl in INTERVAL_LEVELS:
        q = lvl / 100.0
        lo, hi = np.quantile(e, [(1 - q) / 2, (1 + q) / 2], method="linear")
        intervals[lvl] = (float(lo), float(hi))
    coverage = {k: float(np.mean(np.abs(z) <= k)) for k in COVERAGE_KS}
    return EvalReport(len(e), float(np.mean(e)), float(np.mean(np.abs(e))), intervals, coverage,
                      float(np.mean(np.abs(p))), e, z, p)


def load_report_errors(path) -> EvalReport:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return report_from_errors(data[:, 0], data[:, 1], data[:, 2])


def validate(model: FittedModel, test: ObservationTable) -> EvalReport:
    """Errors on the uncentered scale: PP mean - value, normalized by the PP std (noise included)."""
    if len(test) == 0:
        raise InvalidInput("test set is empty")
    pp = model.predict(test.lon, test.lat, test.age)
    errors = pp.mean - test.value
    normalized = errors / np.sqrt(pp.var_observation)
    if model.baseline is None:
        prior = -test.value
    else:
        prior = np.asarray(model.baseline(test.lon, test.lat), dtype=float) - test.value
    return report_from_errors(errors, normalized, prior)


def aggregate(reports) -> EvalReport:
    reports = [r for _, r in reports] if reports and isinstance(reports[0], tuple) else list(reports)
    return report_from_errors(np.concatenate([r.errors for r in reports]),
                              np.concatenate([r.normalized for r in reports]),
                              np.concatenate([r.prior_errors for r in reports]))


def sweep_leave_one_out(config: TrainConfig, simulation: ObservationTable, others: ObservationTable, baseline=None,
                        ages=None, simulation_id=None):
    """Hold out each simulation slice in turn; returns [(age_bp, EvalReport), ...]."""
    ids = sorted(set(simulation.source))
    if simulation_id is None:
        if len(ids) != 1:
            raise InvalidInput(f"simulation records carry several sources {ids}; pass simulation_id")
        simulation_id = ids[0]
    all_ages = np.unique(simulation.age[simulation.source == simulation_id])
    if len(all_ages) < 2:
        raise InvalidInput("leave-one-out needs at least two simulation slices")
    ages = all_ages if ages is None else np.asarray(ages, dtype=float)
    combined = ObservationTable.concat([simulation, others])
    out = []
    for age in ages:
        train, test = split_leave_time_slice_out(combined, age, simulation_id)
        model = fit(config, train, baseline)
        out.append((float(age), validate(model, test)))
    return out


def error_density(normalized, grid=None, num=201):
    """Gaussian KDE (Silverman bandwidth) of normalized errors as (grid, density)."""
    z = np.asarray(normalized, dtype=float)
    if grid is None:
        grid = np.linspace(-5.0, 5.0, num)
    grid = np.asarray(grid, dtype=float)
    if len(z) < 2 or np.std(z) == 0:
        raise InvalidInput("density estimate needs at least two distinct samples")
    return grid, gaussian_kde(z, bw_method="silverman")(grid)


def config_dict(config: TrainConfig):
    return asdict(config)


def with_overrides(config: TrainConfig, **kw):
    return replace(config, **{k: v for k, v in kw.items() if v is not None})


def iterations(config: TrainConfig, n):
    return config.epochs * math.ceil(n / min(config.batch_size, n))

"""Desk-scale synthetic benchmarks shared by the experiment scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data_pipeline import ObservationTable, center, fit_baseline
from .sparse_gp import Batch, Hyperparams, VariationalState, elbo_and_gradient, init_inducing, natgrad_step
from .synth import SynthConfig, generate
from .training import TrainConfig, substream

# Recovery / calibration: 15 simulation slices every 1.5 ka on a 20 x 15 grid
# (4,500 values) plus 17,500 pollen records at 400 sites; 2,000 random records
# are held out, leaving 20,000 for training.  Knots every 0.5 ka keep the
# temporal bridge variance between knots small.
RECOVERY_SYNTH = SynthConfig(seed=1, grid_lon=20, grid_lat=15, slice_ages=tuple(np.arange(0.0, 21001.0, 1500.0)),
                             n_pollen_sites=400, n_pollen=17_500)
RECOVERY_HELD_OUT = 2_000
RECOVERY_TRAIN = TrainConfig(epochs=15, batch_size=1000, num_spatial=100, num_temporal=43, seed=1)

# Leave-one-time-slice-out: six slices 0.5 ka apart, simulation data only.
# With few distinct times every training time becomes a knot.
LOO_SYNTH = SynthConfig(seed=2, bbox=(-30.0, 60.0, 30.0, 75.0), grid_lon=30, grid_lat=20,
                        slice_ages=tuple(6000.0 + 500.0 * np.arange(6)), n_pollen=0, sigma_simulation=0.2)
# Each fold has only 3,000 records (3 iterations per epoch), hence more epochs
# and a larger step so the noise scale can leave its data-driven start.
LOO_TRAIN = TrainConfig(epochs=30, batch_size=1000, num_spatial=100, num_temporal=6, learning_rate=0.05, seed=2)


@dataclass(eq=False)
class Prepared:
    train: ObservationTable  # centered
    test: ObservationTable  # centered
    baseline: object
    truth: dict


def prepare(cfg: SynthConfig, held_out=0, seed=0) -> Prepared:
    """Generate, center on the climatology baseline, and split off ``held_out`` random records."""
    corpus = generate(cfg)
    baseline = fit_baseline([corpus.climatology])
    data = center(corpus.observations, baseline)
    mask = np.zeros(len(data), dtype=bool)
    if held_out:
        mask[substream(seed, "benchmark.holdout").choice(len(data), held_out, replace=False)] = True
    return Prepared(data[~mask], data[mask], baseline, corpus.truth)


def recovery_data() -> Prepared:
    return prepare(RECOVERY_SYNTH, RECOVERY_HELD_OUT, RECOVERY_SYNTH.seed)


def fitted_values(h: Hyperparams) -> dict:
    return {"ell_lon": h.spatial.ell_lon, "ell_lat": h.spatial.ell_lat, "ell_t": h.temporal.ell_t,
            "sigma_f": h.temporal.sigma_f, "sigma": h.noise_sigma}


def recovery_ratios(h: Hyperparams, truth: dict) -> dict:
    """fitted / true for each of the five scalars (the noise truth is shared by both sources)."""
    got = fitted_values(h)
    true = {"ell_lon": truth["ell_lon"], "ell_lat": truth["ell_lat"], "ell_t": truth["ell_t"],
            "sigma_f": truth["sigma_f"], "sigma": truth["sigma_pollen"]}
    return {k: got[k] / true[k] for k in got}


def step_time(num_spatial, num_temporal, batch_size=1000, n_total=20_000, repeats=3, seed=0):
    """Best-of wall time of one training iteration (natgrad_step + ELBO gradient)."""
    rng = np.random.default_rng(seed)
    X = rng.uniform([0.0, 30.0], [40.0, 70.0], (batch_size, 2))
    t = rng.uniform(-21.0, 0.0, batch_size)
    batch = Batch(X, t, rng.normal(size=batch_size))
    h = Hyperparams.canonical(init_inducing(X, t, num_spatial, num_temporal, np.random.default_rng(seed)))
    v = VariationalState.zeros(num_temporal, num_spatial)
    v = natgrad_step(batch, v, h, n_total, 0.5)  # compile
    elbo_and_gradient(batch, v, h, n_total)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        v = natgrad_step(batch, v, h, n_total, 0.5)
        elbo_and_gradient(batch, v, h, n_total)
        best = min(best, time.perf_counter() - t0)
    return best

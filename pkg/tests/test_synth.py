import time

import numpy as np
import pytest

from problems import product_gram
from paleofield import InvalidInput
from paleofield.data_pipeline import load_observations, load_slice
from paleofield.kernels import SpatialParams, TemporalParams
from paleofield.synth import SynthConfig, generate, sample_prior, true_mean, write_corpus

SMALL = dict(grid_lon=6, grid_lat=5, slice_ages=(0.0, 4000.0, 8000.0), n_pollen_sites=12, n_pollen=70)


def test_same_seed_same_corpus():
    a = generate(SynthConfig(seed=5, **SMALL)).observations
    b = generate(SynthConfig(seed=5, **SMALL)).observations
    c = generate(SynthConfig(seed=6, **SMALL)).observations
    for name in ("lon", "lat", "age", "value"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.value, c.value)


def test_requested_sizes_are_exact():
    cfg = SynthConfig(seed=1, **SMALL)
    corpus = generate(cfg)
    obs = corpus.observations
    assert len(obs) == 6 * 5 * 3 + 70
    assert np.sum(obs.source == "pollen") == 70
    assert len(corpus.slices) == 3 and all(len(s.value) == 30 for s in corpus.slices)
    assert sorted(set(obs.age[obs.source == "sim"])) == [0.0, 4000.0, 8000.0]
    pollen_sites = {(x, y) for x, y, s in zip(obs.lon, obs.lat, obs.source) if s == "pollen"}
    assert len(pollen_sites) == 12
    assert np.all(obs.age[obs.source == "pollen"] % 50 == 0)


def test_climatology_slice_is_noise_free_mean():
    corpus = generate(SynthConfig(seed=2, **SMALL))
    c = corpus.climatology
    np.testing.assert_array_equal(c.value, true_mean(c.lon, c.lat))


def test_prior_draws_have_the_kernel_covariance():
    cfg = SynthConfig(ell_lon=10.0, ell_lat=8.0, ell_t=5.0, sigma_f=1.7)
    sites = np.array([[0.0, 40.0], [6.0, 44.0], [3.0, 50.0]])
    ages = np.array([8000.0, 0.0, 3000.0])
    rng = np.random.default_rng(0)
    draws = np.stack([sample_prior(sites, ages, cfg, rng).ravel() for _ in range(4000)])
    X = np.repeat(sites, 3, axis=0)
    t = np.tile(-ages / 1000.0, 3)
    K = product_gram(X, t, X, t, SpatialParams(10.0, 8.0), TemporalParams(5.0, 1.7))
    emp = np.cov(draws, rowvar=False)
    # standard error of a covariance estimate is about sqrt((K_ii K_jj + K_ij^2) / n)
    se = np.sqrt((np.outer(np.diag(K), np.diag(K)) + K**2) / len(draws))
    assert np.all(np.abs(emp - K) <= 5 * se)


def test_write_corpus_files(tmp_path):
    cfg = SynthConfig(seed=3, **SMALL)
    corpus = generate(cfg)
    write_corpus(corpus, tmp_path)
    table, report = load_observations(tmp_path / "observations.csv")
    assert report.rows_rejected == 0 and len(table) == len(corpus.observations)
    np.testing.assert_array_equal(table.value, corpus.observations.value)
    s = load_slice(tmp_path / "slices" / "sim_4000.csv", 4000, "sim")
    np.testing.assert_array_equal(s.value, corpus.slices[1].value)
    assert (tmp_path / "slices" / "climatology.csv").is_file() and (tmp_path / "truth.json").is_file()


def test_config_validation():
    with pytest.raises(InvalidInput):
        SynthConfig(bbox=(10.0, 0.0, 0.0, 10.0))
    with pytest.raises(InvalidInput):
        SynthConfig(slice_ages=(0.0, 0.0))
    with pytest.raises(InvalidInput):
        SynthConfig(ell_t=0.0)


@pytest.mark.slow
def test_full_size_corpus_loads_quickly(tmp_path):
    # 60 x 40 grid x 250 slices + 61,028 pollen records = 661,028 rows
    cfg = SynthConfig(seed=4, grid_lon=60, grid_lat=40, slice_ages=tuple(84.0 * np.arange(250)),
                      n_pollen_sites=800, n_pollen=61_028)
    write_corpus(generate(cfg), tmp_path)
    t0 = time.perf_counter()
    table, report = load_observations(tmp_path / "observations.csv")
    elapsed = time.perf_counter() - t0
    assert len(table) == 661_028 and report.rows_rejected == 0
    assert elapsed < 60.0

"""Synthetic corpora drawn exactly from the separable prior plus Gaussian noise.

The latent field is f ~ GP(0, k_x k_t) on the union of grid cells and pollen
sites, sampled with a spatial Cholesky factor and the exact OU recursion over
the sorted union of ages.  Observed values are m_true(x) + f + noise, where
m_true is a smooth deterministic climatology that is also written out as a
noise-free gridded slice, so a baseline fitted to it centers the data onto
the prior.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import InvalidInput
from .data_pipeline import GriddedSlice, ObservationTable, save_observations, save_slice
from .kernels import SpatialParams, matern32

CLIMATOLOGY_ID = "climatology"


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    bbox: tuple = (-10.0, 40.0, 35.0, 70.0)  # lon_min, lon_max, lat_min, lat_max
    grid_lon: int = 20
    grid_lat: int = 15
    slice_ages: tuple = (0.0, 3000.0, 6000.0, 9000.0, 12000.0, 15000.0, 18000.0, 21000.0)
    simulation_id: str = "sim"
    n_pollen_sites: int = 300
    n_pollen: int = 2000
    pollen_age_max: float = 21000.0
    age_step: float = 50.0  # pollen ages are rounded to this many years
    ell_lon: float = 19.6
    ell_lat: float = 13.2
    ell_t: float = 9.9
    sigma_f: float = 2.9
    sigma_simulation: float = 1.6
    sigma_pollen: float = 1.6
    climatology_age: float = 6000.0

    def __post_init__(self):
        b = self.bbox
        if len(b) != 4 or b[0] >= b[1] or b[2] >= b[3]:
            raise InvalidInput(f"malformed bbox {b}")
        if not (-180 <= b[0] and b[1] <= 180 and -90 <= b[2] and b[3] <= 90):
            raise InvalidInput("bbox outside the globe")
        if self.grid_lon < 2 or self.grid_lat < 2:
            raise InvalidInput("grid needs at least 2 x 2 cells")
        if self.n_pollen < 0 or (self.n_pollen > 0 and self.n_pollen_sites < 1):
            raise InvalidInput("invalid pollen sizes")
        if any(a < 0 for a in self.slice_ages) or len(set(self.slice_ages)) != len(self.slice_ages):
            raise InvalidInput("slice ages must be distinct and non-negative")
        for name in ("ell_lon", "ell_lat", "ell_t", "sigma_f"):
            if not getattr(self, name) > 0:
                raise InvalidInput(f"{name} must be positive")
        if self.sigma_simulation < 0 or self.sigma_pollen < 0 or self.age_step <= 0:
            raise InvalidInput("noise levels must be non-negative and age_step positive")

    @property
    def n_simulation(self):
        return self.grid_lon * self.grid_lat * len(self.slice_ages)


def true_mean(lon, lat):
    """Smooth climatology: cooling poleward with a gentle zonal wave."""
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    return 30.0 - 0.45 * lat + 2.0 * np.cos(np.deg2rad(lon) * 3.0) + 0.02 * lon


def grid_points(cfg: SynthConfig):
    lon, lat = np.meshgrid(np.linspace(cfg.bbox[0], cfg.bbox[1], cfg.grid_lon),
                           np.linspace(cfg.bbox[2], cfg.bbox[3], cfg.grid_lat))
    return lon.ravel(), lat.ravel()


def sample_prior(sites, ages_bp, cfg: SynthConfig, rng):
    """Exact draw of f at sites x ages; returns (n_sites, n_ages) aligned with the inputs."""
    sites = np.asarray(sites, dtype=float).reshape(-1, 2)
    ages = np.asarray(ages_bp, dtype=float)
    uniq, inv = np.unique(ages, return_inverse=True)
    t = np.sort(-uniq / 1000.0)  # increasing toward the present
    order = np.argsort(-uniq / 1000.0)
    K = np.asarray(matern32(sites, sites, cfg.ell_lon, cfg.ell_lat))
    L = np.linalg.cholesky(K + 1e-10 * np.eye(len(sites)))
    W = L @ rng.standard_normal((len(sites), len(t)))
    F = np.empty_like(W)
    F[:, 0] = cfg.sigma_f * W[:, 0]
    a = np.exp(-np.diff(t) / cfg.ell_t)
    c = cfg.sigma_f * np.sqrt(-np.expm1(-2.0 * np.diff(t) / cfg.ell_t))
    for j in range(1, len(t)):
        F[:, j] = a[j - 1] * F[:, j - 1] + c[j - 1] * W[:, j]
    by_unique = np.empty_like(F)
    by_unique[:, order] = F
    return by_unique[:, inv]


@dataclass(eq=False)
class SynthCorpus:
    observations: ObservationTable
    slices: list  # GriddedSlice per simulation age
    climatology: GriddedSlice
    truth: dict = field(default_factory=dict)


def generate(cfg: SynthConfig) -> SynthCorpus:
    rng = np.random.default_rng(cfg.seed)
    glon, glat = grid_points(cfg)
    n_grid = len(glon)
    site_rng = np.random.default_rng([cfg.seed, 1])
    plon = site_rng.uniform(cfg.bbox[0], cfg.bbox[1], cfg.n_pollen_sites if cfg.n_pollen else 0)
    plat = site_rng.uniform(cfg.bbox[2], cfg.bbox[3], len(plon))
    site_of = np.arange(cfg.n_pollen) % max(len(plon), 1)
    p_age = np.round(site_rng.uniform(0, cfg.pollen_age_max, cfg.n_pollen) / cfg.age_step) * cfg.age_step
    slice_ages = np.asarray(cfg.slice_ages, dtype=float)
    all_ages = np.unique(np.concatenate([slice_ages, p_age]))
    sites = np.column_stack([np.concatenate([glon, plon]), np.concatenate([glat, plat])])
    F = sample_prior(sites, all_ages, cfg, rng)
    col = {a: j for j, a in enumerate(all_ages)}

    slices, tables = [], []
    for a in slice_ages:
        val = true_mean(glon, glat) + F[:n_grid, col[a]] + cfg.sigma_simulation * rng.standard_normal(n_grid)
        s = GriddedSlice(glon, glat, val, float(a), cfg.simulation_id)
        slices.append(s)
        tables.append(s.to_table())
    if cfg.n_pollen:
        f_p = F[n_grid + site_of, [col[a] for a in p_age]]
        pv = true_mean(plon[site_of], plat[site_of]) + f_p + cfg.sigma_pollen * rng.standard_normal(cfg.n_pollen)
        tables.append(ObservationTable(plon[site_of], plat[site_of], p_age, pv, ["pollen"] * cfg.n_pollen))
    clim = GriddedSlice(glon, glat, true_mean(glon, glat), cfg.climatology_age, CLIMATOLOGY_ID)
    truth = {
        "ell_lon": cfg.ell_lon, "ell_lat": cfg.ell_lat, "ell_t": cfg.ell_t, "sigma_f": cfg.sigma_f,
        "sigma_simulation": cfg.sigma_simulation, "sigma_pollen": cfg.sigma_pollen,
        "n_simulation": cfg.n_simulation, "n_pollen": cfg.n_pollen, "config": _jsonable(asdict(cfg)),
    }
    return SynthCorpus(ObservationTable.concat(tables), slices, clim, truth)


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def slice_filename(s: GriddedSlice):
    return f"{s.simulation_id}_{int(round(s.age_bp))}.csv"


def write_corpus(corpus: SynthCorpus, out_dir):
    """observations.csv, slices/*.csv (simulation slices and the climatology) and truth.json."""
    out = Path(out_dir)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    save_observations(corpus.observations, out / "observations.csv", include_centered=False)
    for s in corpus.slices:
        save_slice(s, out / "slices" / slice_filename(s))
    save_slice(corpus.climatology, out / "slices" / f"{CLIMATOLOGY_ID}.csv")
    with open(out / "truth.json", "w") as fh:
        json.dump(corpus.truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out

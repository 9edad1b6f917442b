"""Command-line front end: ``paleofield <command> [options]``.

Commands and the files they read and write (paths under the output directory):

    synth        corpus (observations.csv, slices/, truth.json) and run.toml
    preprocess   centered.csv, baseline.json, ingest_report.txt
    fit          checkpoint.json, elbo_trace.csv
    predict      predictions.csv (or --output)
    export-grid  grid_<age>.csv per requested age
    validate     validation/<id>_<age>.txt and _errors.csv, aggregate files, density.csv

Exit codes: 0 success, 2 input or validation error, 3 numerical failure,
4 I/O failure while writing outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import InvalidInput, NumericalFailure
from . import checkpoint as ckpt
from . import config as cfgmod
from .data_pipeline import (
    ObservationTable,
    center,
    fit_baseline,
    load_observations,
    load_slice,
    save_observations,
    split_leave_time_slice_out,
)
from .synth import CLIMATOLOGY_ID, generate, write_corpus
from .training import EvalReport, aggregate, error_density, fit, sweep_leave_one_out, validate

log = logging.getLogger("paleofield")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
CENTERED_FILE = "centered.csv"
BASELINE_FILE = "baseline.json"
REPORT_FILE = "ingest_report.txt"
CHECKPOINT_FILE = "checkpoint.json"
TRACE_FILE = "elbo_trace.csv"
PREDICT_COLUMNS = ("lon", "lat", "age_bp", "mean_c", "std_latent", "std_predictive")


class OutputError(Exception):
    """Writing an output failed (exit code 4)."""


def _writing(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except OSError as e:
        raise OutputError(str(e)) from e


def _mkdir(path):
    _writing(Path(path).mkdir, parents=True, exist_ok=True)
    return Path(path)


def _write_text(path, text):
    _writing(Path(path).write_text, text, encoding="utf-8")


def _r(x):
    return repr(float(x))


# -- configuration ----------------------------------------------------------------


def _load_config(args, need=True) -> cfgmod.RunConfig:
    if args.config is None:
        if need:
            raise InvalidInput("--config is required for this command")
        cfg = cfgmod.RunConfig(base_dir=str(Path.cwd()))
    else:
        cfg = cfgmod.load(args.config)
    train = {}
    for name in ("epochs", "batch_size", "num_spatial", "num_temporal", "learning_rate", "rho"):
        train[name] = getattr(args, name, None)
    cfg = cfgmod.with_overrides(cfg, seed=args.seed, out_dir=args.out, threads=args.threads, **train)
    _apply_threads(cfg.threads)
    return cfg


def _apply_threads(n):
    if n and n > 0:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)


# -- preprocess ---------------------------------------------------------------------


def _baseline_to_json(baseline):
    return json.dumps({"baseline": ckpt._baseline_to_list(baseline)}, sort_keys=True, indent=1,
                      allow_nan=False) + "\n"


def _load_baseline(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"baseline file not found: {path} (run preprocess first)")
    try:
        return ckpt._baseline_from_list(json.loads(path.read_text())["baseline"])
    except (KeyError, ValueError, TypeError) as e:
        raise InvalidInput(f"{path}: malformed baseline file ({e!r})") from e


def cmd_preprocess(args):
    cfg = _load_config(args)
    tables, texts = [], []
    for rel in cfg.data.observations:
        table, report = load_observations(cfg.resolve(rel))
        tables.append(table)
        texts.append(report.to_text())
    data = ObservationTable.concat(tables)
    if len(data) == 0:
        raise InvalidInput("no valid observations after ingest:\n" + "".join(texts))
    slices = [load_slice(cfg.resolve(s.path), s.age_bp, s.simulation_id) for s in cfg.baseline.slices]
    baseline = fit_baseline(slices, cfg.baseline.max_nodes) if slices else None
    centered = center(data, baseline if baseline is not None else (lambda lon, lat: np.zeros(np.shape(lon))))
    out = _mkdir(cfg.out_path)
    summary = "".join(texts) + f"baseline interpolants = {0 if baseline is None else baseline.count}\n" \
                               f"records = {len(centered)}\n"
    _writing(save_observations, centered, out / CENTERED_FILE, include_centered=True)
    _write_text(out / BASELINE_FILE, _baseline_to_json(baseline))
    _write_text(out / REPORT_FILE, summary)
    print(summary, end="")
    return EXIT_OK


def _preprocessed(cfg):
    path = cfg.out_path / CENTERED_FILE
    if not path.is_file():
        raise FileNotFoundError(f"preprocessed data not found: {path} (run preprocess first)")
    table, report = load_observations(path)
    if report.rows_rejected or not table.is_centered:
        raise InvalidInput(f"{path}: not a valid preprocessed file")
    return table, _load_baseline(cfg.out_path / BASELINE_FILE)


# -- fit ------------------------------------------------------------------------------


def fitted_summary(model) -> str:
    h = model.hyper
    lines = [f"ell_lon = {h.spatial.ell_lon!r} deg", f"ell_lat = {h.spatial.ell_lat!r} deg",
             f"ell_t = {h.temporal.ell_t * 1000.0!r} yr", f"sigma_f = {h.temporal.sigma_f!r} degC",
             f"sigma = {h.noise_sigma!r} degC", f"inducing_points = {h.inducing.num_spatial}"]
    lines += [f"Z[{i}] = {float(lon)!r}, {float(lat)!r}" for i, (lon, lat) in enumerate(h.inducing.Z)]
    return "\n".join(lines) + "\n"


def _write_trace(path, trace):
    def write():
        with open(path, "w", newline="") as fh:
            fh.write("iteration,epoch,elbo_estimate\n")
            for row in trace:
                fh.write(f"{row.iteration},{row.epoch},{row.elbo!r}\n")

    _writing(write)


def cmd_fit(args):
    cfg = _load_config(args)
    data, baseline = _preprocessed(cfg)
    model = fit(cfg.train, data, baseline)
    out = _mkdir(cfg.out_path)
    _write_text(out / CHECKPOINT_FILE, ckpt.dumps(model))
    _write_trace(out / TRACE_FILE, model.trace)
    print(fitted_summary(model), end="")
    return EXIT_OK


# -- predict / export -------------------------------------------------------------------


def _run_dir(args):
    if args.config is not None:
        return _load_config(args).out_path
    _apply_threads(args.threads)
    return Path(args.out) if args.out is not None else None


def _checkpoint_path(args, run_dir):
    if args.checkpoint is not None:
        return Path(args.checkpoint)
    if run_dir is None:
        raise InvalidInput("give --checkpoint, or --config/--out pointing at a fitted run")
    return run_dir / CHECKPOINT_FILE


def _load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return ckpt.load(path)


def read_points(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"points file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise InvalidInput(f"{path}: empty file, header lon,lat,age_bp required") from e
    missing = [c for c in ("lon", "lat", "age_bp") if c not in df.columns]
    if missing:
        raise InvalidInput(f"{path}: missing header column(s) {', '.join(missing)}")
    cols = []
    for name in ("lon", "lat", "age_bp"):
        try:
            vals = np.array([float(s) for s in df[name]], dtype=float)
        except ValueError as e:
            raise InvalidInput(f"{path}: unparseable {name} ({e})") from e
        bad = np.flatnonzero(~np.isfinite(vals))
        if len(bad):
            raise InvalidInput(f"{path}: row {bad[0] + 1}: non-finite {name}")
        cols.append(vals)
    return tuple(cols)


def _write_predictions(path, lon, lat, age, pp):
    def write():
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PREDICT_COLUMNS)
            for row in zip(lon, lat, age, pp.mean, np.sqrt(pp.var_latent), np.sqrt(pp.var_observation)):
                w.writerow([_r(x) for x in row])

    _writing(write)


def cmd_predict(args):
    run_dir = _run_dir(args)
    model = _load_checkpoint(_checkpoint_path(args, run_dir))
    lon, lat, age = read_points(args.points)
    pp = model.predict(lon, lat, age)
    if args.output is not None:
        target = Path(args.output)
    else:
        target = (run_dir if run_dir is not None else Path.cwd()) / "predictions.csv"
    _mkdir(target.parent)
    _write_predictions(target, lon, lat, age, pp)
    print(f"wrote {len(lon)} predictions to {target}")
    return EXIT_OK


def grid_axis(lo, hi, resolution):
    n = int(math.floor((hi - lo) / resolution + 1e-9)) + 1
    return lo + resolution * np.arange(n)


def cmd_export_grid(args):
    if not args.resolution > 0:
        raise InvalidInput("--resolution must be positive")
    lon0, lon1, lat0, lat1 = args.bbox
    if lon0 > lon1 or lat0 > lat1:
        raise InvalidInput(f"malformed --bbox {args.bbox}")
    if any(a < 0 for a in args.ages):
        raise InvalidInput(f"ages must be non-negative, got {args.ages}")
    run_dir = _run_dir(args)
    model = _load_checkpoint(_checkpoint_path(args, run_dir))
    lons, lats = grid_axis(lon0, lon1, args.resolution), grid_axis(lat0, lat1, args.resolution)
    glon, glat = np.meshgrid(lons, lats)
    glon, glat = glon.ravel(), glat.ravel()
    out = _mkdir(run_dir if run_dir is not None else Path.cwd())
    for age in args.ages:
        ages = np.full(len(glon), float(age))
        pp = model.predict(glon, glat, ages)
        path = out / f"grid_{age:g}.csv"
        _write_predictions(path, glon, glat, ages, pp)
        print(f"wrote {len(glon)} grid cells to {path}")
    return EXIT_OK


# -- validate ---------------------------------------------------------------------------


def _save_report(report: EvalReport, prefix):
    _writing(report.save, prefix)


def cmd_validate(args):
    cfg = _load_config(args)
    data, baseline = _preprocessed(cfg)
    v = cfg.validate
    out = _mkdir(cfg.out_path / "validation")
    if v.mode == "single":
        train, test = split_leave_time_slice_out(data, v.ages[0], v.simulation_id)
        results = [(v.ages[0], validate(fit(cfg.train, train, baseline), test))]
    else:
        is_sim = data.source == v.simulation_id
        results = sweep_leave_one_out(cfg.train, data[is_sim], data[~is_sim], baseline,
                                      ages=list(v.ages) or None, simulation_id=v.simulation_id)
    for age, report in results:
        _save_report(report, out / f"{v.simulation_id}_{age:g}")
        print(f"held out {v.simulation_id} @ {age:g} yr BP: n = {report.n}, mean error = {report.mean_error:.4f}, "
              f"MAE = {report.mean_abs_error:.4f}, coverage 3 std = {report.coverage[3]:.4f}")
    agg = aggregate(results)
    _save_report(agg, out / "aggregate")
    if agg.n >= 2 and np.std(agg.normalized) > 0:
        grid, dens = error_density(agg.normalized, num=v.density_points)
        _write_text(out / "density.csv", "normalized_error,density\n"
                    + "".join(f"{_r(g)},{_r(d)}\n" for g, d in zip(grid, dens)))
    print("aggregate:\n" + agg.to_text(), end="")
    return EXIT_OK


# -- synth ---------------------------------------------------------------------------------


def cmd_synth(args):
    cfg = _load_config(args, need=False)
    corpus = generate(cfg.synth)
    out = _mkdir(cfg.out_path)
    _writing(write_corpus, corpus, out)
    run = replace(
        cfg,
        out_dir=".",
        threads=0,
        base_dir=".",
        data=cfgmod.DataConfig(("observations.csv",)),
        baseline=replace(cfg.baseline, slices=(
            cfgmod.SliceSpec(f"slices/{CLIMATOLOGY_ID}.csv", cfg.synth.climatology_age, CLIMATOLOGY_ID),)),
        validate=replace(cfg.validate, simulation_id=cfg.synth.simulation_id),
    )
    _write_text(out / "run.toml", cfgmod.dumps(run))
    print(f"wrote {len(corpus.observations)} records ({cfg.synth.n_simulation} simulated, {cfg.synth.n_pollen} "
          f"pollen) in {len(corpus.slices)} slices to {out}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------------------


def _common(p, config_required=True):
    p.add_argument("--config", metavar="PATH", default=None,
                   help="TOML run configuration" + (" (required)" if config_required else " (default: built-in defaults)"))
    p.add_argument("--seed", type=int, default=None, metavar="N",
                   help="run seed; overrides [run] seed (config default 0)")
    p.add_argument("--out", metavar="DIR", default=None,
                   help="output directory; overrides [run] out_dir (config default: the config file's directory)")
    p.add_argument("--threads", type=int, default=None, metavar="N",
                   help="cap on BLAS/OpenMP threads; 0 keeps library defaults (config default 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default off)")


def _train_overrides(p):
    g = p.add_argument_group("training overrides (each defaults to the [train] value in the config)")
    g.add_argument("--epochs", type=int, default=None, help="passes over the data (built-in default 30)")
    g.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="minibatch size (default 1000)")
    g.add_argument("--num-spatial", dest="num_spatial", type=int, default=None,
                   help="spatial inducing points M_s (default 100)")
    g.add_argument("--num-temporal", dest="num_temporal", type=int, default=None,
                   help="temporal knots M_t (default 6)")
    g.add_argument("--learning-rate", dest="learning_rate", type=float, default=None, help="Adam step (default 0.01)")
    g.add_argument("--rho", type=float, default=None, help="natural-gradient step (default batch_size / N)")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="paleofield", description=__doc__.split("\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic corpus and a matching run.toml", formatter_class=fmt)
    _common(p, config_required=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="ingest observations, fit the baseline, center the data",
                       formatter_class=fmt)
    _common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fit", help="train the model on preprocessed data", formatter_class=fmt)
    _common(p)
    _train_overrides(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="posterior marginals at points from a CSV", formatter_class=fmt)
    _common(p, config_required=False)
    p.add_argument("--checkpoint", metavar="PATH", default=None,
                   help="model checkpoint (default: checkpoint.json in the configured output directory)")
    p.add_argument("--points", metavar="PATH", required=True, help="CSV with columns lon,lat,age_bp")
    p.add_argument("--output", metavar="PATH", default=None,
                   help="output CSV (default: predictions.csv in the run directory, else in the working directory)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-grid", help="posterior marginals on a regular lon/lat grid per age",
                       formatter_class=fmt)
    _common(p, config_required=False)
    p.add_argument("--checkpoint", metavar="PATH", default=None,
                   help="model checkpoint (default: checkpoint.json in the configured output directory)")
    p.add_argument("--bbox", type=float, nargs=4, required=True, metavar=("LON_MIN", "LON_MAX", "LAT_MIN", "LAT_MAX"),
                   help="grid extent in degrees, edges included")
    p.add_argument("--resolution", type=float, default=1.0, help="grid spacing in degrees")
    p.add_argument("--ages", type=float, nargs="+", required=True, metavar="AGE_BP", help="ages in years BP")
    p.set_defaults(func=cmd_export_grid)

    p = sub.add_parser("validate", help="leave-one-time-slice-out validation", formatter_class=fmt)
    _common(p)
    _train_overrides(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except OutputError as e:
        print(f"error: cannot write output: {e}", file=sys.stderr)
        return EXIT_IO
    except (InvalidInput, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"error: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

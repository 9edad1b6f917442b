"""File-backed run configuration (TOML).

Sections mirror :class:`RunConfig`::

    [run]        seed, out_dir, threads
    [data]       observations (list of CSV paths)
    [baseline]   max_nodes, plus [[baseline.slices]] tables with path, age_bp, simulation_id
    [train]      TrainConfig fields (the seed comes from [run])
    [validate]   mode ("sweep" or "single"), simulation_id, ages, density_points
    [synth]      SynthConfig fields (the seed comes from [run])

Relative paths are resolved against the directory of the config file.  Any
key not listed here is an error.
"""

from __future__ import annotations

import sys
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import InvalidInput
from .data_pipeline import DEFAULT_MAX_NODES
from .synth import SynthConfig
from .training import TrainConfig


@dataclass(frozen=True)
class SliceSpec:
    path: str
    age_bp: float
    simulation_id: str


@dataclass(frozen=True)
class DataConfig:
    observations: tuple = ("observations.csv",)


@dataclass(frozen=True)
class BaselineConfig:
    slices: tuple = ()  # SliceSpec entries
    max_nodes: int = DEFAULT_MAX_NODES


@dataclass(frozen=True)
class ValidateConfig:
    mode: str = "sweep"  # "sweep" holds out every slice in turn, "single" holds out one
    simulation_id: str = "sim"
    ages: tuple = ()  # sweep: subset of slice ages (empty means all); single: exactly one age
    density_points: int = 201

    def __post_init__(self):
        if self.mode not in ("sweep", "single"):
            raise InvalidInput(f"validate.mode must be 'sweep' or 'single', got {self.mode!r}")
        if self.mode == "single" and len(self.ages) != 1:
            raise InvalidInput("validate.mode = 'single' needs exactly one entry in validate.ages")
        if self.density_points < 2:
            raise InvalidInput("validate.density_points must be >= 2")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "."
    threads: int = 0  # 0 leaves the numerical libraries at their defaults
    data: DataConfig = field(default_factory=DataConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    validate: ValidateConfig = field(default_factory=ValidateConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    base_dir: str = "."  # directory that relative paths refer to; not read from the file

    def __post_init__(self):
        if self.threads < 0:
            raise InvalidInput("threads must be >= 0")
        # one seed drives every consumer
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))
        if self.synth.seed != self.seed:
            object.__setattr__(self, "synth", replace(self.synth, seed=self.seed))

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_path(self) -> Path:
        return self.resolve(self.out_dir)


# types of fields whose default is None or otherwise uninformative
_OPTIONAL_FLOAT = {("train", "rho")}


def _coerce(section, name, value, default):
    where = f"[{section}] {name}"
    if (section, name) in _OPTIONAL_FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidInput(f"{where} must be a number")
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidInput(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidInput(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidInput(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidInput(f"{where} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise InvalidInput(f"{where} must be a list")
        kinds = {type(d) for d in default}
        if kinds == {float} or (section, name) == ("validate", "ages"):
            if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
                raise InvalidInput(f"{where} must be a list of numbers")
            return tuple(float(v) for v in value)
        if not all(isinstance(v, str) for v in value):
            raise InvalidInput(f"{where} must be a list of strings")
        return tuple(value)
    raise InvalidInput(f"{where}: unsupported value {value!r}")  # pragma: no cover


def _build(cls, section, table, skip=()):
    if not isinstance(table, dict):
        raise InvalidInput(f"[{section}] must be a table")
    known = {f.name: f for f in fields(cls) if f.name not in skip}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise InvalidInput(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kw = {}
    for name, value in table.items():
        f = known[name]
        default = f.default if f.default is not MISSING else None
        kw[name] = _coerce(section, name, value, default)
    try:
        return cls(**kw)
    except TypeError as e:
        raise InvalidInput(f"[{section}]: {e}") from e


def _slice_specs(items):
    if not isinstance(items, list):
        raise InvalidInput("baseline.slices must be an array of tables")
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise InvalidInput(f"baseline.slices[{i}] must be a table")
        unknown = sorted(set(item) - {"path", "age_bp", "simulation_id"})
        missing = sorted({"path", "age_bp", "simulation_id"} - set(item))
        if unknown:
            raise InvalidInput(f"unknown key(s) in baseline.slices[{i}]: {', '.join(unknown)}")
        if missing:
            raise InvalidInput(f"baseline.slices[{i}] is missing {', '.join(missing)}")
        age = item["age_bp"]
        if isinstance(age, bool) or not isinstance(age, (int, float)):
            raise InvalidInput(f"baseline.slices[{i}].age_bp must be a number")
        out.append(SliceSpec(str(item["path"]), float(age), str(item["simulation_id"])))
    return tuple(out)


def from_dict(d: dict, base_dir=".") -> RunConfig:
    sections = {"run", "data", "baseline", "train", "validate", "synth"}
    unknown = sorted(set(d) - sections)
    if unknown:
        raise InvalidInput(f"unknown section(s) or key(s): {', '.join(unknown)}")
    run = d.get("run", {})
    run_known = {"seed", "out_dir", "threads"}
    if not isinstance(run, dict) or set(run) - run_known:
        raise InvalidInput(f"unknown key(s) in [run]: {', '.join(sorted(set(run) - run_known))}")
    kw = {k: _coerce("run", k, run[k], getattr(RunConfig, k)) for k in run}
    if "data" in d:
        kw["data"] = _build(DataConfig, "data", d["data"])
    if "baseline" in d:
        b = dict(d["baseline"])
        slices = _slice_specs(b.pop("slices", []))
        kw["baseline"] = replace(_build(BaselineConfig, "baseline", b, skip=("slices",)), slices=slices)
    if "train" in d:
        kw["train"] = _build(TrainConfig, "train", d["train"], skip=("seed",))
    if "validate" in d:
        kw["validate"] = _build(ValidateConfig, "validate", d["validate"])
    if "synth" in d:
        kw["synth"] = _build(SynthConfig, "synth", d["synth"], skip=("seed",))
    return RunConfig(base_dir=str(base_dir), **kw)


def loads(text: str, base_dir=".") -> RunConfig:
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise InvalidInput(f"config is not valid TOML: {e}") from e
    return from_dict(d, base_dir)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise FileNotFoundError(f"config file not found: {path}") from e
    try:
        return loads(text, path.parent)
    except InvalidInput as e:
        raise InvalidInput(f"{path}: {e}") from e


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {v!r} as TOML")  # pragma: no cover


def _section(name, obj, skip=()):
    lines = [f"[{name}]"]
    for f in fields(obj):
        if f.name in skip:
            continue
        value = getattr(obj, f.name)
        if value is None:
            lines.append(f"# {f.name} is unset (default)")
        else:
            lines.append(f"{f.name} = {_toml_value(value)}")
    return lines


def dumps(cfg: RunConfig) -> str:
    """TOML text that :func:`loads` parses back to an equal configuration."""
    lines = ["[run]", f"seed = {cfg.seed}", f"out_dir = {_toml_value(cfg.out_dir)}", f"threads = {cfg.threads}", ""]
    lines += _section("data", cfg.data) + [""]
    lines += _section("baseline", cfg.baseline, skip=("slices",)) + [""]
    for s in cfg.baseline.slices:
        lines += ["[[baseline.slices]]", f"path = {_toml_value(s.path)}", f"age_bp = {s.age_bp!r}",
                  f"simulation_id = {_toml_value(s.simulation_id)}", ""]
    lines += _section("train", cfg.train, skip=("seed",)) + [""]
    lines += _section("validate", cfg.validate) + [""]
    lines += _section("synth", cfg.synth, skip=("seed",))
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, seed: Optional[int] = None, out_dir: Optional[str] = None,
                   threads: Optional[int] = None, **train) -> RunConfig:
    """Apply command-line overrides; ``out_dir`` given here is taken relative to the working directory."""
    kw = {}
    if seed is not None:
        kw["seed"] = seed
        kw["train"] = replace(cfg.train, seed=seed)
        kw["synth"] = replace(cfg.synth, seed=seed)
    if out_dir is not None:
        kw["out_dir"] = str(Path(out_dir).resolve())
    if threads is not None:
        kw["threads"] = threads
    train = {k: v for k, v in train.items() if v is not None}
    if train:
        kw["train"] = replace(kw.get("train", cfg.train), **train)
    return replace(cfg, **kw)

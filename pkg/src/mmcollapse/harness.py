"""Experiment registry, cached training runs, result bundles and emission.

A bundle holds, per experiment, one table per series: raw per-seed rows and
an aggregate (mean and sample std across seeds, grouped by the series' key
columns). Emission writes ``<id>/<series>.csv``, ``<id>/<series>_by_seed.csv``,
``<id>/bundle.json`` and ``<id>/provenance.json``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from mmcollapse import __version__
from mmcollapse.errors import ConfigurationError, StateError, UsageError
from mmcollapse.fusionmodel import (FusionModel, ModelConfig, attach_ebr, build_model)
from mmcollapse.neurocore import RandomStream
from mmcollapse.synthgen import MultimodalDataset, desk_dataset
from mmcollapse.trainers import TrainConfig, TrainTrace, checkpoint, restore, train

BUNDLE_VERSION = 1
SNAPSHOT_EVERY = 50


def code_version() -> str:
    """Package version plus a digest of the numeric modules' sources."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for name in ("neurocore", "synthgen", "fusionmodel", "trainers", "diagnostics",
                 "substitution", "probes", "experiments"):
        h.update((root / f"{name}.py").read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=_jsonable).encode()).hexdigest()


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not serialisable: {type(o)}")


# --- cached training runs ---------------------------------------------------

@dataclass
class TrainedRun:
    model: FusionModel
    trace: TrainTrace
    snapshots: dict  # epoch -> FusionModel
    train: MultimodalDataset
    test: MultimodalDataset


def snapshot_epochs(epochs: int) -> list[int]:
    marks = {e for e in range(epochs) if (e + 1) % SNAPSHOT_EVERY == 0}
    if epochs > 0:
        marks.add(epochs - 1)
    return sorted(marks)


class Workbench:
    """Dataset and training-run cache shared by experiments.

    Runs are keyed by a hash of everything that determines them; with a
    ``cache_dir`` they persist as checkpoints.
    """

    def __init__(self, cache_dir=None):
        self.cache_dir = None if cache_dir is None else Path(cache_dir)
        self._data: dict = {}
        self._runs: dict = {}
        self._version = code_version()
        self.trained_count = 0

    def dataset(self, m: int, seed: int, n_train: int = 4000, n_test: int = 1000,
                keep=None):
        key = (m, seed, n_train, n_test)
        if key not in self._data:
            self._data[key] = desk_dataset(m, seed, n_train, n_test)
        tr, te = self._data[key]
        if keep is not None:
            tr, te = restrict(tr, keep), restrict(te, keep)
        return tr, te

    def run(self, m: int, seed: int, cfg: TrainConfig, n_train: int = 4000,
            n_test: int = 1000, keep=None, model_cfg: dict | None = None) -> TrainedRun:
        """Train (or fetch) one model. ``keep`` restricts the dataset to a
        subset of modalities; each kept encoder starts from the initial
        weights it would have in the full ``m``-modality model."""
        keep = None if keep is None else tuple(int(k) for k in keep)
        model_cfg = dict(model_cfg or {})
        ident = {"m": m, "seed": seed, "n_train": n_train, "n_test": n_test, "keep": keep,
                 "model": model_cfg, "train": cfg.to_dict(), "code": self._version,
                 "snapshots": snapshot_epochs(cfg.epochs)}
        key = config_hash(ident)
        if key in self._runs:
            return self._runs[key]
        tr, te = self.dataset(m, seed, n_train, n_test, keep)
        paths = self._paths(key, cfg.epochs)
        if paths and all(p.exists() for p in paths.values()):
            model, trace = restore(paths["final"])
            snaps = {e: restore(paths[e])[0] for e in paths if e != "final"}
        else:
            model = initial_model(tr, seed, cfg.mode, keep, model_cfg)
            snaps = {}
            marks = set(snapshot_epochs(cfg.epochs))

            def grab(epoch, current):
                if epoch in marks:
                    snaps[epoch] = current.copy()

            model, trace = train(model, tr, cfg, callback=grab)
            self.trained_count += 1
            if paths:
                checkpoint(model, trace, paths["final"])
                for e, snap in snaps.items():
                    checkpoint(snap, TrainTrace(), paths[e])
        result = TrainedRun(model, trace, snaps, tr, te)
        self._runs[key] = result
        return result

    def _paths(self, key, epochs):
        if self.cache_dir is None:
            return None
        d = self.cache_dir / "runs"
        d.mkdir(parents=True, exist_ok=True)
        out = {"final": d / f"{key}.ckpt"}
        for e in snapshot_epochs(epochs):
            out[e] = d / f"{key}.e{e}.ckpt"
        return out


def restrict(ds: MultimodalDataset, keep) -> MultimodalDataset:
    keep = list(keep)
    return replace(ds, modalities=[ds.modalities[i] for i in keep],
                   ledger=None if ds.ledger is None else
                   [[replace(f, modality=k) for f in ds.ledger[i]] for k, i in enumerate(keep)],
                   strengths=None if ds.strengths is None else tuple(ds.strengths[i] for i in keep))


def initial_model(ds: MultimodalDataset, seed: int, mode: str, keep=None,
                  model_cfg: dict | None = None) -> FusionModel:
    cfg = ModelConfig(tuple(x.shape[1] for x in ds.modalities), ds.num_classes,
                      **(model_cfg or {}))
    model = build_model(cfg, RandomStream(seed).child("model"), encoder_ids=keep)
    if mode == "ebr":
        model = attach_ebr(model, cfg, RandomStream(seed).child("ebr"))
    return model


# --- specs and bundles --------------------------------------------------------

@dataclass(frozen=True)
class SeriesSpec:
    keys: tuple[str, ...]
    values: tuple[str, ...]


@dataclass
class Experiment:
    id: str
    description: str
    defaults: dict
    series: dict  # name -> SeriesSpec
    fn: Callable  # fn(bench, seed, params) -> {series: [row dict]}


REGISTRY: dict[str, Experiment] = {}


def register(exp: Experiment) -> Experiment:
    if exp.id in REGISTRY:
        raise ConfigurationError(f"experiment {exp.id!r} registered twice")
    REGISTRY[exp.id] = exp
    return exp


def registry() -> dict[str, Experiment]:
    from mmcollapse import experiments  # noqa: F401  (populates the registry)
    return REGISTRY


@dataclass(frozen=True)
class ExperimentSpec:
    id: str
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    overrides: tuple = ()

    def __post_init__(self):
        if self.id not in registry():
            raise UsageError(f"unknown experiment {self.id!r}; see `list`")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise UsageError("at least one seed is required")
        object.__setattr__(self, "seeds", seeds)
        ov = self.overrides
        if isinstance(ov, dict):
            ov = tuple(sorted(ov.items()))
        object.__setattr__(self, "overrides", tuple((k, _freeze(v)) for k, v in ov))
        unknown = set(dict(self.overrides)) - set(registry()[self.id].defaults)
        if unknown:
            raise UsageError(f"{self.id} has no parameter(s) {sorted(unknown)}")

    def params(self) -> dict:
        p = dict(registry()[self.id].defaults)
        p.update(dict(self.overrides))
        return p

    def hash(self) -> str:
        return config_hash({"id": self.id, "seeds": self.seeds, "params": self.params(),
                            "code": code_version()})


def _freeze(v):
    if isinstance(v, list):
        return tuple(_freeze(x) for x in v)
    return v


@dataclass
class ResultBundle:
    experiment: str
    seeds: list[int]
    params: dict
    raw: dict  # series -> list of rows (each with a "seed" entry)
    aggregate: dict  # series -> list of rows
    provenance: dict
    complete: bool = True
    errors: list = field(default_factory=list)

    def columns(self, series: str, by_seed: bool = False) -> list[str]:
        spec = registry()[self.experiment].series[series]
        if by_seed:
            return ["seed", *spec.keys, *spec.values]
        out = list(spec.keys)
        for v in spec.values:
            out += [f"{v}_mean", f"{v}_std"]
        return out + ["n_seeds"]

    def table(self, series: str, by_seed: bool = False) -> list[list]:
        cols = self.columns(series, by_seed)
        rows = self.raw[series] if by_seed else self.aggregate[series]
        return [[r.get(c) for c in cols] for r in rows]

    def to_dict(self) -> dict:
        series = {}
        for name in registry()[self.experiment].series:
            for by_seed, label in ((False, name), (True, f"{name}_by_seed")):
                series[label] = {"columns": self.columns(name, by_seed),
                                 "rows": [[_num(v) for v in row]
                                          for row in self.table(name, by_seed)]}
        return {"version": BUNDLE_VERSION, "experiment": self.experiment,
                "seeds": self.seeds, "params": self.params, "complete": self.complete,
                "errors": self.errors, "provenance": self.provenance, "series": series}

    @classmethod
    def from_dict(cls, d: dict) -> "ResultBundle":
        if d.get("version") != BUNDLE_VERSION:
            raise ConfigurationError(f"bundle version {d.get('version')} unsupported")
        raw, agg = {}, {}
        for label, table in d["series"].items():
            rows = [dict(zip(table["columns"], row)) for row in table["rows"]]
            if label.endswith("_by_seed"):
                raw[label[:-len("_by_seed")]] = rows
            else:
                agg[label] = rows
        return cls(d["experiment"], d["seeds"], d["params"], raw, agg, d["provenance"],
                   d["complete"], d["errors"])

    def series_mean(self, series: str, value: str, **keys) -> float:
        """Aggregate mean of ``value`` on the row matching ``keys``."""
        for row in self.aggregate[series]:
            if all(_same(row.get(k), v) for k, v in keys.items()):
                return row[f"{value}_mean"]
        raise KeyError(f"no row {keys} in {self.experiment}/{series}")

    def by_seed(self, series: str, value: str, **keys) -> dict:
        return {r["seed"]: r[value] for r in self.raw[series]
                if all(_same(r.get(k), v) for k, v in keys.items())}


def _same(a, b):
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return float(a) == float(b)
    return a == b


def _num(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, float) and not math.isfinite(v):
        raise StateError("non-finite value in a result series")
    return v


def aggregate_rows(rows: list[dict], spec: SeriesSpec) -> list[dict]:
    """Group rows by key columns (first-seen order) and average values."""
    groups: dict = {}
    for r in rows:
        k = tuple(r[c] for c in spec.keys)
        groups.setdefault(k, []).append(r)
    out = []
    for k, members in groups.items():
        row = dict(zip(spec.keys, k))
        for v in spec.values:
            vals = [m[v] for m in members if m.get(v) is not None]
            if vals:
                arr = np.asarray(vals, dtype=np.float64)
                row[f"{v}_mean"] = float(arr.mean())
                row[f"{v}_std"] = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
            else:
                row[f"{v}_mean"] = row[f"{v}_std"] = None
        row["n_seeds"] = len(members)
        out.append(row)
    return out


def run(spec: ExperimentSpec, bench: Workbench | None = None, cache_dir=None) -> ResultBundle:
    """Run an experiment over its seeds. A bundle cached under the same
    spec hash is returned as is; a failing seed yields an incomplete bundle."""
    exp = registry()[spec.id]
    cache_dir = Path(cache_dir) if cache_dir is not None else None
    if bench is None:
        bench = Workbench(cache_dir)
    h = spec.hash()
    cached = None
    if cache_dir is not None:
        cached = cache_dir / "bundles" / f"{spec.id}-{h[:16]}.json"
        if cached.exists():
            return ResultBundle.from_dict(json.loads(cached.read_text()))
    params = spec.params()
    raw = {name: [] for name in exp.series}
    errors = []
    for seed in spec.seeds:
        try:
            out = exp.fn(bench, seed, params)
        except Exception as exc:  # keep what finished; flag the bundle
            errors.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            break
        for name, rows in out.items():
            for r in rows:
                raw[name].append({"seed": seed, **r})
    agg = {name: aggregate_rows(raw[name], exp.series[name]) for name in exp.series}
    prov = {"experiment": spec.id, "config_hash": h, "seeds": list(spec.seeds),
            "params": _plain(params), "code_version": code_version()}
    bundle = ResultBundle(spec.id, list(spec.seeds), _plain(params), raw, agg, prov,
                          complete=not errors, errors=errors)
    # normalise through JSON so fresh and cached bundles are identical
    bundle = ResultBundle.from_dict(json.loads(json.dumps(bundle.to_dict())))
    if cached is not None and bundle.complete:
        cached.parent.mkdir(parents=True, exist_ok=True)
        cached.write_text(json.dumps(bundle.to_dict(), sort_keys=True))
    return bundle


def _plain(obj):
    return json.loads(json.dumps(obj, default=_jsonable))


# --- emission -----------------------------------------------------------------

def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def parse_cell(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def csv_text(bundle: ResultBundle, series: str, by_seed: bool = False) -> str:
    buf = io.StringIO()
    buf.write(f"# experiment={bundle.experiment}\n")
    buf.write(f"# config_hash={bundle.provenance['config_hash']}\n")
    buf.write(f"# seeds={','.join(map(str, bundle.seeds))}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(bundle.columns(series, by_seed))
    for row in bundle.table(series, by_seed):
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def read_csv_series(path) -> tuple[list[str], list[list]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], [[parse_cell(c) for c in r] for r in rows[1:]]


def emit(bundle: ResultBundle, out_dir, formats=("csv", "json")) -> list[Path]:
    """Write the bundle's series and metadata under ``out_dir/<id>/``."""
    if not bundle.complete:
        raise StateError(f"refusing to emit incomplete bundle for {bundle.experiment}: "
                         f"{bundle.errors}")
    unknown = set(formats) - {"csv", "json"}
    if unknown:
        raise UsageError(f"unknown output format(s) {sorted(unknown)}")
    d = Path(out_dir) / bundle.experiment
    d.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        for name in registry()[bundle.experiment].series:
            for by_seed, label in ((False, name), (True, f"{name}_by_seed")):
                p = d / f"{label}.csv"
                p.write_text(csv_text(bundle, name, by_seed))
                written.append(p)
    if "json" in formats:
        p = d / "bundle.json"
        p.write_text(json.dumps(bundle.to_dict(), sort_keys=True, indent=1) + "\n")
        written.append(p)
    p = d / "provenance.json"
    p.write_text(json.dumps(bundle.provenance, sort_keys=True, indent=1) + "\n")
    written.append(p)
    return written


def write_partial(bundle: ResultBundle, out_dir) -> Path:
    d = Path(out_dir) / bundle.experiment
    d.mkdir(parents=True, exist_ok=True)
    p = d / "bundle.partial.json"
    p.write_text(json.dumps(bundle.to_dict(), sort_keys=True, indent=1) + "\n")
    return p


# --- flat config files ------------------------------------------------------------

def parse_config(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys use underscores."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{lineno}: empty key")
        key = key.replace("-", "_")
        if key in out:
            raise UsageError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def parse_value(value: str):
    if "," in value:
        return tuple(parse_value(v.strip()) for v in value.split(",") if v.strip())
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def load_config(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {p}: {exc}") from None
    return parse_config(text, str(p))

"""Synthetic multimodal data with a ground-truth feature ledger.

Every latent has a role. Predictive latents carry a class-dependent mean,
noisy latents do not, and conjugate pairs are built so that their sum is
label-free (``z_eps = u - z_y``). Each modality observes a subset of the
latents through a mixing matrix with unit-norm rows, and the ledger records
the observation-space direction of every latent a modality sees.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mmcollapse.errors import ConfigurationError, IngestionError, InputError
from mmcollapse.neurocore import RandomStream

ROLES = ("predictive", "noisy", "conjugate_predictive", "conjugate_noisy")
PREDICTIVE_ROLES = ("predictive", "conjugate_predictive")


@dataclass(frozen=True)
class LatentSpec:
    num_classes: int
    roles: tuple[str, ...]
    pairs: tuple[tuple[int, int], ...] = ()
    separation: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(self.roles))
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")
        bad = [r for r in self.roles if r not in ROLES]
        if bad:
            raise ConfigurationError(f"unknown latent roles {bad}")
        seen = set()
        for zy, ze in self.pairs:
            if self.roles[zy] != "conjugate_predictive" or self.roles[ze] != "conjugate_noisy":
                raise ConfigurationError(f"pair ({zy}, {ze}) is not a (z_y, z_eps) couple")
            if zy in seen or ze in seen:
                raise ConfigurationError("conjugate latents must be paired one-to-one")
            seen.update((zy, ze))
        unpaired = [k for k, r in enumerate(self.roles) if r.startswith("conjugate") and k not in seen]
        if unpaired:
            raise ConfigurationError(f"conjugate latents without a partner: {unpaired}")
        if not any(r in PREDICTIVE_ROLES for r in self.roles):
            raise ConfigurationError("at least one predictive latent is required")

    @property
    def latent_dim(self) -> int:
        return len(self.roles)


@dataclass(frozen=True)
class ModalitySpec:
    modality_id: int
    mixing: np.ndarray
    latent_subset: tuple[int, ...]
    strength: float
    noise_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "latent_subset", tuple(int(k) for k in self.latent_subset))
        mixing = np.asarray(self.mixing, dtype=np.float64)
        object.__setattr__(self, "mixing", mixing)
        if not np.allclose(np.linalg.norm(mixing, axis=1), 1.0, atol=1e-10):
            raise ConfigurationError("mixing rows must be unit-norm")
        if not 0.0 <= self.strength <= 1.0 or not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigurationError("strength and noise_rate must lie in [0, 1]")

    @property
    def obs_dim(self) -> int:
        return self.mixing.shape[0]


@dataclass(frozen=True)
class Feature:
    """One ledger entry: a latent as seen by one modality."""
    modality: int
    latent: int
    role: str
    direction: np.ndarray

    @property
    def predictive(self) -> bool:
        return self.role in PREDICTIVE_ROLES


@dataclass
class MultimodalDataset:
    modalities: list[np.ndarray]
    labels: np.ndarray
    num_classes: int
    ledger: list[list[Feature]] | None = None
    latents: np.ndarray | None = None
    strengths: tuple[float, ...] | None = None
    pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        self.modalities = [np.asarray(x, dtype=np.float64) for x in self.modalities]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        counts = {x.shape[0] for x in self.modalities} | {self.labels.shape[0]}
        if len(counts) != 1:
            raise InputError(f"modalities disagree on sample count: {sorted(counts)}")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def m(self) -> int:
        return len(self.modalities)

    @property
    def has_ledger(self) -> bool:
        return self.ledger is not None

    def subset(self, idx) -> "MultimodalDataset":
        idx = np.asarray(idx)
        return replace(self,
                       modalities=[x[idx] for x in self.modalities],
                       labels=self.labels[idx],
                       latents=None if self.latents is None else self.latents[idx])

    def features(self, role=None) -> list[Feature]:
        if self.ledger is None:
            return []
        out = [f for feats in self.ledger for f in feats]
        if role == "predictive":
            return [f for f in out if f.predictive]
        if role == "noisy":
            return [f for f in out if not f.predictive]
        return out

    def strength_order(self) -> list[int]:
        """Modality indices from weakest to strongest (ties: lower index first)."""
        if self.strengths is None:
            return unimodal_probe_order(self)
        return sorted(range(self.m), key=lambda i: (self.strengths[i], i))


def make_modality(spec: LatentSpec, modality_id: int, subset, obs_dim: int,
                  stream: RandomStream, noise_rate: float = 0.0) -> ModalitySpec:
    """Random mixing restricted to ``subset``, rows normalised to unit norm."""
    subset = tuple(sorted(int(k) for k in subset))
    if not subset or max(subset) >= spec.latent_dim or min(subset) < 0:
        raise ConfigurationError(f"latent subset {subset} out of range")
    mixing = np.zeros((obs_dim, spec.latent_dim))
    mixing[:, subset] = stream.normal(size=(obs_dim, len(subset)))
    mixing /= np.linalg.norm(mixing, axis=1, keepdims=True)
    strength = sum(spec.roles[k] in PREDICTIVE_ROLES for k in subset) / len(subset)
    return ModalitySpec(modality_id, mixing, subset, strength, noise_rate)


def _class_means(spec: LatentSpec, stream: RandomStream) -> np.ndarray:
    # equal separation for every predictive latent: +-separation per class
    signs = np.where(stream.random((spec.latent_dim, spec.num_classes)) < 0.5, -1.0, 1.0)
    means = spec.separation * signs
    for k, role in enumerate(spec.roles):
        if role not in PREDICTIVE_ROLES:
            means[k] = 0.0
    return means


def generate(spec: LatentSpec, modalities: list[ModalitySpec], n: int,
             stream: RandomStream) -> MultimodalDataset:
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if not modalities:
        raise ConfigurationError("at least one modality is required")
    for i, mod in enumerate(modalities):
        if mod.mixing.shape[1] != spec.latent_dim:
            raise ConfigurationError(
                f"modality {i} mixing has {mod.mixing.shape[1]} latent columns, "
                f"spec has {spec.latent_dim}")
        if mod.modality_id != i:
            raise ConfigurationError("modality ids must be 0..m-1 in order")
    means = _class_means(spec, stream.child("means"))
    labels = stream.child("labels").integers(0, spec.num_classes, size=n)
    z = stream.child("latents").normal(size=(n, spec.latent_dim))
    z += means[:, labels].T
    u = stream.child("conjugate").normal(size=(n, len(spec.pairs)))
    for p, (zy, ze) in enumerate(spec.pairs):
        z[:, ze] = u[:, p] - z[:, zy]
    xs = [z @ mod.mixing.T for mod in modalities]
    ledger = []
    for i, mod in enumerate(modalities):
        feats = []
        for k in mod.latent_subset:
            col = mod.mixing[:, k]
            feats.append(Feature(i, k, spec.roles[k], col / np.linalg.norm(col)))
        ledger.append(feats)
    return MultimodalDataset(xs, labels, spec.num_classes, ledger, z,
                             tuple(mod.strength for mod in modalities), spec.pairs)


def desk_problem(m: int, stream: RandomStream, obs_dim: int = 32,
                 num_classes: int = 4, separation: float = 1.0):
    """Default desk-scale problem with ``m`` modalities, weakest first.

    24 latents: 10 predictive, 8 noisy and 3 conjugate pairs. Modality 0
    observes two private predictive latents, every conjugate pair and all
    eight noisy latents (16 latents for a 16-wide encoding, strength 5/16).
    The others each observe four predictive latents, overlapping their
    neighbours, plus one noisy latent.
    """
    if not 1 <= m <= 5:
        raise ConfigurationError("desk problems support 1..5 modalities")
    roles = (["predictive"] * 10 + ["noisy"] * 8
             + ["conjugate_predictive", "conjugate_noisy"] * 3)
    pairs = tuple((18 + 2 * p, 19 + 2 * p) for p in range(3))
    spec = LatentSpec(num_classes, roles, pairs, separation)
    subsets = [[0, 1, 18, 19, 20, 21, 22, 23] + list(range(10, 18))]
    strong = [[2, 3, 4, 5, 16], [4, 5, 6, 7, 17], [6, 7, 8, 9, 10], [8, 9, 2, 3, 11]]
    subsets += strong[: m - 1]
    mods = [make_modality(spec, i, s, obs_dim, stream.child(f"mixing{i}"))
            for i, s in enumerate(subsets)]
    return spec, mods


def desk_dataset(m: int, seed: int, n_train: int = 4000, n_test: int = 1000, **kw):
    stream = RandomStream(seed).child("data")
    spec, mods = desk_problem(m, stream.child("problem"), **kw)
    ds = generate(spec, mods, n_train + n_test, stream.child("samples"))
    return ds.subset(np.arange(n_train)), ds.subset(np.arange(n_train, n_train + n_test))


def inject_noise(ds: MultimodalDataset, modality: int, noise_rate: float,
                 stream: RandomStream, amplitude: float = 1.0) -> MultimodalDataset:
    """Additive uniform noise on ``floor(noise_rate * obs_dim)`` coordinates per sample.

    The noise on coordinate j is ``U(-a_j, a_j)`` with ``a_j`` equal to
    ``amplitude`` times that coordinate's empirical std.
    """
    if not 0 <= modality < ds.m:
        raise InputError(f"modality {modality} out of range for {ds.m} modalities")
    if not 0.0 <= noise_rate <= 0.5:
        raise InputError("noise_rate must lie in [0, 0.5]")
    x = ds.modalities[modality]
    n, d = x.shape
    k = int(math.floor(noise_rate * d))
    if k == 0:
        return ds
    scale = amplitude * x.std(axis=0)
    keys = stream.random((n, d))
    chosen = np.argsort(keys, axis=1, kind="stable")[:, :k]
    noise = np.zeros_like(x)
    rows = np.arange(n)[:, None]
    noise[rows, chosen] = stream.uniform(-1.0, 1.0, size=(n, k)) * scale[chosen]
    xs = list(ds.modalities)
    xs[modality] = x + noise
    return replace(ds, modalities=xs)


@dataclass
class MissingnessMask:
    present: np.ndarray
    rate: float

    @property
    def absent(self) -> np.ndarray:
        return ~self.present


def _bernoulli_rate_for(rate: float, m: int) -> float:
    """Per-cell absence probability q such that, after discarding fully-absent
    rows, the marginal absence frequency equals ``rate``."""
    if rate <= 0.0 or m == 1:
        return 0.0

    def marginal(q):
        return (q - q ** m) / (1.0 - q ** m)

    lo, hi = 0.0, 1.0 - 1e-12
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if marginal(mid) < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def max_missingness_rate(m: int) -> float:
    return (m - 1) / m


def sample_mask(n: int, m: int, rate: float, stream: RandomStream) -> MissingnessMask:
    """Bernoulli absence per (sample, modality), never dropping every modality.

    The per-cell probability is calibrated so the marginal absence frequency
    matches ``rate``. Rates above ``(m-1)/m`` cannot be met without fully
    absent rows; they are clamped with a warning.
    """
    if not 0.0 <= rate < 1.0:
        raise InputError("rate must lie in [0, 1)")
    if rate == 0.0 or m == 1:
        return MissingnessMask(np.ones((n, m), dtype=bool), rate)
    limit = max_missingness_rate(m)
    if rate >= limit:
        warnings.warn(f"missingness rate {rate} unattainable with {m} modalities; "
                      f"clamped to {limit:.3f}", RuntimeWarning, stacklevel=2)
        present = np.zeros((n, m), dtype=bool)
        present[np.arange(n), stream.integers(0, m, size=n)] = True
        return MissingnessMask(present, rate)
    q = _bernoulli_rate_for(rate, m)
    absent = stream.random((n, m)) < q
    bad = absent.all(axis=1)
    while bad.any():
        absent[bad] = stream.random((int(bad.sum()), m)) < q
        bad = absent.all(axis=1)
    return MissingnessMask(~absent, rate)


def save_csv(ds: MultimodalDataset, directory, label_column: str = "label") -> list[Path]:
    """One CSV per modality, label column appended, 17 significant digits."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, x in enumerate(ds.modalities):
        path = directory / f"modality_{i}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j}" for j in range(x.shape[1])] + [label_column])
            for row, y in zip(x, ds.labels):
                w.writerow([repr(float(v)) for v in row] + [int(y)])
        paths.append(path)
    return paths


def _read_numeric_csv(path: Path, label_column: str):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header = rows[0]
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise IngestionError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        try:
            data.append([float(c) for c in row])
        except ValueError as exc:
            raise IngestionError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    arr = np.asarray(data, dtype=np.float64).reshape(len(data), len(header))
    if not np.all(np.isfinite(arr)):
        raise IngestionError(f"{path}: non-finite values")
    labels = None
    if label_column in header:
        j = header.index(label_column)
        labels = arr[:, j]
        arr = np.delete(arr, j, axis=1)
    return arr, labels


def load_csv(paths, label_column: str = "label") -> MultimodalDataset:
    """Row-aligned CSVs, one per modality. The ledger is left unknown."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise IngestionError("no files given")
    xs, labels = [], None
    for path in paths:
        x, y = _read_numeric_csv(path, label_column)
        if xs and x.shape[0] != xs[0].shape[0]:
            raise IngestionError(
                f"row count mismatch: {paths[0]} has {xs[0].shape[0]} rows, "
                f"{path} has {x.shape[0]}")
        if y is not None:
            if labels is not None and not np.array_equal(labels, y):
                raise IngestionError(f"{path}: label column disagrees with earlier files")
            labels = y
        xs.append(x)
    if labels is None:
        raise IngestionError(f"no file has a {label_column!r} column")
    if np.any(labels != np.round(labels)) or labels.min() < 0:
        raise IngestionError("labels must be non-negative integers")
    labels = labels.astype(np.int64)
    return MultimodalDataset(xs, labels, int(labels.max()) + 1, ledger=None)


def linear_probe_accuracy(x, y, num_classes, stream=None, train_frac=0.7, l2=1e-3):
    """Held-out accuracy of a multinomial logistic-regression probe."""
    from mmcollapse.probes import fit_logistic, logistic_predict
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    cut = int(train_frac * n)
    model = fit_logistic(x[:cut], y[:cut], num_classes, l2=l2)
    return float(np.mean(logistic_predict(model, x[cut:]) == y[cut:]))


def unimodal_probe_order(ds: MultimodalDataset) -> list[int]:
    accs = [linear_probe_accuracy(x, ds.labels, ds.num_classes) for x in ds.modalities]
    return sorted(range(ds.m), key=lambda i: (accs[i], i))

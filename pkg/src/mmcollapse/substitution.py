"""Test-time handling of missing modalities.

Encodings are what the fusion head consumes (``hinv_i(h_i(f_i(x_i)))`` for an
EBR model). A policy fills the encoding of every absent modality and never
touches the present ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import roc_auc_score

from mmcollapse.errors import ConfigurationError, InputError, StateError
from mmcollapse.fusionmodel import (FusionModel, decode_latent, ebr_latent, encode,
                                    fuse_predict)
from mmcollapse.neurocore import RandomStream, softmax
from mmcollapse.synthgen import MultimodalDataset, sample_mask

POLICIES = ("ebr_ranked", "zeros", "random", "nearest_rep", "train_average",
            "late_fusion_drop")
TABLE_RATES = (0.1, 0.2, 0.3, 0.4, 0.7)


@dataclass
class ModalityRanking:
    reference: int
    order: list[int]  # candidates, most similar first; reference excluded
    similarity: np.ndarray  # per modality; reference is 1

    def __post_init__(self):
        sims = [self.similarity[i] for i in self.order]
        if any(a < b for a, b in zip(sims, sims[1:])):
            raise ConfigurationError("ranking order disagrees with similarity values")

    def nearest_available(self, i: int, present) -> int | None:
        """Available modality whose similarity is closest to that of ``i``;
        ties go to the higher similarity, then the lower index."""
        best = None
        for j in range(len(self.similarity)):
            if j == i or not present[j]:
                continue
            key = (abs(self.similarity[j] - self.similarity[i]), -self.similarity[j], j)
            if best is None or key < best[0]:
                best = (key, j)
        return None if best is None else best[1]


def _mean_cosine(a, b) -> float:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 1e-12) & (nb > 1e-12)
    if not ok.any():
        return 0.0
    return float(np.mean(np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])))


def rank_modalities(model: FusionModel, ds: MultimodalDataset,
                    reference: int | None = None) -> ModalityRanking:
    """Rank modalities by mean cosine between ``g_i(x)`` and ``g_ref(x)``."""
    if model.ebr is None:
        raise StateError("ranking needs an EBR-trained model")
    if reference is None:
        reference = ds.strength_order()[-1]
    if not 0 <= reference < model.m:
        raise ConfigurationError(f"reference {reference} out of range")
    g_ref = ebr_latent(model, ds.modalities, reference)
    sims = np.array([1.0 if i == reference else
                     _mean_cosine(ebr_latent(model, ds.modalities, i), g_ref)
                     for i in range(model.m)])
    order = sorted((i for i in range(model.m) if i != reference), key=lambda i: (-sims[i], i))
    return ModalityRanking(reference, order, sims)


@dataclass
class SubstitutionPolicy:
    kind: str
    class_conditional: bool = False
    seed: int = 0
    # fitted on training data by ``fit_policy``
    means: list | None = None
    class_means: list | None = None

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ConfigurationError(f"unknown policy {self.kind!r}; expected one of {POLICIES}")


def fit_policy(policy: SubstitutionPolicy, model: FusionModel,
               ds_train: MultimodalDataset) -> SubstitutionPolicy:
    """Store the training-set statistics used by the averaging policies."""
    codes = encode(model, ds_train.modalities)
    policy.means = [c.mean(axis=0) for c in codes]
    policy.class_means = [np.array([c[ds_train.labels == k].mean(axis=0)
                                    if np.any(ds_train.labels == k) else c.mean(axis=0)
                                    for k in range(ds_train.num_classes)])
                          for c in codes]
    return policy


def _need_stats(policy):
    if policy.means is None:
        raise StateError(f"policy {policy.kind!r} must be fitted on training data first")


def substitute(model: FusionModel, batch, mask, ranking: ModalityRanking | None,
               policy: SubstitutionPolicy) -> list[np.ndarray]:
    """Per-modality encodings with absent slots filled according to ``policy``.

    ``mask`` is a boolean (n, m) array of present modalities.
    """
    present = np.asarray(getattr(mask, "present", mask), dtype=bool)
    codes = encode(model, batch)
    n = codes[0].shape[0]
    if present.shape != (n, model.m):
        raise InputError(f"mask shape {present.shape} != {(n, model.m)}")
    if not present.any(axis=1).all():
        raise InputError("every sample needs at least one present modality")
    out = [c.copy() for c in codes]
    absent = ~present
    if not absent.any():
        return out
    kind = policy.kind
    if kind == "zeros":
        for i in range(model.m):
            out[i][absent[:, i]] = 0.0
    elif kind == "random":
        stream = RandomStream(policy.seed).child("substitute-random")
        for i in range(model.m):
            rows = absent[:, i]
            out[i][rows] = stream.normal(size=(int(rows.sum()), out[i].shape[1]))
    elif kind == "train_average":
        _need_stats(policy)
        for i in range(model.m):
            out[i][absent[:, i]] = policy.means[i]
        if policy.class_conditional:
            _, logits = fuse_predict(model, batch, encodings=out)
            pred = np.argmax(logits, axis=1)
            for i in range(model.m):
                rows = absent[:, i]
                out[i][rows] = policy.class_means[i][pred[rows]]
    elif kind == "nearest_rep":
        _need_stats(policy)
        for i in range(model.m):
            mu = policy.means[i]
            scores = np.full((n, model.m), -np.inf)
            for j in range(model.m):
                if j == i or codes[j].shape[1] != mu.shape[0]:
                    continue
                num = codes[j] @ mu
                den = np.linalg.norm(codes[j], axis=1) * np.linalg.norm(mu)
                scores[:, j] = np.where(den > 1e-12, num / np.maximum(den, 1e-300), 0.0)
            scores[~present] = -np.inf
            pick = np.argmax(scores, axis=1)
            for r in np.flatnonzero(absent[:, i]):
                j = pick[r]
                out[i][r] = codes[j][r] if np.isfinite(scores[r, j]) else 0.0
    elif kind == "late_fusion_drop":
        # zero the absent blocks and rescale the rest to keep the total mass
        scale = model.m / present.sum(axis=1)
        for i in range(model.m):
            out[i] = np.where(present[:, [i]], codes[i] * scale[:, None], 0.0)
    elif kind == "ebr_ranked":
        if model.ebr is None or ranking is None:
            raise StateError("ebr_ranked needs an EBR model and a ranking")
        latents = {}
        for i in range(model.m):
            for r in np.flatnonzero(absent[:, i]):
                j = ranking.nearest_available(i, present[r])
                if j not in latents:
                    latents[j] = ebr_latent(model, batch, j)
                out[i][r] = decode_latent(model, latents[j][r:r + 1], i)[0]
    return out


def macro_auc(labels, proba, num_classes: int) -> float:
    """Macro one-vs-rest AUC over classes present with both outcomes."""
    labels = np.asarray(labels)
    aucs = []
    for k in range(num_classes):
        pos = labels == k
        if pos.all() or not pos.any():
            continue
        aucs.append(roc_auc_score(pos, proba[:, k]))
    return float(np.mean(aucs)) if aucs else 0.5


@dataclass
class MissingnessResult:
    policy: str
    rates: list[float]
    accuracy: list[float]
    auc: list[float]
    accuracy_mean: float = field(init=False)
    accuracy_std: float = field(init=False)
    auc_mean: float = field(init=False)
    auc_std: float = field(init=False)

    def __post_init__(self):
        self.accuracy_mean, self.accuracy_std = aggregate(self.accuracy)
        self.auc_mean, self.auc_std = aggregate(self.auc)

    def rows(self) -> list[dict]:
        return [{"rate": r, "policy": self.policy, "accuracy": a, "auc": u}
                for r, a, u in zip(self.rates, self.accuracy, self.auc)]


def aggregate(values) -> tuple[float, float]:
    """Mean and sample std (ddof=1; 0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return 0.0, 0.0
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def evaluate_missingness(model: FusionModel, ds_test: MultimodalDataset, rates,
                         policy: SubstitutionPolicy, ranking: ModalityRanking | None = None,
                         seed: int = 0) -> MissingnessResult:
    """Masked-test accuracy and macro AUC per rate. The mask for a given rate
    depends only on ``seed`` and the rate, so policies see identical masks."""
    accs, aucs = [], []
    for rate in rates:
        if not 0.0 <= rate < 1.0:
            raise InputError(f"rate {rate} outside [0, 1)")
        stream = RandomStream(seed).child(f"mask{float(rate)!r}")
        mask = sample_mask(ds_test.n, ds_test.m, rate, stream)
        codes = substitute(model, ds_test.modalities, mask.present, ranking, policy)
        _, logits = fuse_predict(model, ds_test.modalities, encodings=codes)
        accs.append(float(np.mean(np.argmax(logits, axis=1) == ds_test.labels)))
        aucs.append(macro_auc(ds_test.labels, softmax(logits), ds_test.num_classes))
    return MissingnessResult(policy.kind, [float(r) for r in rates], accs, aucs)

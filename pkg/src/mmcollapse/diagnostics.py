"""Numerical diagnostics of a trained fusion model.

Layers are addressed as ``"<module>.<index>"`` (``"fusion.0"`` is the first
layer of the fusion head). Ledger features are pushed into a layer's input
space with Jacobian-vector products averaged over samples, so weight rows
and features can be compared by cosine.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from mmcollapse.errors import ConfigurationError, InputError, StateError
from mmcollapse.fusionmodel import FusionModel, backward_model, forward_cache
from mmcollapse.neurocore import (Mlp, RandomStream, backward, effective_rank,
                                  forward, he_uniform_mlp, sgd_step, SgdConfig,
                                  softmax_cross_entropy)
from mmcollapse.synthgen import MultimodalDataset

TAU_ENC = 0.5
REPORT_VERSION = 1
VIF_CAP = 1e6


# --- collision counting -----------------------------------------------------

def collision_bound(m: int, dims) -> float:
    """``m(m-1) min(dims)^2 / (sum dims)^2`` clamped to [0, 1]."""
    dims = list(dims)
    if not dims:
        raise InputError("dims must be non-empty")
    if m != len(dims):
        raise InputError(f"m={m} but {len(dims)} encoder dims given")
    total = float(sum(dims))
    if total <= 0:
        raise InputError("encoder dims must be positive")
    value = m * (m - 1) * float(min(dims)) ** 2 / total ** 2
    return min(1.0, max(0.0, value))


@dataclass
class LayerFeatures:
    """Ledger features pushed to a layer's input space.

    ``vectors`` keep the push-forward magnitude (how strongly the upstream
    network transmits a unit move along the feature); ``directions`` are
    the unit-norm versions.
    """
    layer: str
    vectors: np.ndarray  # (n_features, in_dim)
    modalities: np.ndarray
    predictive: np.ndarray  # bool
    latents: np.ndarray

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        self.modalities = np.asarray(self.modalities, dtype=np.int64)
        self.predictive = np.asarray(self.predictive, dtype=bool)
        self.latents = np.asarray(self.latents, dtype=np.int64)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def directions(self) -> np.ndarray:
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        return np.where(norms > 1e-12, self.vectors / np.maximum(norms, 1e-300), 0.0)


def _parse_layer(model: FusionModel, layer: str):
    try:
        name, k = layer.rsplit(".", 1)
        k = int(k)
        mlp = model.modules()[name]
        mlp.layers[k]
    except (ValueError, KeyError, IndexError):
        raise ConfigurationError(f"unknown layer {layer!r}") from None
    return name, k, mlp


def layer_weight(model: FusionModel, layer: str) -> np.ndarray:
    _, k, mlp = _parse_layer(model, layer)
    return mlp.layers[k].weight


def layer_inputs(model: FusionModel, ds: MultimodalDataset, layer: str) -> np.ndarray:
    name, k, _ = _parse_layer(model, layer)
    cache = forward_cache(model, ds.modalities)
    if name == "fusion":
        return cache.fusion[k]
    if name == "classifier":
        return cache.classifier[k]
    if name.startswith("enc"):
        return cache.enc[int(name[3:])][k]
    if name.startswith("hinv"):
        return cache.hinv[int(name[4:])][k]
    if name.startswith("h"):
        return cache.h[int(name[1:])][k]
    raise ConfigurationError(f"layer inputs not available for {layer!r}")


def _jvp(mlp: Mlp, acts, t, upto=None):
    """Push per-sample tangents ``t`` through the first ``upto`` layers."""
    upto = len(mlp.layers) if upto is None else upto
    for k in range(upto):
        layer = mlp.layers[k]
        t = t @ layer.weight.T
        if layer.activation == "relu":
            t = t * (acts[k + 1] > 0.0)
    return t


def _require_ledger(ds: MultimodalDataset):
    if not ds.has_ledger:
        raise StateError("this diagnostic needs a dataset with a ground-truth ledger")


def layer_features(model: FusionModel, ds: MultimodalDataset, layer: str) -> LayerFeatures:
    """Directions of every ledger feature at the input of ``layer``."""
    _require_ledger(ds)
    name, k, _ = _parse_layer(model, layer)
    feats = ds.features()
    if name.startswith("enc"):
        i = int(name[3:])
        feats = [f for f in feats if f.modality == i]
        if k == 0:
            dirs = np.array([f.direction for f in feats])
        else:
            acts = forward(model.encoders[i], ds.modalities[i])
            dirs = np.array([_jvp(model.encoders[i], acts,
                                  np.broadcast_to(f.direction, ds.modalities[i].shape), k).mean(0)
                             for f in feats])
    elif name in ("fusion", "classifier"):
        cache = forward_cache(model, ds.modalities)
        splits = np.concatenate([[0], np.cumsum(model.encoding_dims)])
        in_dim = model.fusion.in_dim
        dirs = []
        for f in feats:
            i = f.modality
            x = ds.modalities[i]
            t = _jvp(model.encoders[i], cache.enc[i], np.broadcast_to(f.direction, x.shape))
            if model.ebr is not None:
                t = _jvp(model.ebr.h[i], cache.h[i], t)
                t = _jvp(model.ebr.hinv[i], cache.hinv[i], t)
            if model.fusion_kind == "mean":
                full = t / model.m
            else:
                full = np.zeros((x.shape[0], in_dim))
                full[:, splits[i]:splits[i + 1]] = t
            if name == "fusion":
                t = _jvp(model.fusion, cache.fusion, full, k)
            else:
                t = _jvp(model.fusion, cache.fusion, full)
            dirs.append(t.mean(axis=0))
        dirs = np.array(dirs)
    else:
        raise ConfigurationError(f"feature directions not defined at {layer!r}")
    return LayerFeatures(layer, dirs, np.array([f.modality for f in feats]),
                         np.array([f.predictive for f in feats]),
                         np.array([f.latent for f in feats]))


def abs_cosines(weight, directions) -> np.ndarray:
    """``|cos|`` between each weight row and each (unit) feature direction."""
    w = np.asarray(weight, dtype=np.float64)
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    w = w / np.where(norms > 1e-12, norms, 1.0)
    return np.abs(w @ np.asarray(directions).T)


def feature_responses(weight, features: LayerFeatures) -> np.ndarray:
    """``|w_r . v_f|`` for every row r and pushed-forward feature f."""
    return np.abs(np.asarray(weight, dtype=np.float64) @ features.vectors.T)


def polysemantic_rows(weight, features: LayerFeatures, tau: float = TAU_ENC) -> np.ndarray:
    """Rows whose normalised alignment exceeds ``tau`` for features of at
    least two modalities. Alignment is normalised per row by the row's
    strongest feature response."""
    resp = feature_responses(weight, features)
    peak = resp.max(axis=1, keepdims=True)
    rel = np.where(peak > 1e-12, resp / np.maximum(peak, 1e-300), 0.0) > tau
    mods = np.unique(features.modalities)
    hits = np.stack([rel[:, features.modalities == i].any(axis=1) for i in mods], axis=1)
    return hits.sum(axis=1) >= 2


def collision_fraction_of(weight, features: LayerFeatures, tau: float = TAU_ENC) -> float:
    return float(np.mean(polysemantic_rows(weight, features, tau)))


def empirical_collision_fraction(model: FusionModel, ds: MultimodalDataset,
                                 layer: str = "fusion.0", tau: float = TAU_ENC) -> float:
    feats = layer_features(model, ds, layer)
    return collision_fraction_of(layer_weight(model, layer), feats, tau)


# --- AGOP -----------------------------------------------------------------

def agop_of_layer(weight, inputs, bias=None, activation="relu") -> np.ndarray:
    """Mean of ``J(x)^T J(x)`` for ``y = act(W x + b)`` over the input rows."""
    w = np.asarray(weight, dtype=np.float64)
    if activation != "relu":
        return w.T @ w
    b = np.zeros(w.shape[0]) if bias is None else bias
    active = (np.asarray(inputs) @ w.T + b) > 0.0
    p = active.mean(axis=0)
    return w.T @ (p[:, None] * w)


def agop(model: FusionModel, ds: MultimodalDataset, layer: str = "fusion.0") -> np.ndarray:
    _, k, mlp = _parse_layer(model, layer)
    lay = mlp.layers[k]
    return agop_of_layer(lay.weight, layer_inputs(model, ds, layer), lay.bias, lay.activation)


def agop_ranks(model: FusionModel, ds: MultimodalDataset) -> dict:
    out = {}
    for name, mlp in model.modules().items():
        if name == "psi" or name.startswith("h"):
            continue
        for k in range(len(mlp.layers)):
            out[f"{name}.{k}"] = effective_rank(agop(model, ds, f"{name}.{k}"))
    return out


def gradient_rank_trace(trace, final_agop_ranks: dict | None = None) -> dict:
    """Per-layer accumulated-gradient effective ranks over epochs.

    Returns ``{"ranks": {layer: [r_0, r_1, ...]}, "agop_rank": {...},
    "ratio": {layer: final_grad_rank / agop_rank}}``.
    """
    ranks: dict[str, list[int]] = {}
    for rec in trace.records:
        for layer, r in rec.grad_ranks.items():
            ranks.setdefault(layer, []).append(int(r))
    agop_r = final_agop_ranks if final_agop_ranks is not None else trace.extras.get("agop_ranks", {})
    ratio = {}
    for layer, seq in ranks.items():
        a = agop_r.get(layer)
        if a:
            ratio[layer] = seq[-1] / a
    return {"ranks": ranks, "agop_rank": dict(agop_r), "ratio": ratio}


# --- degree of polysemanticity and the AGOP gap --------------------------------

@dataclass
class SubspaceProbe:
    layer: str
    basis: np.ndarray  # (in_dim, k), orthonormal columns
    members: tuple = ()

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=np.float64)
        if b.ndim == 1:
            b = b[:, None]
        gram = b.T @ b
        if not np.allclose(gram, np.eye(b.shape[1]), atol=1e-8):
            raise ConfigurationError("probe basis columns must be orthonormal")
        self.basis = b

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @classmethod
    def spanning(cls, layer: str, vectors, members=()) -> "SubspaceProbe":
        q, r = np.linalg.qr(np.atleast_2d(np.asarray(vectors, dtype=np.float64)).T)
        keep = np.abs(np.diag(r)) > 1e-10
        return cls(layer, q[:, keep], tuple(members))


def gamma(probe: SubspaceProbe, features: LayerFeatures, tau: float = TAU_ENC) -> float:
    """Number of features whose projection onto the probe has norm >= tau,
    divided by the probe dimension."""
    if features.directions.shape[1] != probe.basis.shape[0]:
        raise ConfigurationError("probe and features live in different spaces")
    proj = np.linalg.norm(features.directions @ probe.basis, axis=1)
    return float(np.count_nonzero(proj >= tau)) / probe.dim


def agop_gap(probe: SubspaceProbe, agop_matrix, gamma_value: float | None = None,
             epoch: int | None = None):
    """Frobenius distance between the trace-normalised probe projector and the
    trace-normalised AGOP, with the bound ``gamma^(-1/n)`` when available."""
    a = np.asarray(agop_matrix, dtype=np.float64)
    b = probe.basis
    if a.shape[0] != b.shape[0]:
        if a.shape[0] < b.shape[0]:
            raise ConfigurationError("probe lives in a larger space than the AGOP")
        b = np.vstack([b, np.zeros((a.shape[0] - b.shape[0], b.shape[1]))])
    tr = np.trace(a)
    a_n = a / tr if tr > 0 else a
    p_n = (b @ b.T) / b.shape[1]
    gap = float(np.linalg.norm(p_n - a_n))
    bound = None
    if gamma_value is not None and epoch is not None and gamma_value > 0 and epoch > 0:
        bound = float(gamma_value ** (-1.0 / epoch))
    return gap, bound


def feature_probes(features: LayerFeatures, tau: float = TAU_ENC, predictive_only=True):
    """1-d probes along single features (monosemantic) and along normalised
    sums of feature pairs from different modalities (polysemantic)."""
    keep = np.flatnonzero(features.predictive) if predictive_only else np.arange(len(features))
    keep = [j for j in keep if np.linalg.norm(features.directions[j]) > 0]
    probes = []
    for j in keep:
        probes.append(SubspaceProbe(features.layer, features.directions[j][:, None], (int(j),)))
    for a_pos, a in enumerate(keep):
        for b in keep[a_pos + 1:]:
            if features.modalities[a] == features.modalities[b]:
                continue
            v = features.directions[a] + features.directions[b]
            nv = np.linalg.norm(v)
            if nv > 1e-12:
                probes.append(SubspaceProbe(features.layer, (v / nv)[:, None], (int(a), int(b))))
    return [(p, gamma(p, features, tau)) for p in probes]


def row_probes(weight, features: LayerFeatures, tau: float = TAU_ENC):
    """One 1-d probe per weight row, with its degree of polysemanticity."""
    out = []
    for r, row in enumerate(np.asarray(weight)):
        n = np.linalg.norm(row)
        if n < 1e-12:
            continue
        p = SubspaceProbe(features.layer, (row / n)[:, None], (r,))
        out.append((p, gamma(p, features, tau)))
    return out


# --- interference and entanglement -----------------------------------------

def interference_score(model: FusionModel, ds: MultimodalDataset) -> float:
    """Mean |d L_sem / d eps| along each predictive-conjugate probe direction."""
    _require_ledger(ds)
    conj = [f for f in ds.features() if f.role == "conjugate_predictive"]
    if not conj:
        raise StateError("dataset has no conjugate pairs")
    cache = forward_cache(model, ds.modalities)
    _, dlogits = softmax_cross_entropy(cache.logits, ds.labels)
    # per-sample gradients: undo the 1/n of the mean
    _, d_in = backward_model(model, cache, dlogits=dlogits * ds.n, return_inputs=True)
    vals = []
    for f in conj:
        g = d_in[f.modality]
        if g is None:
            vals.append(np.zeros(ds.n))
        else:
            vals.append(np.abs(g @ f.direction))
    return float(np.mean(vals))


@dataclass
class EntanglementResult:
    ratio: float | None
    count: int

    @property
    def defined(self) -> bool:
        return self.ratio is not None


def entanglement_ratio_of(weight, features: LayerFeatures, tau: float = TAU_ENC) -> EntanglementResult:
    rows = polysemantic_rows(weight, features, tau)
    count = int(rows.sum())
    if count == 0:
        return EntanglementResult(None, 0)
    cos = abs_cosines(np.asarray(weight)[rows], features.directions)
    pred = cos[:, features.predictive].mean(axis=1).sum() if features.predictive.any() else 0.0
    noisy = cos[:, ~features.predictive].mean(axis=1).sum() if (~features.predictive).any() else 0.0
    if noisy <= 0:
        return EntanglementResult(None, count)
    return EntanglementResult(float(pred / noisy), count)


def entanglement_ratio(model: FusionModel, ds: MultimodalDataset, layer: str = "fusion.0",
                       tau: float = TAU_ENC) -> EntanglementResult:
    feats = layer_features(model, ds, layer)
    return entanglement_ratio_of(layer_weight(model, layer), feats, tau)


# --- representation similarity and multicollinearity ----------------------

def linear_cka(a, b, return_flag: bool = False):
    """Centered linear CKA; zero-variance input gives 0 (flagged)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise InputError("linear_cka needs equal row counts")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    den = np.linalg.norm(a.T @ a) * np.linalg.norm(b.T @ b)
    if den <= 1e-300:
        if return_flag:
            return 0.0, True
        warnings.warn("linear_cka on a zero-variance input", RuntimeWarning, stacklevel=2)
        return 0.0
    value = float(min(1.0, np.linalg.norm(a.T @ b) ** 2 / den))
    return (value, False) if return_flag else value


def vif_values(rep, ridge: float = 1e-8, cap: float = VIF_CAP) -> np.ndarray:
    """Per-column VIF of the non-constant columns of ``rep``."""
    x = np.asarray(rep, dtype=np.float64)
    n, d = x.shape
    if n <= d:
        raise InputError(f"VIF needs more rows than columns ({n} <= {d})")
    std = x.std(axis=0)
    x = x[:, std > 1e-12]
    if x.shape[1] < 2:
        return np.ones(x.shape[1])
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    gram = x.T @ x
    out = []
    for j in range(x.shape[1]):
        others = [k for k in range(x.shape[1]) if k != j]
        g = gram[np.ix_(others, others)] + ridge * np.eye(len(others))
        coef = np.linalg.solve(g, gram[others, j])
        resid = x[:, j] - x[:, others] @ coef
        r2 = 1.0 - (resid @ resid) / (x[:, j] @ x[:, j])
        out.append(cap if r2 >= 1.0 - 1.0 / cap else 1.0 / (1.0 - r2))
    return np.minimum(np.array(out), cap)


def vif_mean(rep) -> float:
    v = vif_values(rep)
    return float(v.mean()) if v.size else 1.0


# --- weight-space modality classifier ------------------------------------------

def train_weight_classifier(samples, seed: int = 0, hidden=(32, 16), epochs: int = 200,
                            lr: float = 0.05, batch_size: int = 64) -> Mlp:
    """2-hidden-layer ReLU classifier mapping weight rows to their modality."""
    if len(samples) < 2:
        raise InputError("need weight samples from at least two modalities")
    width = max(s.shape[1] for s in samples)
    xs, ys = [], []
    for i, s in enumerate(samples):
        if s.shape[0] < 2:
            raise InputError(f"modality {i} has fewer than two weight samples")
        xs.append(np.pad(s, ((0, 0), (0, width - s.shape[1]))))
        ys.append(np.full(s.shape[0], i))
    x, y = np.vstack(xs), np.concatenate(ys)
    # weight entries are small; train on unit-scale inputs and fold the scale back in
    scale = float(x.std()) or 1.0
    x = x / scale
    stream = RandomStream(seed).child("weight-classifier")
    net = he_uniform_mlp([width, *hidden, len(samples)], stream.child("init"),
                         activations=["relu"] * len(hidden) + ["softmax-logits"])
    sgd = SgdConfig(learning_rate=lr, weight_decay=1e-4, decay_factor=1.0)
    for epoch in range(epochs):
        order = stream.child(f"shuffle{epoch}").permutation(x.shape[0])
        for s in range(0, x.shape[0], batch_size):
            idx = order[s:s + batch_size]
            acts = forward(net, x[idx])
            _, dl = softmax_cross_entropy(acts[-1], y[idx])
            grads, _ = backward(net, acts, dl)
            net = sgd_step(net, grads, sgd)
    first = net.layers[0]
    return replace(net, layers=[replace(first, weight=first.weight / scale), *net.layers[1:]])


def modality_probe_ce(unimodal_weight_samples, fusion_layer, block_dims, seed: int = 0,
                      classifier: Mlp | None = None) -> float:
    """Mean CE of the weight-space modality classifier on fusion-head rows.

    Each first-layer fusion row is cut into per-modality blocks; block i is
    zero-padded and labelled with modality i.
    """
    samples = [np.asarray(s, dtype=np.float64) for s in unimodal_weight_samples]
    net = classifier or train_weight_classifier(samples, seed)
    width = net.in_dim
    w = fusion_layer.weight if hasattr(fusion_layer, "weight") else np.asarray(fusion_layer)
    splits = np.concatenate([[0], np.cumsum(block_dims)])
    if splits[-1] != w.shape[1]:
        raise ConfigurationError("block dims do not add up to the fusion input width")
    xs, ys = [], []
    for i in range(len(block_dims)):
        block = w[:, splits[i]:splits[i + 1]]
        xs.append(np.pad(block, ((0, 0), (0, width - block.shape[1]))))
        ys.append(np.full(block.shape[0], i))
    loss, _ = softmax_cross_entropy(net(np.vstack(xs)), np.concatenate(ys))
    return float(loss)


# --- report ----------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    collision_bound: float
    empirical_collision_fraction: float
    agop: dict = field(default_factory=dict)
    gamma: list = field(default_factory=list)
    agop_gap: list = field(default_factory=list)
    gamma_bound: list = field(default_factory=list)
    interference_score: float | None = None
    entanglement_ratio: float | None = None
    entanglement_rows: int = 0
    cka: list = field(default_factory=list)
    vif_mean: float = 1.0
    modality_probe_ce: float | None = None
    version: int = REPORT_VERSION

    def to_json(self) -> str:
        d = asdict(self)
        d["agop"] = {k: np.asarray(v).tolist() for k, v in self.agop.items()}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DiagnosticsReport":
        d = json.loads(text)
        if d.get("version") != REPORT_VERSION:
            raise ConfigurationError(f"report version {d.get('version')} unsupported")
        d["agop"] = {k: np.asarray(v) for k, v in d["agop"].items()}
        return cls(**d)


def diagnose(model: FusionModel, ds: MultimodalDataset, layer: str = "fusion.0",
             tau: float = TAU_ENC, epoch: int | None = None) -> DiagnosticsReport:
    """Evaluate every ledger-based diagnostic on ``ds``."""
    _require_ledger(ds)
    feats = layer_features(model, ds, layer)
    w = layer_weight(model, layer)
    a = agop(model, ds, layer)
    gammas, gaps, bounds = [], [], []
    for probe, g in feature_probes(feats, tau):
        gap, bound = agop_gap(probe, a, g, epoch)
        gammas.append(g)
        gaps.append(gap)
        bounds.append(bound)
    cache = forward_cache(model, ds.modalities)
    ent = entanglement_ratio_of(w, feats, tau)
    try:
        inter = interference_score(model, ds)
    except StateError:
        inter = None
    return DiagnosticsReport(
        collision_bound=collision_bound(model.m, model.encoding_dims),
        empirical_collision_fraction=collision_fraction_of(w, feats, tau),
        agop={layer: a}, gamma=gammas, agop_gap=gaps, gamma_bound=bounds,
        interference_score=inter, entanglement_ratio=ent.ratio,
        entanglement_rows=ent.count,
        cka=[linear_cka(e, cache.fused) for e in cache.encodings],
        vif_mean=vif_mean(cache.fused))

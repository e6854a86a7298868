"""Vanilla ERM (with optional beta up-weighting), cross-modal KD and EBR
training loops, plus a versioned binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from mmcollapse.errors import (ConfigurationError, InputError, IntegrityError,
                               StateError, VersionError)
from mmcollapse.fusionmodel import (EbrAttachment, FusionModel, backward_model,
                                    forward_cache)
from mmcollapse.neurocore import (DenseLayer, Mlp, RandomStream, SgdConfig,
                                  backward, effective_rank, forward,
                                  he_uniform_mlp, sgd_step,
                                  softmax_cross_entropy)
from mmcollapse.synthgen import MultimodalDataset, inject_noise

MODES = ("vanilla", "kd", "ebr")
KD_SEQUENCES = ("weakest_to_strongest", "strongest_to_weakest", "strongest_only",
                "random", "simultaneous")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "vanilla"
    epochs: int = 300
    batch_size: int = 100
    sgd: SgdConfig = SgdConfig(learning_rate=0.01, weight_decay=1e-3)
    beta: float = 0.0
    kd_sequence: str = "weakest_to_strongest"
    kd_weight: float = 1.0
    kd_epochs: int = 20
    ebr_interleave: int = 10
    ebr_simultaneous: bool = False
    md_weight: float = 1.0
    noise_rate: float = 0.0
    seed: int = 0
    weakest: int | None = None
    diag_samples: int = 512

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.kd_sequence not in KD_SEQUENCES:
            raise ConfigurationError(f"unknown kd_sequence {self.kd_sequence!r}")
        if self.beta < 0 or self.kd_weight < 0:
            raise ConfigurationError("beta and kd_weight must be >= 0")
        if self.ebr_interleave < 1:
            raise ConfigurationError("ebr_interleave must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs >= 0 and batch_size >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("sgd"), dict):
            d["sgd"] = SgdConfig(**d["sgd"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    sem_loss: float
    md_loss: float | None = None
    probe_loss: float | None = None
    fused_rank: int = 0
    grad_ranks: dict = field(default_factory=dict)
    cka: list = field(default_factory=list)
    phase: str = "sem"


@dataclass
class TrainTrace:
    records: list[EpochRecord] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def series(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_dict(self) -> dict:
        return {"records": [asdict(r) for r in self.records], "extras": self.extras}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainTrace":
        return cls([EpochRecord(**r) for r in d["records"]], d.get("extras", {}))


def weakest_modality(ds: MultimodalDataset, cfg: TrainConfig) -> int:
    if cfg.weakest is not None:
        if not 0 <= cfg.weakest < ds.m:
            raise ConfigurationError(f"weakest modality {cfg.weakest} out of range")
        return cfg.weakest
    return ds.strength_order()[0]


def _scale(grads, s):
    return [(s * w, s * b) for w, b in grads]


def _accumulate(acc: dict, grads: dict):
    for name, gs in grads.items():
        if name in acc:
            acc[name] = [(a + w, c + b) for (a, c), (w, b) in zip(acc[name], gs)]
        else:
            acc[name] = [(w.copy(), b.copy()) for w, b in gs]


def _apply(model: FusionModel, grads: dict, sgd: SgdConfig, epoch: int) -> FusionModel:
    mods = model.modules()
    return model.with_modules({name: sgd_step(mods[name], g, sgd, epoch)
                               for name, g in grads.items()})


def _diag_indices(ds, cfg):
    k = min(cfg.diag_samples, ds.n)
    return RandomStream(cfg.seed).child("diag").permutation(ds.n)[:k]


def _record(model, ds_diag, epoch, sem, acc, md=None, probe=None, phase="sem"):
    from mmcollapse.diagnostics import linear_cka
    cache = forward_cache(model, ds_diag.modalities)
    ranks = {}
    for name, gs in acc.items():
        for k, (w, _) in enumerate(gs):
            ranks[f"{name}.{k}"] = effective_rank(w) if np.any(w) else 0
    cka = [linear_cka(e, cache.fused) for e in cache.encodings]
    return EpochRecord(epoch, float(sem), None if md is None else float(md),
                       None if probe is None else float(probe),
                       effective_rank(cache.fused), ranks, cka, phase)


def _prepare(model, ds, cfg):
    if ds.n == 0:
        raise InputError("empty dataset")
    if ds.m != model.m:
        raise ConfigurationError(f"dataset has {ds.m} modalities, model has {model.m}")
    if cfg.noise_rate > 0:
        weak = weakest_modality(ds, cfg)
        ds = inject_noise(ds, weak, cfg.noise_rate,
                          RandomStream(cfg.seed).child("train-noise"))
    return ds


def _batches(n, cfg, epoch):
    order = RandomStream(cfg.seed).child(f"shuffle{epoch}").permutation(n)
    return [order[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]


def _probe_head(model, weak, cfg) -> Mlp:
    return he_uniform_mlp([model.encoders[weak].out_dim, model.num_classes],
                          RandomStream(cfg.seed).child("beta-probe"),
                          activations=["softmax-logits"])


def sem_step_grads(model, xs, y, cfg, weak, probe=None, cache=None):
    """Gradients of ``L_sem + beta * CE(probe(f_weak), y)`` on one batch."""
    if cache is None:
        cache = forward_cache(model, xs)
    loss, dlogits = softmax_cross_entropy(cache.logits, y)
    d_enc = None
    probe_grads, probe_loss = None, None
    if probe is not None and cfg.beta > 0:
        acts = forward(probe, cache.encodings[weak])
        probe_loss, dp = softmax_cross_entropy(acts[-1], y)
        probe_grads, dz = backward(probe, acts, cfg.beta * dp)
        d_enc = [None] * model.m
        d_enc[weak] = dz
    grads = backward_model(model, cache, dlogits=dlogits, d_encodings=d_enc)
    return cache, loss, grads, probe_loss, probe_grads


def train_vanilla(model: FusionModel, ds: MultimodalDataset, cfg: TrainConfig,
                  callback=None, _mode_check: bool = True):
    """``callback(epoch, model)`` runs after every epoch when given."""
    if _mode_check and cfg.mode != "vanilla":
        raise ConfigurationError("train_vanilla needs cfg.mode == 'vanilla'")
    ds = _prepare(model, ds, cfg)
    trace = TrainTrace()
    if cfg.epochs == 0:
        return model, trace
    weak = weakest_modality(ds, cfg)
    probe = _probe_head(model, weak, cfg) if cfg.beta > 0 else None
    diag = ds.subset(_diag_indices(ds, cfg))
    for epoch in range(cfg.epochs):
        acc, losses, plosses = {}, [], []
        for idx in _batches(ds.n, cfg, epoch):
            xs = [x[idx] for x in ds.modalities]
            _, loss, grads, ploss, pgrads = sem_step_grads(model, xs, ds.labels[idx],
                                                           cfg, weak, probe)
            _accumulate(acc, grads)
            model = _apply(model, grads, cfg.sgd, epoch)
            if probe is not None:
                probe = sgd_step(probe, pgrads, cfg.sgd, epoch)
                plosses.append(ploss)
            losses.append(loss)
        trace.records.append(_record(model, diag, epoch, np.mean(losses), acc,
                                     probe=np.mean(plosses) if plosses else None))
        if callback is not None:
            callback(epoch, model)
    trace.extras["weakest"] = weak
    return model, trace


# --- knowledge distillation ------------------------------------------------

def cosine_alignment_loss(s, t):
    """Mean ``1 - cos(s_n, t_n)`` over rows, with gradients for both inputs."""
    eps = 1e-12
    ns = np.sqrt(np.sum(s * s, axis=1)) + eps
    nt = np.sqrt(np.sum(t * t, axis=1)) + eps
    dot = np.sum(s * t, axis=1)
    cos = dot / (ns * nt)
    n = s.shape[0]
    ds = -(t / (ns * nt)[:, None] - (dot / (ns ** 3 * nt))[:, None] * s) / n
    dt = -(s / (ns * nt)[:, None] - (dot / (nt ** 3 * ns))[:, None] * t) / n
    return float(np.mean(1.0 - cos)), ds, dt


def kd_teacher_order(ds: MultimodalDataset, cfg: TrainConfig, student: int) -> list[list[int]]:
    """Teacher schedule as a list of stages; each stage lists its teachers."""
    order = [i for i in ds.strength_order() if i != student]  # weakest first
    seq = cfg.kd_sequence
    if not order:
        return []
    if seq == "weakest_to_strongest":
        return [[j] for j in order]
    if seq == "strongest_to_weakest":
        return [[j] for j in reversed(order)]
    if seq == "strongest_only":
        return [[order[-1]]] * len(order)
    if seq == "random":
        perm = RandomStream(cfg.seed).child("kd-random").permutation(len(order))
        return [[order[k]] for k in perm]
    return [order]


def train_unimodal_encoder(encoder: Mlp, x, y, num_classes, cfg: TrainConfig,
                           epochs: int, stream: RandomStream) -> Mlp:
    head = he_uniform_mlp([encoder.out_dim, num_classes], stream.child("head"),
                          activations=["softmax-logits"])
    n = x.shape[0]
    for epoch in range(epochs):
        order = stream.child(f"shuffle{epoch}").permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            ea = forward(encoder, x[idx])
            ha = forward(head, ea[-1])
            _, dl = softmax_cross_entropy(ha[-1], y[idx])
            hg, dz = backward(head, ha, dl)
            eg, _ = backward(encoder, ea, dz)
            head = sgd_step(head, hg, cfg.sgd)
            encoder = sgd_step(encoder, eg, cfg.sgd)
    return encoder


def align_student(student: Mlp, xs_student, teacher_codes: list[np.ndarray],
                  cfg: TrainConfig, epochs: int, stream: RandomStream):
    """Fit the student encoder (and one linear projection per teacher) so
    that its encodings match the projected teacher encodings in cosine."""
    d = student.out_dim
    projs = [he_uniform_mlp([t.shape[1], d], stream.child(f"proj{k}"),
                            activations=["identity"]) for k, t in enumerate(teacher_codes)]
    n = xs_student.shape[0]
    for epoch in range(epochs):
        order = stream.child(f"shuffle{epoch}").permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            sa = forward(student, xs_student[idx])
            d_s = np.zeros_like(sa[-1])
            new_projs = []
            for proj, t in zip(projs, teacher_codes):
                pa = forward(proj, t[idx])
                _, gs, gt = cosine_alignment_loss(sa[-1], pa[-1])
                d_s += cfg.kd_weight * gs
                pg, _ = backward(proj, pa, cfg.kd_weight * gt)
                new_projs.append(sgd_step(proj, pg, cfg.sgd))
            sg, _ = backward(student, sa, d_s)
            student = sgd_step(student, sg, cfg.sgd)
            projs = new_projs
    sims = []
    s_codes = student(xs_student)
    for proj, t in zip(projs, teacher_codes):
        loss, _, _ = cosine_alignment_loss(s_codes, proj(t))
        sims.append(1.0 - loss)
    return student, sims


def train_kd(model: FusionModel, ds: MultimodalDataset, cfg: TrainConfig, callback=None):
    """Distil into the weakest encoder, then train end-to-end as vanilla."""
    if cfg.mode != "kd":
        raise ConfigurationError("train_kd needs cfg.mode == 'kd'")
    if cfg.epochs == 0:
        return model, TrainTrace()
    ds_n = _prepare(model, ds, cfg)
    student = weakest_modality(ds_n, cfg)
    stages = kd_teacher_order(ds_n, cfg, student)
    for stage in stages:
        for j in stage:
            if not 0 <= j < ds_n.m:
                raise ConfigurationError(f"kd sequence references unknown modality {j}")
    root = RandomStream(cfg.seed).child("kd")
    teachers = {}
    for j in sorted({j for stage in stages for j in stage}):
        enc = train_unimodal_encoder(model.encoders[j].copy(), ds_n.modalities[j],
                                     ds_n.labels, ds_n.num_classes, cfg, cfg.kd_epochs,
                                     root.child(f"teacher{j}"))
        teachers[j] = enc(ds_n.modalities[j])
    enc = model.encoders[student]
    alignment = []
    # every sequence gets the same total alignment budget
    per_stage = cfg.kd_epochs
    if cfg.kd_sequence == "simultaneous" and stages:
        per_stage = cfg.kd_epochs * len(stages[0])
    for k, stage in enumerate(stages):
        enc, sims = align_student(enc, ds_n.modalities[student],
                                  [teachers[j] for j in stage], cfg, per_stage,
                                  root.child(f"stage{k}"))
        alignment.append({"teachers": stage, "cosine": sims})
    encoders = list(model.encoders)
    encoders[student] = enc
    model = replace(model, encoders=encoders)
    # noise was already applied above; do not corrupt twice
    model, trace = train_vanilla(model, ds_n, replace(cfg, mode="vanilla", noise_rate=0.0,
                                                      weakest=student),
                                 callback)
    trace.extras["kd_alignment"] = alignment
    trace.extras["student"] = student
    return model, trace


# --- explicit basis reallocation --------------------------------------------

def md_loss_grads(model: FusionModel, cache, with_grads: bool = True):
    """``L_md = sum_i CE(psi(g_i), i)`` with psi gradients and latent seeds."""
    lat = cache.latents
    sizes = [z.shape[0] for z in lat]
    z = np.concatenate(lat, axis=0)
    target = np.repeat(np.arange(len(lat)), sizes)
    acts = forward(model.ebr.psi, z)
    # per-modality CE means summed; equal block sizes make this m * mean
    weights = np.repeat([1.0 / s for s in sizes], sizes)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    total = float(np.sum(weights * (log_norm - shifted[rows, target])))
    if not with_grads:
        return total, None, None
    dl = np.exp(shifted - log_norm[:, None])
    dl[rows, target] -= 1.0
    dl *= weights[:, None]
    psi_grads, dz = backward(model.ebr.psi, acts, dl)
    return total, psi_grads, np.split(dz, np.cumsum(sizes)[:-1], axis=0)


def ebr_phase(cfg: TrainConfig, epoch: int) -> str:
    if cfg.ebr_simultaneous:
        return "both"
    return "md" if (epoch // cfg.ebr_interleave) % 2 == 0 else "sem"


def ebr_step(model: FusionModel, xs, y, cfg: TrainConfig, phase: str, epoch: int = 0,
             weak: int = 0, probe=None):
    """One EBR update on a batch.

    psi  <- psi - grad_psi L_md                      (phases md, both)
    g_i  <- g_i - grad L_sem + md_weight grad L_md    (sem term: sem/both, md term: md/both)
    hinv <- hinv - grad L_sem                        (phases sem, both)
    The fusion head and classifier descend L_sem whenever the sem term is on.
    """
    if model.ebr is None:
        raise StateError("EBR is not attached")
    if phase not in ("sem", "md", "both"):
        raise ConfigurationError(f"unknown phase {phase!r}")
    cache = forward_cache(model, xs)
    update = {}
    ploss = pgrads = None
    if phase in ("sem", "both"):
        _, sem, g_sem, ploss, pgrads = sem_step_grads(model, xs, y, cfg, weak, probe, cache)
        update.update(g_sem)
    else:
        sem = softmax_cross_entropy(cache.logits, y)[0]
    if phase in ("md", "both"):
        md, g_psi, d_lat = md_loss_grads(model, cache)
        g_md = backward_model(model, cache, d_latents=d_lat)
        update["psi"] = g_psi
        for name, g in g_md.items():
            ascent = _scale(g, -cfg.md_weight)
            if name in update:
                update[name] = [(a + w, b + c) for (a, b), (w, c) in zip(update[name], ascent)]
            else:
                update[name] = ascent
    else:
        md = md_loss_grads(model, cache, with_grads=False)[0]
    new = _apply(model, update, cfg.sgd, epoch)
    if probe is not None and phase in ("sem", "both"):
        probe = sgd_step(probe, pgrads, cfg.sgd, epoch)
    return new, sem, md, update, probe, ploss


def train_ebr(model: FusionModel, ds: MultimodalDataset, cfg: TrainConfig, callback=None):
    if model.ebr is None:
        raise StateError("EBR is not attached")
    if cfg.mode != "ebr":
        raise ConfigurationError("train_ebr needs cfg.mode == 'ebr'")
    ds = _prepare(model, ds, cfg)
    trace = TrainTrace()
    if cfg.epochs == 0:
        return model, trace
    weak = weakest_modality(ds, cfg)
    probe = _probe_head(model, weak, cfg) if cfg.beta > 0 else None
    diag = ds.subset(_diag_indices(ds, cfg))
    for epoch in range(cfg.epochs):
        phase = ebr_phase(cfg, epoch)
        acc, sems, mds, plosses = {}, [], [], []
        for idx in _batches(ds.n, cfg, epoch):
            xs = [x[idx] for x in ds.modalities]
            model, sem, md, update, probe, ploss = ebr_step(
                model, xs, ds.labels[idx], cfg, phase, epoch, weak, probe)
            _accumulate(acc, update)
            sems.append(sem)
            mds.append(md)
            if ploss is not None:
                plosses.append(ploss)
        trace.records.append(_record(model, diag, epoch, np.mean(sems), acc,
                                     md=np.mean(mds),
                                     probe=np.mean(plosses) if plosses else None,
                                     phase=phase))
        if callback is not None:
            callback(epoch, model)
    trace.extras["weakest"] = weak
    return model, trace


def train(model: FusionModel, ds: MultimodalDataset, cfg: TrainConfig, callback=None):
    if cfg.mode == "vanilla":
        return train_vanilla(model, ds, cfg, callback)
    if cfg.mode == "kd":
        return train_kd(model, ds, cfg, callback)
    return train_ebr(model, ds, cfg, callback)


# --- checkpoints -------------------------------------------------------------

MAGIC = b"MMCKPT\x00\x01"
VERSION = 1


def _model_layout(model: FusionModel):
    table, blobs = [], []
    for name, mlp in model.modules().items():
        for k, layer in enumerate(mlp.layers):
            table.append({"module": name, "layer": k, "activation": layer.activation,
                          "weight": list(layer.weight.shape), "bias": [layer.bias.shape[0]]})
            blobs.append(layer.weight.astype("<f8").tobytes())
            blobs.append(layer.bias.astype("<f8").tobytes())
    return table, b"".join(blobs)


def checkpoint(model: FusionModel, trace: TrainTrace, path) -> Path:
    """``MAGIC | version u32 | header_len u64 | header json | payload | sha256``."""
    table, payload = _model_layout(model)
    header = json.dumps({"m": model.m, "fusion_kind": model.fusion_kind,
                         "ebr": model.ebr is not None, "shapes": table,
                         "trace": trace.to_dict()}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + payload
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def restore(path):
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint or truncated")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    off = len(MAGIC) + 12
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    payload = body[off + hlen:]
    pos = 0
    modules: dict[str, list[DenseLayer]] = {}
    for entry in header["shapes"]:
        rows, cols = entry["weight"]
        nw, nb = rows * cols * 8, entry["bias"][0] * 8
        if pos + nw + nb > len(payload):
            raise IntegrityError(f"{path}: payload shorter than shape table")
        w = np.frombuffer(payload, "<f8", rows * cols, pos).reshape(rows, cols).copy()
        b = np.frombuffer(payload, "<f8", entry["bias"][0], pos + nw).copy()
        pos += nw + nb
        modules.setdefault(entry["module"], []).append(DenseLayer(w, b, entry["activation"]))
    if pos != len(payload):
        raise IntegrityError(f"{path}: trailing payload bytes")
    m = header["m"]
    mlps = {k: Mlp(v) for k, v in modules.items()}
    ebr = None
    if header["ebr"]:
        ebr = EbrAttachment([mlps[f"h{i}"] for i in range(m)],
                            [mlps[f"hinv{i}"] for i in range(m)], mlps["psi"])
    model = FusionModel([mlps[f"enc{i}"] for i in range(m)], mlps["fusion"],
                        mlps["classifier"], ebr, header["fusion_kind"])
    return model, TrainTrace.from_dict(header["trace"])

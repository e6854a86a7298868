"""Encoders, fusion head, classifier and the optional EBR attachment.

Without EBR the encoding of modality i is ``f_i(x_i)``. With EBR attached,
``f_i`` acts as the backbone ``fbar_i`` and the encoding becomes
``hinv_i(h_i(fbar_i(x_i)))``; ``g_i = h_i . fbar_i`` is the latent seen by
the modality discriminator ``psi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from mmcollapse.errors import ConfigurationError, StateError
from mmcollapse.neurocore import (DenseLayer, Mlp, RandomStream, backward,
                                  forward, he_uniform_mlp)


@dataclass(frozen=True)
class ModelConfig:
    obs_dims: tuple[int, ...]
    num_classes: int
    enc_hidden: int = 48
    enc_out: int = 16
    fusion_hidden: int = 64
    fusion_out: int = 32
    ebr_latent: int = 32
    ebr_hidden: int = 64
    psi_hidden: tuple[int, int] = (32, 16)
    width_factor: int = 1
    fusion_kind: str = "concat"

    def __post_init__(self):
        object.__setattr__(self, "obs_dims", tuple(int(d) for d in self.obs_dims))
        if self.fusion_kind not in ("concat", "mean"):
            raise ConfigurationError(f"unknown fusion kind {self.fusion_kind!r}")
        if self.width_factor < 1:
            raise ConfigurationError("width_factor must be >= 1")

    def w(self, d: int) -> int:
        return d * self.width_factor

    @property
    def m(self) -> int:
        return len(self.obs_dims)


@dataclass
class EbrAttachment:
    h: list[Mlp]
    hinv: list[Mlp]
    psi: Mlp

    def __post_init__(self):
        dims = {hi.out_dim for hi in self.h}
        if len(dims) != 1:
            raise ConfigurationError("all h_i must share one output dimensionality")
        if self.psi.in_dim != dims.pop():
            raise ConfigurationError("psi input dim must equal the shared latent dim")

    @property
    def latent_dim(self) -> int:
        return self.psi.in_dim

    def copy(self) -> "EbrAttachment":
        return EbrAttachment([h.copy() for h in self.h], [h.copy() for h in self.hinv],
                             self.psi.copy())


@dataclass
class FusionModel:
    encoders: list[Mlp]
    fusion: Mlp
    classifier: Mlp
    ebr: EbrAttachment | None = None
    fusion_kind: str = "concat"

    def __post_init__(self):
        outs = [e.out_dim for e in self.encoders]
        if self.ebr is not None:
            for i, (e, hinv) in enumerate(zip(self.encoders, self.ebr.hinv)):
                if hinv.out_dim != e.out_dim:
                    raise ConfigurationError(f"hinv_{i} must map back to {e.out_dim} dims")
                if self.ebr.h[i].in_dim != e.out_dim:
                    raise ConfigurationError(f"h_{i} input must be {e.out_dim} dims")
        expected = sum(outs) if self.fusion_kind == "concat" else outs[0]
        if self.fusion_kind == "mean" and len(set(outs)) != 1:
            raise ConfigurationError("mean fusion needs equal encoder widths")
        if self.fusion.in_dim != expected:
            raise ConfigurationError(
                f"fusion input dim {self.fusion.in_dim} != {expected}")
        if self.classifier.in_dim != self.fusion.out_dim:
            raise ConfigurationError("classifier must consume the fused representation")

    @property
    def m(self) -> int:
        return len(self.encoders)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_dim

    @property
    def encoding_dims(self) -> list[int]:
        return [e.out_dim for e in self.encoders]

    def modules(self) -> dict[str, Mlp]:
        out = {f"enc{i}": e for i, e in enumerate(self.encoders)}
        out["fusion"] = self.fusion
        out["classifier"] = self.classifier
        if self.ebr is not None:
            out.update({f"h{i}": h for i, h in enumerate(self.ebr.h)})
            out.update({f"hinv{i}": h for i, h in enumerate(self.ebr.hinv)})
            out["psi"] = self.ebr.psi
        return out

    def with_modules(self, mods: dict[str, Mlp]) -> "FusionModel":
        cur = self.modules()
        cur.update(mods)
        ebr = None
        if self.ebr is not None:
            ebr = EbrAttachment([cur[f"h{i}"] for i in range(self.m)],
                                [cur[f"hinv{i}"] for i in range(self.m)], cur["psi"])
        return FusionModel([cur[f"enc{i}"] for i in range(self.m)], cur["fusion"],
                           cur["classifier"], ebr, self.fusion_kind)

    def copy(self) -> "FusionModel":
        return self.with_modules({k: v.copy() for k, v in self.modules().items()})


def build_model(cfg: ModelConfig, stream: RandomStream, encoder_ids=None) -> FusionModel:
    """``encoder_ids`` names the random stream of each encoder (default
    0..m-1), so a model on a subset of modalities can reuse the encoder
    initialisation of the full model."""
    w = cfg.w
    ids = range(cfg.m) if encoder_ids is None else list(encoder_ids)
    if len(ids) != cfg.m:
        raise ConfigurationError("one encoder id per modality is required")
    encoders = [he_uniform_mlp([d, w(cfg.enc_hidden), w(cfg.enc_out)],
                               stream.child(f"enc{i}"), last_activation="relu")
                for i, d in zip(ids, cfg.obs_dims)]
    fusion_in = w(cfg.enc_out) * (cfg.m if cfg.fusion_kind == "concat" else 1)
    fusion = he_uniform_mlp([fusion_in, w(cfg.fusion_hidden), w(cfg.fusion_out)],
                            stream.child("fusion"), last_activation="relu")
    classifier = he_uniform_mlp([w(cfg.fusion_out), cfg.num_classes],
                                stream.child("classifier"),
                                activations=["softmax-logits"])
    return FusionModel(encoders, fusion, classifier, None, cfg.fusion_kind)


def _near_identity_layer(d_out, d_in, activation, stream, scale):
    limit = np.sqrt(6.0 / d_in) * scale
    weight = stream.uniform(-limit, limit, size=(d_out, d_in))
    k = min(d_out, d_in)
    weight[np.arange(k), np.arange(k)] += 1.0
    return DenseLayer(weight, np.zeros(d_out), activation)


def attach_ebr(model: FusionModel, cfg: ModelConfig, stream: RandomStream,
               init_scale: float = 0.02) -> FusionModel:
    """Attach ``h_i``, ``hinv_i`` and ``psi``; ``hinv_i . h_i`` starts near identity."""
    w = cfg.w
    latent, hidden = w(cfg.ebr_latent), w(cfg.ebr_hidden)
    hs, hinvs = [], []
    for i, e in enumerate(model.encoders):
        s = stream.child(f"ebr{i}")
        d = e.out_dim
        hs.append(Mlp([_near_identity_layer(hidden, d, "relu", s.child("h1"), init_scale),
                       _near_identity_layer(latent, hidden, "identity", s.child("h2"), init_scale)]))
        hinvs.append(Mlp([_near_identity_layer(hidden, latent, "relu", s.child("g1"), init_scale),
                          _near_identity_layer(d, hidden, "relu", s.child("g2"), init_scale)]))
    p1, p2 = (w(k) for k in cfg.psi_hidden)
    psi = he_uniform_mlp([latent, p1, p2, model.m], stream.child("psi"),
                         activations=["relu", "relu", "softmax-logits"])
    return replace(model, ebr=EbrAttachment(hs, hinvs, psi))


def _check_batch(model: FusionModel, batch):
    if len(batch) != model.m:
        raise ConfigurationError(f"batch has {len(batch)} modalities, model has {model.m}")


@dataclass
class ForwardCache:
    enc: list[list[np.ndarray]]
    h: list[list[np.ndarray]] | None
    hinv: list[list[np.ndarray]] | None
    fusion: list[np.ndarray]
    classifier: list[np.ndarray]

    @property
    def encodings(self) -> list[np.ndarray]:
        if self.hinv is not None:
            return [a[-1] for a in self.hinv]
        return [a[-1] for a in self.enc]

    @property
    def latents(self) -> list[np.ndarray]:
        if self.h is None:
            raise StateError("EBR is not attached")
        return [a[-1] for a in self.h]

    @property
    def fused(self) -> np.ndarray:
        return self.fusion[-1]

    @property
    def logits(self) -> np.ndarray:
        return self.classifier[-1]


def fuse_encodings(model: FusionModel, encodings):
    if model.fusion_kind == "mean":
        return sum(encodings) / len(encodings)
    return np.concatenate(encodings, axis=1)


def forward_cache(model: FusionModel, batch, encodings=None) -> ForwardCache:
    """Full forward pass keeping every activation; ``encodings`` overrides
    the per-modality encodings fed to the fusion head."""
    _check_batch(model, batch)
    enc = [forward(e, x) for e, x in zip(model.encoders, batch)]
    h = hinv = None
    if model.ebr is not None:
        h = [forward(hi, a[-1]) for hi, a in zip(model.ebr.h, enc)]
        hinv = [forward(gi, a[-1]) for gi, a in zip(model.ebr.hinv, h)]
    cache = ForwardCache(enc, h, hinv, [], [])
    codes = cache.encodings if encodings is None else encodings
    cache.fusion = forward(model.fusion, fuse_encodings(model, codes))
    cache.classifier = forward(model.classifier, cache.fusion[-1])
    return cache


def backward_model(model: FusionModel, cache: ForwardCache, dlogits=None,
                   d_encodings=None, d_latents=None, d_fused=None,
                   return_inputs: bool = False):
    """Gradients of every module given output-side gradient seeds.

    ``dlogits`` seeds the classifier output, ``d_fused`` the fusion output,
    ``d_encodings[i]`` the encoding of modality i and ``d_latents[i]`` the EBR
    latent ``g_i``. Modules that receive no signal are omitted. With ``return_inputs`` the
    per-modality input gradients are returned as well.
    """
    grads = {}
    m = model.m
    d_enc = [None] * m
    if dlogits is not None or d_fused is not None:
        df = np.zeros_like(cache.fused) if d_fused is None else d_fused
        if dlogits is not None:
            grads["classifier"], dcls = backward(model.classifier, cache.classifier, dlogits)
            df = df + dcls
        grads["fusion"], dcat = backward(model.fusion, cache.fusion, df)
        if model.fusion_kind == "mean":
            d_enc = [dcat / m for _ in range(m)]
        else:
            splits = np.cumsum(model.encoding_dims)[:-1]
            d_enc = np.split(dcat, splits, axis=1)
    if d_encodings is not None:
        d_enc = [a if b is None else (b if a is None else a + b)
                 for a, b in zip(d_enc, d_encodings)]
    d_lat = list(d_latents) if d_latents is not None else [None] * m
    d_inputs = [None] * m
    for i in range(m):
        d_fbar = None
        if model.ebr is not None:
            if d_enc[i] is not None:
                grads[f"hinv{i}"], dz = backward(model.ebr.hinv[i], cache.hinv[i], d_enc[i])
                d_lat[i] = dz if d_lat[i] is None else d_lat[i] + dz
            if d_lat[i] is not None:
                grads[f"h{i}"], d_fbar = backward(model.ebr.h[i], cache.h[i], d_lat[i])
        else:
            d_fbar = d_enc[i]
        if d_fbar is not None:
            grads[f"enc{i}"], d_inputs[i] = backward(model.encoders[i], cache.enc[i], d_fbar)
    if return_inputs:
        return grads, d_inputs
    return grads


def encode(model: FusionModel, batch) -> list[np.ndarray]:
    _check_batch(model, batch)
    out = []
    for i, x in enumerate(batch):
        z = model.encoders[i](x)
        if model.ebr is not None:
            z = model.ebr.hinv[i](model.ebr.h[i](z))
        out.append(z)
    return out


def fuse_predict(model: FusionModel, batch, encodings=None):
    """Return ``(fused, logits)``; ``encodings`` may replace ``encode(batch)``."""
    codes = encode(model, batch) if encodings is None else encodings
    fused = model.fusion(fuse_encodings(model, codes))
    return fused, model.classifier(fused)


def ebr_latent(model: FusionModel, batch, i: int) -> np.ndarray:
    if model.ebr is None:
        raise StateError("EBR is not attached")
    if not 0 <= i < model.m:
        raise ConfigurationError(f"modality {i} out of range")
    return model.ebr.h[i](model.encoders[i](batch[i]))


def decode_latent(model: FusionModel, latent, i: int) -> np.ndarray:
    """``hinv_i`` applied to an EBR latent (possibly from another modality)."""
    if model.ebr is None:
        raise StateError("EBR is not attached")
    return model.ebr.hinv[i](latent)


def discriminate(model: FusionModel, latents) -> np.ndarray:
    if model.ebr is None:
        raise StateError("EBR is not attached")
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[1] != model.ebr.latent_dim:
        raise ConfigurationError(
            f"latents must have {model.ebr.latent_dim} columns, got {latents.shape}")
    return model.ebr.psi(latents)


def predict(model: FusionModel, batch) -> np.ndarray:
    return np.argmax(fuse_predict(model, batch)[1], axis=1)

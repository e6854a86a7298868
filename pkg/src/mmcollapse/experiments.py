"""Registered experiments. Each returns, for one seed, rows per series."""

from __future__ import annotations

import numpy as np

from mmcollapse import diagnostics as diag
from mmcollapse.fusionmodel import encode, forward_cache, fuse_predict
from mmcollapse.harness import Experiment, SeriesSpec, initial_model, register
from mmcollapse.neurocore import effective_rank, softmax
from mmcollapse.probes import fit_logistic, logistic_loss
from mmcollapse.substitution import (POLICIES, TABLE_RATES, SubstitutionPolicy,
                                     evaluate_missingness, fit_policy, macro_auc,
                                     rank_modalities)
from mmcollapse.trainers import KD_SEQUENCES, TrainConfig

DESK = {"epochs": 300, "n_train": 4000, "n_test": 1000}
MODES = ("vanilla", "kd", "ebr")


def _cfg(p, mode, seed, **kw) -> TrainConfig:
    return TrainConfig(mode=mode, epochs=int(p["epochs"]), seed=seed, **kw)


def _run(bench, p, m, seed, mode="vanilla", keep=None, **kw):
    return bench.run(m, seed, _cfg(p, mode, seed, **kw), p["n_train"], p["n_test"], keep)


def accuracy(model, ds) -> float:
    _, logits = fuse_predict(model, ds.modalities)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def auc(model, ds) -> float:
    _, logits = fuse_predict(model, ds.modalities)
    return macro_auc(ds.labels, softmax(logits), ds.num_classes)


def weakest(ds) -> int:
    return ds.strength_order()[0]


def prefix_probe_loss(model, train, test, i) -> float:
    """Held-out CE of a linear probe fitted on modality i's encodings."""
    probe = fit_logistic(encode(model, train.modalities)[i], train.labels, train.num_classes)
    return logistic_loss(probe, encode(model, test.modalities)[i], test.labels)


def fused_rank(model, ds) -> int:
    return effective_rank(forward_cache(model, ds.modalities).fused)


# --- collisions and entanglement ---------------------------------------------------------

def collision_rows(bench, seed, p):
    rows = []
    for m in p["ms"]:
        r = _run(bench, p, m, seed)
        feats = diag.layer_features(r.model, r.test, "fusion.0")
        w = diag.layer_weight(r.model, "fusion.0")
        ent = diag.entanglement_ratio_of(w, feats, p["tau"])
        rows.append({"m": m,
                     "bound": diag.collision_bound(m, r.model.encoding_dims),
                     "empirical_fraction": diag.collision_fraction_of(w, feats, p["tau"]),
                     "entanglement_ratio": ent.ratio,
                     "entanglement_rows": ent.count,
                     "interference": diag.interference_score(r.model, r.test)})
    return {"collisions": rows}


register(Experiment(
    "lemma1_collisions", "cross-modal collision bound vs measured fraction over m",
    {**DESK, "ms": (2, 3, 4, 5), "tau": diag.TAU_ENC},
    {"collisions": SeriesSpec(("m",), ("bound", "empirical_fraction", "entanglement_ratio",
                                       "entanglement_rows", "interference"))},
    collision_rows))


# --- multimodal prefix vs unimodal baseline --------------------------------

def prefix_gap_rows(bench, seed, p):
    rows = []
    for m in p["ms"]:
        van = _run(bench, p, m, seed)
        base = _run(bench, p, m, seed, beta=float(p["baseline_beta"]))
        w = weakest(van.train)
        pre = prefix_probe_loss(van.model, van.train, van.test, w)
        uni = prefix_probe_loss(base.model, base.train, base.test, w)
        rows.append({"m": m, "prefix_loss": pre, "baseline_loss": uni, "gap": pre - uni,
                     "prefix_cka": van.trace.records[-1].cka[w]})
    return {"gap": rows}


register(Experiment(
    "fig3_loss_gap", "weakest-modality probe loss: multimodal prefix vs unimodal baseline",
    {**DESK, "ms": (2, 3, 4, 5), "baseline_beta": 1.0},
    {"gap": SeriesSpec(("m",), ("prefix_loss", "baseline_loss", "gap", "prefix_cka"))},
    prefix_gap_rows))


# --- fused rank vs beta ---------------------------------------------------

def rank_beta_rows(bench, seed, p):
    m = p["m"]
    rows = []
    for mode, betas in (("vanilla", p["vanilla_betas"]), ("kd", p["kd_betas"]),
                        ("ebr", p["ebr_betas"])):
        for b in betas:
            r = _run(bench, p, m, seed, mode, beta=float(b))
            w = weakest(r.train)
            cka = r.trace.records[-1].cka
            strong = r.train.strength_order()[-1]
            rows.append({"mode": mode, "beta": float(b), "rank": fused_rank(r.model, r.test),
                         "accuracy": accuracy(r.model, r.test), "cka_weak": cka[w],
                         "cka_strong": cka[strong]})
    tr, _ = bench.dataset(m, seed, p["n_train"], p["n_test"])
    w = weakest(tr)
    uni = _run(bench, p, m, seed, keep=(w,))
    base = [{"kind": "unimodal_fused", "rank": fused_rank(uni.model, uni.test)},
            {"kind": "unimodal_encoder",
             "rank": effective_rank(encode(uni.model, uni.test.modalities)[0])}]
    return {"rank": rows, "baseline": base}


register(Experiment(
    "fig4_rank_beta", "fused-representation rank against beta for each training regime",
    {**DESK, "m": 2, "vanilla_betas": (0, 2, 4, 6, 8), "kd_betas": (0, 2, 4, 6, 8),
     "ebr_betas": (0, 2, 4, 6, 8)},
    {"rank": SeriesSpec(("mode", "beta"), ("rank", "accuracy", "cka_weak", "cka_strong")),
     "baseline": SeriesSpec(("kind",), ("rank",))},
    rank_beta_rows))


# --- loss dynamics --------------------------------------------------------

def dynamics_rows(bench, seed, p):
    loss, final = [], []
    for mode in p["modes"]:
        r = _run(bench, p, p["m"], seed, mode)
        for rec in r.trace.records:
            loss.append({"mode": mode, "epoch": rec.epoch, "sem_loss": rec.sem_loss,
                         "md_loss": rec.md_loss})
        final.append({"mode": mode, "sem_loss": r.trace.records[-1].sem_loss,
                      "accuracy": accuracy(r.model, r.test)})
    return {"loss": loss, "final": final}


register(Experiment(
    "fig5_dynamics", "semantic loss trajectories of vanilla, KD and EBR training",
    {**DESK, "m": 3, "modes": MODES},
    {"loss": SeriesSpec(("mode", "epoch"), ("sem_loss", "md_loss")),
     "final": SeriesSpec(("mode",), ("sem_loss", "accuracy"))},
    dynamics_rows))


# --- training noise on the weakest modality ----------------------------------

def denoising_rows(bench, seed, p):
    rows = []
    for mode in p["modes"]:
        for rate in p["noise_rates"]:
            r = _run(bench, p, p["m"], seed, mode, noise_rate=float(rate))
            rows.append({"mode": mode, "noise_rate": float(rate),
                         "accuracy": accuracy(r.model, r.test), "auc": auc(r.model, r.test)})
    return {"accuracy": rows}


register(Experiment(
    "fig6_denoising", "test accuracy after corrupting the weakest modality during training",
    {**DESK, "m": 2, "modes": MODES, "noise_rates": (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)},
    {"accuracy": SeriesSpec(("mode", "noise_rate"), ("accuracy", "auc"))},
    denoising_rows))


# --- distillation sequence ------------------------------------------------

def kd_sequence_rows(bench, seed, p):
    rows = []
    for seq in p["sequences"]:
        r = _run(bench, p, p["m"], seed, "kd", kd_sequence=seq)
        last = r.trace.extras["kd_alignment"][-1]["cosine"]
        rows.append({"sequence": seq, "accuracy": accuracy(r.model, r.test),
                     "auc": auc(r.model, r.test), "final_alignment": float(np.mean(last))})
    return {"sequence": rows}


register(Experiment(
    "tab5_kd_sequence", "final accuracy for each teacher sequence",
    {**DESK, "m": 3, "sequences": KD_SEQUENCES},
    {"sequence": SeriesSpec(("sequence",), ("accuracy", "auc", "final_alignment"))},
    kd_sequence_rows))


# --- missing modalities at test time ----------------------------------------

def _policy(name, seed):
    if name == "train_average_cls":
        return SubstitutionPolicy("train_average", class_conditional=True, seed=seed)
    return SubstitutionPolicy(name, seed=seed)


def substitution_rows(bench, seed, p):
    r = _run(bench, p, p["m"], seed, "ebr")
    ranking = rank_modalities(r.model, r.train)
    per_rate, summary = [], []
    for name in p["policies"]:
        pol = fit_policy(_policy(name, seed), r.model, r.train)
        res = evaluate_missingness(r.model, r.test, p["rates"], pol, ranking, seed=seed)
        for row in res.rows():
            per_rate.append({**row, "policy": name})
        summary.append({"policy": name, "mean_accuracy": res.accuracy_mean,
                        "std_accuracy": res.accuracy_std, "mean_auc": res.auc_mean,
                        "std_auc": res.auc_std})
    return {"per_rate": per_rate, "summary": summary}


register(Experiment(
    "tab6_substitution", "masked test accuracy per substitution policy",
    {**DESK, "m": 4, "rates": TABLE_RATES,
     "policies": tuple(POLICIES) + ("train_average_cls",)},
    {"per_rate": SeriesSpec(("policy", "rate"), ("accuracy", "auc")),
     "summary": SeriesSpec(("policy",), ("mean_accuracy", "std_accuracy", "mean_auc",
                                         "std_auc"))},
    substitution_rows))


# --- multicollinearity -------------------------------------------------

def vif_rows(bench, seed, p):
    rows = []
    for mode, ms in (("vanilla", p["vanilla_ms"]), ("kd", p["kd_ms"]), ("ebr", p["ebr_ms"])):
        for m in ms:
            r = _run(bench, p, m, seed, mode)
            rep = forward_cache(r.model, r.test.modalities).fused
            rows.append({"mode": mode, "m": m, "vif": diag.vif_mean(rep)})
    return {"vif": rows}


register(Experiment(
    "tab7_vif", "mean VIF of the fused representation",
    {**DESK, "vanilla_ms": (2, 3, 4, 5), "kd_ms": (2, 3, 4, 5), "ebr_ms": (2, 3, 4, 5)},
    {"vif": SeriesSpec(("mode", "m"), ("vif",))},
    vif_rows))


# --- weight-space modality classifier --------------------------------------

def fusion_update(run, seed, mode, keep=None) -> np.ndarray:
    """First fusion-layer weights minus their initial values. Reference
    models share the fusion init, so raw rows mostly encode that init."""
    init = initial_model(run.train, seed, mode, keep).fusion.layers[0].weight
    return run.model.fusion.layers[0].weight - init


def unimodal_reference_rows(bench, p, m, seed) -> list[np.ndarray]:
    """Fusion-layer updates of unimodal models, one model per modality."""
    return [fusion_update(_run(bench, p, m, seed, keep=(i,)), seed, "vanilla", (i,))
            for i in range(m)]


def weight_probe_rows(bench, seed, p):
    m = p["m"]
    samples = unimodal_reference_rows(bench, p, m, seed)
    clf = diag.train_weight_classifier(samples, seed)
    rows = []
    for mode in p["modes"]:
        r = _run(bench, p, m, seed, mode)
        ce = diag.modality_probe_ce(samples, fusion_update(r, seed, mode),
                                    r.model.encoding_dims, seed, classifier=clf)
        rows.append({"mode": mode, "ce": ce})
    return {"probe_ce": rows}


register(Experiment(
    "tab9_polysemanticity", "modality-classifier CE on fusion-head weight updates",
    {**DESK, "m": 2, "modes": MODES},
    {"probe_ce": SeriesSpec(("mode",), ("ce",))},
    weight_probe_rows))


# --- gradient rank ------------------------------------------------------

def gradrank_rows(bench, seed, p):
    layers, trace_rows = [], []
    for m in p["ms"]:
        r = _run(bench, p, m, seed)
        res = diag.gradient_rank_trace(r.trace, diag.agop_ranks(r.model, r.test))
        for layer, seq in res["ranks"].items():
            layers.append({"m": m, "layer": layer, "first_rank": seq[0], "final_rank": seq[-1],
                           "agop_rank": res["agop_rank"].get(layer),
                           "ratio": res["ratio"].get(layer)})
            for e, rank in enumerate(seq):
                if e % p["trace_every"] == 0 or e == len(seq) - 1:
                    trace_rows.append({"m": m, "layer": layer, "epoch": e, "rank": rank})
    return {"layers": layers, "trace": trace_rows}


register(Experiment(
    "lemma2_gradrank", "effective rank of per-epoch accumulated gradients",
    {**DESK, "ms": (2, 3, 4, 5), "trace_every": 10},
    {"layers": SeriesSpec(("m", "layer"), ("first_rank", "final_rank", "agop_rank", "ratio")),
     "trace": SeriesSpec(("m", "layer", "epoch"), ("rank",))},
    gradrank_rows))


# --- AGOP gaps ----------------------------------------------------

def probe_gaps(model, ds, epoch, tau):
    """(gamma, gap, bound, cross_modal) for every feature and pair probe."""
    feats = diag.layer_features(model, ds, "fusion.0")
    a = diag.agop(model, ds, "fusion.0")
    out = []
    for probe, g in diag.feature_probes(feats, tau):
        gap, bound = diag.agop_gap(probe, a, g, epoch + 1)
        out.append((g, gap, bound, len(probe.members) == 2))
    return out


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def agop_gap_rows(bench, seed, p):
    r = _run(bench, p, p["m"], seed)
    rows = []
    for epoch in sorted(r.snapshots):
        res = probe_gaps(r.snapshots[epoch], r.test, epoch, p["tau"])
        for group, pick in (("gamma_1", lambda g: g == 1.0), ("gamma_ge_2", lambda g: g >= 2.0)):
            sel = [x for x in res if pick(x[0])]
            rows.append({"epoch": epoch, "group": group, "gap": _mean([x[1] for x in sel]),
                         "bound": _mean([x[2] for x in sel]), "count": len(sel)})
    return {"gap": rows}


register(Experiment(
    "thm2_agop_gap", "AGOP gap of monosemantic vs polysemantic probes over training",
    {**DESK, "m": 5, "tau": diag.TAU_ENC},
    {"gap": SeriesSpec(("epoch", "group"), ("gap", "bound", "count"))},
    agop_gap_rows))


def kd_gap_rows(bench, seed, p):
    rows, kappa = [], []
    for mode in p["modes"]:
        r = _run(bench, p, p["m"], seed, mode)
        last = None
        for epoch in sorted(r.snapshots):
            res = probe_gaps(r.snapshots[epoch], r.test, epoch, p["tau"])
            sel = [x[1] for x in res if x[3] and x[0] >= 2.0]
            last = _mean(sel)
            rows.append({"mode": mode, "epoch": epoch, "gap": last, "count": len(sel)})
        kappa.append({"mode": mode, "kappa": last})
    return {"gap": rows, "kappa": kappa}


register(Experiment(
    "thm3_kd_gap", "AGOP gap of cross-modal polysemantic probes under KD vs vanilla",
    {**DESK, "m": 5, "modes": ("vanilla", "kd"), "tau": diag.TAU_ENC},
    {"gap": SeriesSpec(("mode", "epoch"), ("gap", "count")),
     "kappa": SeriesSpec(("mode",), ("kappa",))},
    kd_gap_rows))

"""Independent reference computations used by the tests.

The torch oracle rebuilds the fusion model from its raw weight arrays and
derives every gradient with autograd, so it shares no code with the numpy
backward passes under test.
"""

from __future__ import annotations

import numpy as np
import torch

from mmcollapse.fusionmodel import FusionModel

torch.set_default_dtype(torch.float64)


def leaves(model: FusionModel) -> dict:
    """module name -> list of (W, b) torch leaves requiring grad."""
    out = {}
    for name, mlp in model.modules().items():
        out[name] = [(torch.tensor(l.weight, requires_grad=True),
                      torch.tensor(l.bias, requires_grad=True)) for l in mlp.layers]
    return out


def _mlp(params, acts, x):
    for (w, b), act in zip(params, acts):
        x = x @ w.T + b
        if act == "relu":
            x = torch.relu(x)
    return x


def torch_losses(model: FusionModel, params: dict, xs, y, beta=0.0, probe=None, weak=0):
    """(L_sem, L_md or None, probe CE or None) as torch scalars."""
    act = {name: [l.activation for l in mlp.layers] for name, mlp in model.modules().items()}
    codes, lat = [], []
    for i, x in enumerate(xs):
        z = _mlp(params[f"enc{i}"], act[f"enc{i}"], torch.tensor(x))
        if model.ebr is not None:
            g = _mlp(params[f"h{i}"], act[f"h{i}"], z)
            lat.append(g)
            z = _mlp(params[f"hinv{i}"], act[f"hinv{i}"], g)
        codes.append(z)
    fused_in = torch.cat(codes, dim=1) if model.fusion_kind == "concat" else sum(codes) / len(codes)
    fused = _mlp(params["fusion"], act["fusion"], fused_in)
    logits = _mlp(params["classifier"], act["classifier"], fused)
    yt = torch.tensor(np.asarray(y), dtype=torch.long)
    sem = torch.nn.functional.cross_entropy(logits, yt)
    md = None
    if model.ebr is not None:
        md = 0.0
        for i, g in enumerate(lat):
            out = _mlp(params["psi"], act["psi"], g)
            md = md + torch.nn.functional.cross_entropy(
                out, torch.full((g.shape[0],), i, dtype=torch.long))
    pce = None
    if probe is not None:
        pp = [(torch.tensor(l.weight), torch.tensor(l.bias)) for l in probe.layers]
        pce = torch.nn.functional.cross_entropy(
            _mlp(pp, [l.activation for l in probe.layers], codes[weak]), yt)
    return sem, md, pce


def grads_of(loss, params: dict) -> dict:
    names = list(params)
    flat = [t for n in names for pair in params[n] for t in pair]
    gs = torch.autograd.grad(loss, flat, allow_unused=True, retain_graph=True)
    out, k = {}, 0
    for n in names:
        out[n] = []
        for w, b in params[n]:
            gw, gb = gs[k], gs[k + 1]
            k += 2
            out[n].append((np.zeros(w.shape) if gw is None else gw.numpy(),
                           np.zeros(b.shape) if gb is None else gb.numpy()))
    return out


def ebr_expected_update(model: FusionModel, xs, y, phase: str, md_weight: float = 1.0) -> dict:
    """Per-module update directions from the three EBR rules.

    psi descends L_md; g_i = h_i . fbar_i descends L_sem and ascends L_md;
    hinv_i, the fusion head and the classifier descend L_sem.
    """
    p = leaves(model)
    sem, md, _ = torch_losses(model, p, xs, y)
    g_sem = grads_of(sem, p)
    g_md = grads_of(md, p)
    expected = {}
    m = model.m
    use_sem = phase in ("sem", "both")
    use_md = phase in ("md", "both")
    for name in p:
        parts = []
        if name == "psi":
            if use_md:
                parts.append(g_md[name])
        elif name.startswith(("enc", "h")) and not name.startswith("hinv"):
            if use_sem:
                parts.append(g_sem[name])
            if use_md:
                parts.append([(-md_weight * a, -md_weight * b) for a, b in g_md[name]])
        else:  # hinv, fusion, classifier
            if use_sem:
                parts.append(g_sem[name])
        if parts:
            acc = parts[0]
            for extra in parts[1:]:
                acc = [(a + c, b + d) for (a, b), (c, d) in zip(acc, extra)]
            expected[name] = acc
    assert len([n for n in p if n.startswith("enc")]) == m
    return expected


def max_abs_deviation(update: dict, expected: dict) -> float:
    """Largest elementwise gap; modules present in only one dict count as
    deviating by their largest entry."""
    worst = 0.0
    for name in set(update) | set(expected):
        a = update.get(name)
        b = expected.get(name)
        if a is None or b is None:
            other = a if a is not None else b
            worst = max(worst, max(float(np.abs(t).max()) for pair in other for t in pair))
            continue
        for (wa, ba), (wb, bb) in zip(a, b):
            worst = max(worst, float(np.abs(wa - wb).max()), float(np.abs(ba - bb).max()))
    return worst


# --- finite differences -----------------------------------------------------------

def perturbed(model: FusionModel, direction: dict, eps: float) -> FusionModel:
    from dataclasses import replace
    mods = {}
    for name, mlp in model.modules().items():
        if name not in direction:
            continue
        layers = [replace(l, weight=l.weight + eps * dw, bias=l.bias + eps * db)
                  for l, (dw, db) in zip(mlp.layers, direction[name])]
        mods[name] = type(mlp)(layers)
    return model.with_modules(mods)


def random_direction(model: FusionModel, names, rng: np.random.Generator) -> dict:
    return {n: [(rng.standard_normal(l.weight.shape), rng.standard_normal(l.bias.shape))
                for l in model.modules()[n].layers] for n in names}


def inner(grads: list, direction: list) -> float:
    return float(sum(np.sum(gw * dw) + np.sum(gb * db)
                     for (gw, gb), (dw, db) in zip(grads, direction)))


def central_difference(loss_of_model, model, direction, eps=1e-6) -> float:
    return (loss_of_model(perturbed(model, direction, eps))
            - loss_of_model(perturbed(model, direction, -eps))) / (2 * eps)


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-10)


def fd_mlp_gradient(loss_of_mlp, mlp, eps: float = 1e-6) -> list:
    """Coordinate-wise central differences for every parameter of ``mlp``."""
    from dataclasses import replace
    out = []
    for li, layer in enumerate(mlp.layers):
        pair = []
        for attr in ("weight", "bias"):
            base = getattr(layer, attr)
            g = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                vals = []
                for sign in (1, -1):
                    moved = base.copy()
                    moved[idx] += sign * eps
                    layers = list(mlp.layers)
                    layers[li] = replace(layer, **{attr: moved})
                    vals.append(loss_of_mlp(type(mlp)(layers)))
                g[idx] = (vals[0] - vals[1]) / (2 * eps)
            pair.append(g)
        out.append(tuple(pair))
    return out


def fd_gradient(loss_of_model, model: FusionModel, name: str, eps: float = 1e-6) -> list:
    return fd_mlp_gradient(lambda mlp: loss_of_model(model.with_modules({name: mlp})),
                           model.modules()[name], eps)


def vector_rel_error(a: list, b: list, floor: float = 1e-4) -> float:
    """||a - b|| / max(||a||, ||b||, floor) over all (dW, db) entries.

    The floor turns the check into an absolute one (error below 1e-8) for
    gradients that vanish analytically, where differences only see roundoff.
    """
    fa = np.concatenate([np.ravel(t) for pair in a for t in pair])
    fb = np.concatenate([np.ravel(t) for pair in b for t in pair])
    scale = max(np.linalg.norm(fa), np.linalg.norm(fb), floor)
    return float(np.linalg.norm(fa - fb) / scale)


# --- spectral and scalar oracles ---------------------------------------------------

def jacobi_singular_values(a, sweeps: int = 60) -> np.ndarray:
    """One-sided Jacobi SVD (Hestenes); singular values in descending order."""
    u = np.array(a, dtype=np.float64, copy=True)
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gam = u[:, p] @ u[:, q]
                if abs(gam) <= 1e-15 * np.sqrt(alpha * beta) or gam == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gam)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
        if not rotated:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1]


def scalar_forward(layers, x):
    """Loop-by-loop forward pass with Python floats."""
    h = [float(v) for v in x]
    for w, b, act in layers:
        out = []
        for r in range(len(w)):
            z = float(b[r]) + sum(float(w[r][c]) * h[c] for c in range(len(h)))
            out.append(max(z, 0.0) if act == "relu" else z)
        h = out
    return h

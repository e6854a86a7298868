"""Command-line entry point: ``mmcollapse <command> [flags]``.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from mmcollapse.errors import MMCollapseError, UsageError

DEFAULTS = {"seed": 1, "seeds": (1, 2, 3, 4, 5), "epochs": 300, "beta": 0.0, "mode": "vanilla",
            "kd_sequence": "weakest_to_strongest", "noise_rate": 0.0, "out": "results",
            "m": 2, "n_train": 4000, "n_test": 1000, "layer": "fusion.0",
            "policy": "ebr_ranked", "rates": (0.1, 0.2, 0.3, 0.4, 0.7), "cache": None}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmcollapse", description="Modality-collapse experiments on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        # None marks "not given" so config values can fill in
        sp.add_argument("--config", default=None, help="flat key = value file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)

    def training(sp):
        sp.add_argument("--m", type=int, default=None, help="number of modalities")
        sp.add_argument("--n-train", type=int, default=None)
        sp.add_argument("--n-test", type=int, default=None)
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--beta", type=float, default=None)
        sp.add_argument("--mode", choices=("vanilla", "kd", "ebr"), default=None)
        sp.add_argument("--kd-sequence", default=None)
        sp.add_argument("--noise-rate", type=float, default=None)

    sub.add_parser("list", help="list registered experiments")

    r = sub.add_parser("run", help="run a registered experiment over seeds")
    r.add_argument("experiment")
    common(r)
    r.add_argument("--seeds", type=_seeds, default=None)
    r.add_argument("--epochs", type=int, default=None)
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override an experiment parameter")
    r.add_argument("--cache", default=None, help="directory for trained-model cache")

    t = sub.add_parser("train", help="train one model and write a checkpoint")
    common(t)
    training(t)

    d = sub.add_parser("diagnose", help="diagnostics report for a trained checkpoint")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--layer", default=None)

    s = sub.add_parser("substitute", help="masked-test evaluation of a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--policy", default=None)
    s.add_argument("--rates", type=_floats, default=None)

    g = sub.add_parser("gen-data", help="write the synthetic dataset as CSV")
    common(g)
    g.add_argument("--m", type=int, default=None)
    g.add_argument("--n-train", type=int, default=None)
    g.add_argument("--n-test", type=int, default=None)
    return p


def _settings(args) -> dict:
    """Defaults, then config file, then explicit flags."""
    from mmcollapse.harness import load_config
    out = dict(DEFAULTS)
    extra = {}
    if getattr(args, "config", None):
        for k, v in load_config(args.config).items():
            (out if k in DEFAULTS else extra)[k] = v
    for k, v in vars(args).items():
        if v is not None and k in DEFAULTS:
            out[k] = v
    if isinstance(out["seeds"], int):
        out["seeds"] = (out["seeds"],)
    if isinstance(out["rates"], (int, float)):
        out["rates"] = (float(out["rates"]),)
    out["extra"] = extra
    return out


def _cmd_list(args, out) -> int:
    from mmcollapse.harness import registry
    for exp_id, exp in sorted(registry().items()):
        print(f"{exp_id}\t{exp.description}")
    return 0


def _cmd_run(args, s) -> int:
    from mmcollapse.harness import ExperimentSpec, emit, parse_value, run, write_partial
    overrides = dict(s["extra"])
    if args.epochs is not None or "epochs" in overrides or s["epochs"] != DEFAULTS["epochs"]:
        overrides["epochs"] = s["epochs"]
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip().replace("-", "_")] = parse_value(v.strip())
    spec = ExperimentSpec(args.experiment, s["seeds"], overrides)
    bundle = run(spec, cache_dir=s["cache"])
    if not bundle.complete:
        path = write_partial(bundle, s["out"])
        print(f"run incomplete ({bundle.errors}); partial bundle at {path}", file=sys.stderr)
        return 1
    for path in emit(bundle, s["out"]):
        print(path)
    return 0


def _train_config(s):
    from mmcollapse.trainers import TrainConfig
    return TrainConfig(mode=s["mode"], epochs=int(s["epochs"]), beta=float(s["beta"]),
                       kd_sequence=s["kd_sequence"], noise_rate=float(s["noise_rate"]),
                       seed=int(s["seed"]))


def _cmd_train(args, s) -> int:
    from mmcollapse.fusionmodel import predict
    from mmcollapse.harness import initial_model
    from mmcollapse.synthgen import desk_dataset
    from mmcollapse.trainers import checkpoint, train
    cfg = _train_config(s)
    tr, te = desk_dataset(int(s["m"]), int(s["seed"]), int(s["n_train"]), int(s["n_test"]))
    model = initial_model(tr, int(s["seed"]), cfg.mode)
    model, trace = train(model, tr, cfg)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    checkpoint(model, trace, out / "model.ckpt")
    acc = float(np.mean(predict(model, te.modalities) == te.labels))
    meta = {"m": int(s["m"]), "seed": int(s["seed"]), "n_train": int(s["n_train"]),
            "n_test": int(s["n_test"]), "train": cfg.to_dict(), "test_accuracy": acc}
    (out / "run.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    print(f"test accuracy {acc:.4f}; checkpoint {out / 'model.ckpt'}")
    return 0


def _load_run(path):
    """Checkpoint plus the dataset it was trained on (from ``run.json``)."""
    from mmcollapse.synthgen import desk_dataset
    from mmcollapse.trainers import restore
    ckpt = Path(path)
    meta_path = ckpt.parent / "run.json"
    if not meta_path.exists():
        raise UsageError(f"{meta_path} not found; checkpoints come from `train`")
    meta = json.loads(meta_path.read_text())
    model, trace = restore(ckpt)
    tr, te = desk_dataset(meta["m"], meta["seed"], meta["n_train"], meta["n_test"])
    return model, trace, tr, te


def _cmd_diagnose(args, s) -> int:
    from mmcollapse.diagnostics import diagnose
    model, _, _, te = _load_run(args.checkpoint)
    report = diagnose(model, te, layer=s["layer"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "diagnostics.json"
    path.write_text(report.to_json())
    print(f"collision bound {report.collision_bound:.4f}; "
          f"empirical fraction {report.empirical_collision_fraction:.4f}; {path}")
    return 0


def _cmd_substitute(args, s) -> int:
    from mmcollapse.harness import fmt
    from mmcollapse.substitution import (SubstitutionPolicy, evaluate_missingness,
                                         fit_policy, rank_modalities)
    model, _, tr, te = _load_run(args.checkpoint)
    policy = fit_policy(SubstitutionPolicy(s["policy"], seed=int(s["seed"])), model, tr)
    ranking = rank_modalities(model, tr) if model.ebr is not None else None
    res = evaluate_missingness(model, te, s["rates"], policy, ranking, seed=int(s["seed"]))
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"substitution_{res.policy}.csv"
    lines = ["rate,accuracy,auc"] + [f"{fmt(r)},{fmt(a)},{fmt(u)}"
                                     for r, a, u in zip(res.rates, res.accuracy, res.auc)]
    path.write_text("\n".join(lines) + "\n")
    print(f"{res.policy}: accuracy {res.accuracy_mean:.4f} +/- {res.accuracy_std:.4f}; {path}")
    return 0


def _cmd_gen_data(args, s) -> int:
    from mmcollapse.synthgen import desk_dataset, save_csv
    tr, te = desk_dataset(int(s["m"]), int(s["seed"]), int(s["n_train"]), int(s["n_test"]))
    out = Path(s["out"])
    for name, ds in (("train", tr), ("test", te)):
        for path in save_csv(ds, out / name):
            print(path)
    return 0


COMMANDS = {"list": _cmd_list, "run": _cmd_run, "train": _cmd_train,
            "diagnose": _cmd_diagnose, "substitute": _cmd_substitute,
            "gen-data": _cmd_gen_data}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        settings = _settings(args)
        return COMMANDS[args.command](args, settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (MMCollapseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

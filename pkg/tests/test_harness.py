import json
import subprocess
import sys

import numpy as np
import pytest

from mmcollapse.cli import main
from mmcollapse.errors import StateError, UsageError
from mmcollapse.harness import (ExperimentSpec, ResultBundle, Workbench, csv_text, emit, fmt,
                                parse_cell, parse_config, read_csv_series, registry, run)

IDS = {"fig3_loss_gap", "fig4_rank_beta", "fig5_dynamics", "fig6_denoising", "tab5_kd_sequence",
       "tab6_substitution", "tab7_vif", "tab9_polysemanticity", "lemma1_collisions",
       "lemma2_gradrank", "thm2_agop_gap", "thm3_kd_gap"}
TINY = {"epochs": 3, "n_train": 200, "n_test": 100, "ms": (2, 3)}


@pytest.fixture(scope="module")
def tiny_bundle():
    return run(ExperimentSpec("lemma1_collisions", (1, 2), TINY), bench=Workbench())


def test_registry_is_total():
    assert set(registry()) == IDS


def test_spec_validation():
    with pytest.raises(UsageError):
        ExperimentSpec("fig99")
    with pytest.raises(UsageError):
        ExperimentSpec("lemma1_collisions", ())
    with pytest.raises(UsageError):
        ExperimentSpec("lemma1_collisions", (1,), {"learning_rate": 1.0})


def test_bundle_content(tiny_bundle):
    b = tiny_bundle
    assert b.complete and b.seeds == [1, 2]
    rows = b.aggregate["collisions"]
    assert [r["m"] for r in rows] == [2, 3]
    assert rows[0]["bound_mean"] == 0.5 and rows[1]["bound_mean"] == pytest.approx(2 / 3)
    assert all(r["empirical_fraction_mean"] >= 0 for r in rows)
    assert b.provenance["seeds"] == [1, 2] and len(b.provenance["config_hash"]) == 64


def test_aggregate_reproducible_from_raw(tiny_bundle):
    b = tiny_bundle
    vals = [r["empirical_fraction"] for r in b.raw["collisions"] if r["m"] == 3]
    row = [r for r in b.aggregate["collisions"] if r["m"] == 3][0]
    assert row["empirical_fraction_mean"] == pytest.approx(np.mean(vals))
    assert row["empirical_fraction_std"] == pytest.approx(np.std(vals, ddof=1))


def test_cached_run_is_identical(tmp_path):
    spec = ExperimentSpec("lemma1_collisions", (1,), TINY)
    bench = Workbench(tmp_path)
    a = run(spec, bench=bench, cache_dir=tmp_path)
    trained = bench.trained_count
    b = run(spec, bench=bench, cache_dir=tmp_path)
    assert bench.trained_count == trained
    assert a.to_dict() == b.to_dict()


def test_emit_files_and_round_trip(tmp_path, tiny_bundle):
    files = {p.name for p in emit(tiny_bundle, tmp_path)}
    assert files == {"collisions.csv", "collisions_by_seed.csv", "bundle.json", "provenance.json"}
    header, rows = read_csv_series(tmp_path / "lemma1_collisions" / "collisions.csv")
    assert header == tiny_bundle.columns("collisions")
    assert rows == tiny_bundle.table("collisions")
    back = ResultBundle.from_dict(json.loads(
        (tmp_path / "lemma1_collisions" / "bundle.json").read_text()))
    assert back.table("collisions") == rows
    text = (tmp_path / "lemma1_collisions" / "collisions.csv").read_text()
    assert tiny_bundle.provenance["config_hash"] in text and "# seeds=1,2" in text


def test_column_headers_fixed(tiny_bundle):
    assert tiny_bundle.columns("collisions") == [
        "m", "bound_mean", "bound_std", "empirical_fraction_mean", "empirical_fraction_std",
        "entanglement_ratio_mean", "entanglement_ratio_std", "entanglement_rows_mean",
        "entanglement_rows_std", "interference_mean", "interference_std", "n_seeds"]


def test_number_format_round_trips():
    for v in (0.1, 1 / 3, 2.0 ** -40, 123456789.123456789, 0.0):
        assert float(fmt(v)) == v
        assert parse_cell(fmt(v)) == v
    assert fmt(1 / 3) == "0.33333333333333331"


def test_incomplete_bundle_refused(tmp_path, tiny_bundle):
    broken = ResultBundle.from_dict({**tiny_bundle.to_dict(), "complete": False,
                                     "errors": [{"seed": 2, "error": "boom"}]})
    with pytest.raises(StateError):
        emit(broken, tmp_path)


def test_failing_seed_gives_partial_bundle(monkeypatch, tmp_path):
    from dataclasses import replace
    from mmcollapse import harness
    exp = registry()["lemma1_collisions"]

    def flaky(bench, seed, params):
        if seed == 2:
            raise RuntimeError("disk full")
        return exp.fn(bench, seed, params)

    monkeypatch.setitem(harness.REGISTRY, exp.id, replace(exp, fn=flaky))
    b = run(ExperimentSpec("lemma1_collisions", (1, 2), TINY), bench=Workbench())
    assert not b.complete and b.errors == [{"seed": 2, "error": "RuntimeError: disk full"}]
    assert {r["seed"] for r in b.raw["collisions"]} == {1}
    with pytest.raises(StateError):
        emit(b, tmp_path)


def test_parse_config():
    cfg = parse_config("# comment\nepochs = 5\nnoise-rate = 0.25  # inline\nseeds = 1, 2\n"
                       "mode = ebr\nflag = true\n")
    assert cfg == {"epochs": 5, "noise_rate": 0.25, "seeds": (1, 2), "mode": "ebr", "flag": True}
    with pytest.raises(UsageError):
        parse_config("epochs = 1\nepochs = 2\n")
    with pytest.raises(UsageError):
        parse_config("just words\n")


def test_cli_list(capsys):
    assert main(["list"]) == 0
    listed = {line.split("\t")[0] for line in capsys.readouterr().out.splitlines()}
    assert listed == IDS


def test_cli_run_writes_bundle(tmp_path):
    out = tmp_path / "results"
    argv = ["run", "lemma1_collisions", "--seeds", "1,2", "--out", str(out), "--epochs", "2",
            "--set", "n_train=200", "--set", "n_test=100", "--set", "ms=2,3"]
    assert main(argv) == 0
    d = out / "lemma1_collisions"
    assert (d / "collisions.csv").exists() and (d / "bundle.json").exists()
    assert json.loads((d / "provenance.json").read_text())["seeds"] == [1, 2]


def test_cli_flags_override_config(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 2\nm = 2\nn_train = 150\nn_test = 50\nseed = 3\nbeta = 1.0\n")
    out = tmp_path / "t"
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--out", str(out)]) == 0
    meta = json.loads((out / "run.json").read_text())
    assert meta["train"]["epochs"] == 1          # flag wins
    assert meta["train"]["beta"] == 1.0          # config fills the rest
    assert meta["seed"] == 3 and meta["n_train"] == 150


def test_cli_train_diagnose_substitute_gen(tmp_path):
    t = tmp_path / "t"
    common = ["--m", "2", "--epochs", "1", "--n-train", "150", "--n-test", "60"]
    assert main(["train", "--mode", "ebr", "--seed", "2", "--out", str(t), *common]) == 0
    ckpt = str(t / "model.ckpt")
    assert main(["diagnose", "--checkpoint", ckpt, "--out", str(t)]) == 0
    assert json.loads((t / "diagnostics.json").read_text())["collision_bound"] == 0.5
    assert main(["substitute", "--checkpoint", ckpt, "--rates", "0.1,0.3", "--out", str(t)]) == 0
    assert (t / "substitution_ebr_ranked.csv").read_text().startswith("rate,accuracy,auc\n")
    g = tmp_path / "g"
    assert main(["gen-data", "--m", "2", "--n-train", "20", "--n-test", "10", "--out", str(g)]) == 0
    assert (g / "train" / "modality_1.csv").exists()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["list", "--bogus"]) == 2
    assert main(["run", "nope"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["train", "--mode", "sideways"]) == 2
    missing = tmp_path / "nothing" / "model.ckpt"
    assert main(["diagnose", "--checkpoint", str(missing)]) == 2
    (tmp_path / "run.json").write_text(json.dumps({"m": 2, "seed": 1, "n_train": 10, "n_test": 5}))
    (tmp_path / "model.ckpt").write_bytes(b"garbage")
    assert main(["diagnose", "--checkpoint", str(tmp_path / "model.ckpt")]) == 1
    assert "usage error" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mmcollapse", "list"], capture_output=True,
                         text=True, check=False)
    assert res.returncode == 0 and "thm3_kd_gap" in res.stdout


@pytest.mark.parametrize("exp_id", sorted(IDS))
def test_every_experiment_runs_at_tiny_scale(exp_id):
    exp = registry()[exp_id]
    over = {"epochs": 2, "n_train": 150, "n_test": 60}
    for key in exp.defaults:
        if key.endswith("ms"):
            over[key] = (2,)
        elif key == "m" and exp_id != "tab6_substitution":  # rate 0.7 needs m >= 4
            over[key] = 2
    b = run(ExperimentSpec(exp_id, (1,), over), bench=Workbench())
    assert b.complete, b.errors
    for series, spec in exp.series.items():
        assert b.aggregate[series], series
        assert b.columns(series)[:len(spec.keys)] == list(spec.keys)
    if exp_id == "fig4_rank_beta":
        modes = {r["mode"] for r in b.aggregate["rank"]}
        betas = sorted({r["beta"] for r in b.aggregate["rank"]})
        assert modes == {"vanilla", "kd", "ebr"} and betas == [0, 2, 4, 6, 8]
        assert {r["kind"] for r in b.aggregate["baseline"]} == {"unimodal_fused", "unimodal_encoder"}

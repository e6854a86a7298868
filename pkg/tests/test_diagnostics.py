import warnings
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mmcollapse import diagnostics as diag
from mmcollapse.errors import ConfigurationError, InputError, StateError
from mmcollapse.fusionmodel import forward_cache
from mmcollapse.harness import initial_model
from mmcollapse.neurocore import RandomStream
from mmcollapse.synthgen import desk_dataset, load_csv, save_csv
from mmcollapse.trainers import TrainConfig, train


@pytest.fixture(scope="module")
def trained():
    tr, te = desk_dataset(3, seed=1, n_train=500, n_test=300)
    model, trace = train(initial_model(tr, 1, "vanilla"), tr, TrainConfig(epochs=4, seed=1))
    return model, trace, tr, te


@pytest.mark.parametrize("m,dims", [(2, [16, 16]), (3, [16, 16, 16]), (2, [8, 24]), (4, [4, 8, 8, 12])])
def test_collision_bound_formula(m, dims):
    want = Fraction(m * (m - 1) * min(dims) ** 2, sum(dims) ** 2)
    assert diag.collision_bound(m, dims) == float(want)


def test_collision_bound_errors():
    with pytest.raises(InputError):
        diag.collision_bound(2, [])
    with pytest.raises(InputError):
        diag.collision_bound(3, [16, 16])


def _features(vectors, modalities, predictive=None):
    n = len(vectors)
    return diag.LayerFeatures("fusion.0", np.array(vectors, dtype=float), modalities,
                              predictive if predictive is not None else [True] * n, list(range(n)))


def test_polysemantic_rows_constructed():
    feats = _features([[1, 0, 0], [0, 1, 0], [0, 0, 1]], [0, 1, 1])
    w = np.array([[1.0, 0.0, 0.0],    # modality 0 only
                  [1.0, 0.9, 0.0],    # both modalities
                  [0.0, 1.0, 1.0],    # two features, one modality
                  [1.0, 0.3, 0.0]])   # second modality below tau
    np.testing.assert_array_equal(diag.polysemantic_rows(w, feats, 0.5), [False, True, False, False])
    assert diag.collision_fraction_of(w, feats, 0.5) == 0.25


def test_entanglement_sentinel_without_polysemantic_rows():
    feats = _features([[1, 0], [0, 1]], [0, 1], [True, False])
    res = diag.entanglement_ratio_of(np.eye(2), feats)
    assert res.ratio is None and res.count == 0 and not res.defined


def test_entanglement_ratio_constructed():
    feats = _features([[1, 0, 0], [0, 1, 0], [0, 0, 1]], [0, 1, 1], [True, True, False])
    w = np.array([[1.0, 1.0, 0.5]])
    cos = np.abs(w / np.linalg.norm(w))[0]
    res = diag.entanglement_ratio_of(w, feats)
    assert res.count == 1
    assert res.ratio == pytest.approx(cos[:2].mean() / cos[2])


def test_gamma_counts_features_near_probe():
    feats = _features([[1, 0], [0, 1], [np.sqrt(0.5), np.sqrt(0.5)]], [0, 1, 1])
    probe = diag.SubspaceProbe("fusion.0", np.array([[1.0], [0.0]]))
    assert diag.gamma(probe, feats, 0.5) == 2.0
    plane = diag.SubspaceProbe("fusion.0", np.eye(2))
    assert diag.gamma(plane, feats, 0.5) == 1.5


def test_probe_requires_orthonormal_basis():
    with pytest.raises(ConfigurationError):
        diag.SubspaceProbe("x", np.array([[1.0, 1.0], [0.0, 1.0]]))
    p = diag.SubspaceProbe.spanning("x", [[1.0, 1.0, 0.0], [1.0, 0.0, 0.0], [2.0, 2.0, 0.0]])
    assert p.dim == 2


def test_agop_of_layer_matches_autograd():
    s = RandomStream(3)
    w, b, x = s.normal(size=(5, 4)), s.normal(size=5), s.normal(size=(30, 4))
    got = diag.agop_of_layer(w, x, b, "relu")
    wt, bt = torch.tensor(w), torch.tensor(b)
    want = np.zeros((4, 4))
    for row in x:
        j = torch.autograd.functional.jacobian(lambda v: torch.relu(wt @ v + bt),
                                               torch.tensor(row)).numpy()
        want += j.T @ j
    np.testing.assert_allclose(got, want / len(x), atol=1e-12)


def test_agop_gap_direct_computation():
    s = RandomStream(4)
    a = s.normal(size=(6, 6))
    a = a @ a.T
    q, _ = np.linalg.qr(s.normal(size=(6, 2)))
    probe = diag.SubspaceProbe("x", q)
    gap, bound = diag.agop_gap(probe, a, gamma_value=4.0, epoch=2)
    want = np.linalg.norm(q @ q.T / 2 - a / np.trace(a))
    assert gap == pytest.approx(want, abs=1e-12)
    assert bound == pytest.approx(0.5)


def test_agop_gap_zero_on_matching_rank_one_agop():
    v = np.array([[0.6], [0.8], [0.0]])
    gap, bound = diag.agop_gap(diag.SubspaceProbe("x", v), 3.0 * v @ v.T)
    assert gap == pytest.approx(0.0, abs=1e-12) and bound is None


def test_layer_features_match_finite_differences(trained):
    model, _, _, te = trained
    ds = te.subset(np.arange(60))
    feats = diag.layer_features(model, ds, "fusion.1")
    eps = 1e-6
    for j, f in enumerate(ds.features()[:6]):
        def fusion1_input(sign):
            xs = list(ds.modalities)
            xs[f.modality] = xs[f.modality] + sign * eps * f.direction
            return forward_cache(model, xs).fusion[1]
        num = ((fusion1_input(1) - fusion1_input(-1)) / (2 * eps)).mean(axis=0)
        np.testing.assert_allclose(feats.vectors[j], num, atol=1e-6)


def test_layer_features_raw_at_encoder_input(trained):
    model, _, _, te = trained
    feats = diag.layer_features(model, te, "enc1.0")
    want = np.array([f.direction for f in te.features() if f.modality == 1])
    np.testing.assert_array_equal(feats.vectors, want)
    with pytest.raises(ConfigurationError):
        diag.layer_features(model, te, "fusion.9")


def test_ledger_required(tmp_path, trained):
    model, _, _, te = trained
    blind = load_csv(save_csv(te.subset(np.arange(20)), tmp_path))
    with pytest.raises(StateError):
        diag.interference_score(model, blind)
    with pytest.raises(StateError):
        diag.diagnose(model, blind)


def test_gradient_rank_trace_shape(trained):
    model, trace, _, te = trained
    res = diag.gradient_rank_trace(trace, diag.agop_ranks(model, te))
    assert set(res["ranks"]) >= {"fusion.0", "classifier.0", "enc0.0"}
    assert all(len(v) == 4 for v in res["ranks"].values())
    assert res["ratio"]["fusion.0"] == res["ranks"]["fusion.0"][-1] / res["agop_rank"]["fusion.0"]


def test_report_round_trip(trained):
    model, _, _, te = trained
    rep = diag.diagnose(model, te, epoch=3)
    back = diag.DiagnosticsReport.from_json(rep.to_json())
    assert back.collision_bound == rep.collision_bound
    np.testing.assert_array_equal(back.agop["fusion.0"], rep.agop["fusion.0"])
    assert back.gamma == rep.gamma and back.interference_score == rep.interference_score
    assert 0.0 <= rep.empirical_collision_fraction <= 1.0


def _hsic_cka(x, y):
    n = x.shape[0]
    h = np.eye(n) - 1.0 / n
    k, l = x @ x.T, y @ y.T
    return np.trace(k @ h @ l @ h) / np.sqrt(np.trace(k @ h @ k @ h) * np.trace(l @ h @ l @ h))


def test_linear_cka_matches_kernel_form():
    s = RandomStream(8)
    x, y = s.normal(size=(40, 5)), s.normal(size=(40, 3))
    y[:, 0] += x[:, 0]
    assert diag.linear_cka(x, y) == pytest.approx(_hsic_cka(x, y), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100))
def test_linear_cka_invariances(seed, scale):
    s = RandomStream(seed)
    x, y = s.normal(size=(30, 4)), s.normal(size=(30, 6))
    q, _ = np.linalg.qr(s.normal(size=(4, 4)))
    base = diag.linear_cka(x, y)
    assert 0.0 <= base <= 1.0
    assert diag.linear_cka(scale * x @ q + 3.0, y) == pytest.approx(base, abs=1e-9)
    assert diag.linear_cka(x, x) == pytest.approx(1.0)


def test_linear_cka_zero_variance():
    with pytest.warns(RuntimeWarning):
        assert diag.linear_cka(np.ones((5, 2)), np.random.default_rng(0).normal(size=(5, 2))) == 0.0
    assert diag.linear_cka(np.ones((5, 2)), np.ones((5, 2)), return_flag=True) == (0.0, True)


def _vif_by_regression(x):
    out = []
    for j in range(x.shape[1]):
        others = np.column_stack([np.ones(len(x)), np.delete(x, j, axis=1)])
        coef, *_ = np.linalg.lstsq(others, x[:, j], rcond=None)
        resid = x[:, j] - others @ coef
        r2 = 1 - resid @ resid / np.sum((x[:, j] - x[:, j].mean()) ** 2)
        out.append(1 / (1 - r2))
    return np.array(out)


def test_vif_matches_regression():
    s = RandomStream(11)
    x = s.normal(size=(200, 4))
    x[:, 3] = x[:, 0] + 0.5 * x[:, 1] + 0.3 * s.normal(size=200)
    np.testing.assert_allclose(diag.vif_values(x), _vif_by_regression(x), rtol=1e-6)


def test_vif_drops_constant_columns_and_caps():
    s = RandomStream(12)
    x = s.normal(size=(100, 3))
    x = np.column_stack([x, np.full(100, 2.0), x[:, 0] * 2.0])
    v = diag.vif_values(x)
    assert len(v) == 4 and v.max() == diag.VIF_CAP
    with pytest.raises(InputError):
        diag.vif_values(s.normal(size=(3, 3)))


def test_modality_probe_ce_low_on_separable_rows():
    s = RandomStream(0)
    a = s.normal(size=(40, 6)) + np.array([4, 0, 0, 0, 0, 0])
    b = s.normal(size=(40, 6)) + np.array([0, 0, 0, 0, 0, 4])
    clf = diag.train_weight_classifier([a, b], seed=0)
    fusion = np.hstack([a[:10], b[:10]])
    assert diag.modality_probe_ce([a, b], fusion, [6, 6], classifier=clf) < 0.1
    swapped = np.hstack([b[:10], a[:10]])
    assert diag.modality_probe_ce([a, b], swapped, [6, 6], classifier=clf) > 2.0
    with pytest.raises(ConfigurationError):
        diag.modality_probe_ce([a, b], fusion, [6, 5], classifier=clf)

import json

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, strategies as st

from pdrl import evaluation as ev
from pdrl.core import UncertaintyReport, compute_residuals

from conftest import make_record
from oracles import brute_auc, brute_spearman


def test_spearman_examples():
    assert ev.spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert ev.spearman([1, 2, 3], [3, 2, 1]) == -1.0
    # 1 - 6 * sum(d^2) / (n (n^2 - 1)) with d = (0, 1, -1, 0)
    assert ev.spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(1 - 6 * 2 / (4 * 15), abs=1e-15)


@pytest.mark.parametrize("xs, ys", [([1, 2], [1]), ([1], [1]), ([1, 1, 1], [1, 2, 3]), ([1, 2, 3], [4, 4, 4])])
def test_spearman_errors(xs, ys):
    with pytest.raises(ValueError):
        ev.spearman(xs, ys)


ties = st.lists(st.integers(0, 5), min_size=3, max_size=30)


@given(data=st.data())
def test_spearman_matches_oracles_with_ties(data):
    xs = data.draw(ties)
    ys = data.draw(st.lists(st.integers(0, 5), min_size=len(xs), max_size=len(xs)))
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        return
    rho = ev.spearman(xs, ys)
    assert abs(rho - brute_spearman(xs, ys)) < 1e-12
    assert rho == pytest.approx(scipy.stats.spearmanr(xs, ys).statistic, abs=1e-12)


@given(seed=st.integers(0, 2**32 - 1))
def test_spearman_increasing_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(25), rng.standard_normal(25)
    assert ev.spearman(np.exp(x), y) == ev.spearman(x, y)
    assert ev.spearman(x, 3 * y + 1) == ev.spearman(x, y)


def test_rankdata_matches_scipy():
    a = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5]
    np.testing.assert_array_equal(ev.rankdata(a), scipy.stats.rankdata(a))


def test_auc_examples():
    assert ev.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert ev.roc_auc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5
    assert ev.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    with pytest.raises(ValueError):
        ev.roc_auc([0.1, 0.2], [1, 1])


@given(data=st.data())
def test_auc_matches_pair_counting(data):
    n = data.draw(st.integers(2, 40))
    scores = data.draw(st.lists(st.integers(0, 6), min_size=n, max_size=n))
    labels = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    if len(set(labels)) < 2:
        return
    auc = ev.roc_auc(scores, labels)
    assert auc == brute_auc(scores, labels)
    assert ev.roc_auc(np.exp(np.array(scores) / 3.0), labels) == auc
    flipped = ev.roc_auc(scores, [1 - l for l in labels])
    assert flipped == pytest.approx(1 - auc, abs=1e-15)


def test_error_split_examples():
    labels = ev.error_split(np.arange(1, 11), 0.2)
    assert labels.tolist() == [0, 0, 1, 1, 1, 1, 1, 1, 1, 1]
    assert ev.error_split([1, 1, 2, 2], 0.5).tolist() == [0, 0, 1, 1]
    assert ev.error_split([2, 1, 1, 2], 0.5).tolist() == [1, 0, 0, 1]
    assert ev.error_split([5, 5, 5, 5], 0.5).tolist() == [0, 0, 1, 1]
    with pytest.raises(ValueError):
        ev.error_split([], 0.2)
    with pytest.raises(ValueError):
        ev.error_split([1.0], 1.0)


@given(n=st.integers(1, 200), q=st.floats(0.01, 0.99))
def test_error_split_counts(n, q):
    labels = ev.error_split(np.random.default_rng(n).standard_normal(n), q)
    n_low = int((labels == 0).sum())
    assert n_low == int(np.floor(q * n + 1e-9))
    if 1 <= n_low <= n - 1:
        assert set(labels.tolist()) == {0, 1}


def _records(rng, n=30):
    return [make_record(rng, n=int(rng.integers(1, 5)), d=3, sid=f"s{i}") for i in range(n)]


def test_id_eval_oracle_and_inverted_scorer(rng):
    recs = _records(rng)
    err_e = {r.id: abs(r.energy_true - r.energy_pred) for r in recs}
    err_f = {r.id: ev.force_error_norms(r) for r in recs}
    perfect = UncertaintyReport("oracle", structure=err_e, atoms=err_f)
    for target in ("energy", "force"):
        rho, auc = ev.run_id_eval(perfect, recs, target)
        assert (rho.metric, rho.value, auc.metric, auc.value) == ("spearman", 1.0, "auc", 1.0)
        assert auc.positive_class == "high-error"
    inverted = UncertaintyReport("neg", structure={k: -v for k, v in err_e.items()},
                                 atoms={k: -v for k, v in err_f.items()})
    assert ev.run_id_eval(inverted, recs, "force")[0].value == -1.0
    assert ev.run_id_eval(inverted, recs, "energy")[0].value == -1.0


def test_id_eval_pairing_modes(rng):
    recs = _records(rng)
    rep = UncertaintyReport("x", atoms={r.id: rng.uniform(size=r.n_atoms) for r in recs})
    atom_rho = ev.run_id_eval(rep, recs, "force")[0]
    struct_rho = ev.run_id_eval(rep, recs, "force", force_pairs="structure")[0]
    assert atom_rho.n_samples == sum(r.n_atoms for r in recs)
    assert struct_rho.n_samples == len(recs)


def test_id_eval_coverage_gap(rng):
    recs = _records(rng, 5)
    rep = UncertaintyReport("x", structure={r.id: 1.0 for r in recs[:-1]})
    with pytest.raises(ValueError, match="lack"):
        ev.run_id_eval(rep, recs, "energy")
    with pytest.raises(ValueError):
        ev.run_id_eval(UncertaintyReport("x", structure={r.id: 1.0 for r in recs}), recs, "force")


def test_ood_eval_separation_and_pooled():
    rng = np.random.default_rng(0)
    id_s = rng.uniform(0, 1, 50)
    ood_s = {"ood:a": rng.uniform(2, 3, 20), "ood:b": rng.uniform(0.5, 2.5, 30)}
    id_e = rng.uniform(size=50)
    ood_e = {k: rng.uniform(size=len(v)) for k, v in ood_s.items()}
    reps = ev.run_ood_eval(id_s, ood_s, id_e, ood_e, scorer="t")
    by = {(r.split_tag, r.metric): r for r in reps}
    assert by[("ood:a", "auc")].value == 1.0
    assert by[("ood:a", "auc")].positive_class == "ood"
    pooled = np.concatenate([ood_s["ood:a"], ood_s["ood:b"]])
    labels = np.r_[np.zeros(50), np.ones(50)]
    assert by[("All", "auc")].value == ev.roc_auc(np.concatenate([id_s, pooled]), labels)
    assert by[("All", "spearman")].n_samples == 100
    only = ev.run_ood_eval(id_s, ood_s, id_e, ood_e, spearman_on="ood")
    assert {r.n_samples for r in only if r.metric == "spearman" and r.split_tag == "All"} == {50}
    with pytest.raises(ValueError):
        ev.run_ood_eval([], ood_s, [], ood_e)


def test_ood_exchangeable_null():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(400)
    reps = ev.run_ood_eval(x[:200], {"ood:same": x[200:]}, x[:200], {"ood:same": x[200:]})
    auc = [r.value for r in reps if r.metric == "auc" and r.split_tag == "All"][0]
    assert abs(auc - 0.5) <= 0.05


def test_ood_inputs_grouping(small_synth):
    recs = small_synth["test"] + small_synth["ood"]
    rep = UncertaintyReport("x", atoms={r.id: np.ones(r.n_atoms) for r in recs})
    id_s, ood_s, id_e, ood_e = ev.ood_inputs(rep, recs)
    assert len(id_s) == len(small_synth["test"]) and list(ood_s) == ["ood:shift"]
    assert len(ood_e["ood:shift"]) == len(small_synth["ood"])


def test_report_serialization():
    reps = [ev.EvalReport("knn", "force", "spearman", 0.5, 10, "test"),
            ev.EvalReport("knn", "force", "auc", 0.75, 10, "test", "high-error")]
    csv_text = ev.reports_to_csv(reps)
    assert csv_text.splitlines() == ["scorer,target,metric,split,value,n",
                                     "knn,force,spearman,test,0.5,10", "knn,force,auc,test,0.75,10"]
    assert json.loads(ev.reports_to_json(reps))[1]["positive_class"] == "high-error"
    with pytest.raises(ValueError):
        ev.EvalReport("x", "force", "auc", 1.5, 3, "t")


def test_pca_rank_one_data():
    rng = np.random.default_rng(0)
    t = rng.standard_normal(100)
    x = np.outer(t, [1.0, 2.0, -1.0, 0.5]) + 1e-6 * rng.standard_normal((100, 4))
    model = ev.pca_fit(x)
    assert model.eigenvalues[0] / model.eigenvalues.sum() >= 0.9999


def test_pca_properties(small_synth):
    train = compute_residuals(small_synth["train"])
    model = ev.pca_fit(train)
    d = train.d_desc
    np.testing.assert_allclose(model.axes @ model.axes.T, np.eye(d), atol=1e-10)
    assert np.all(np.diff(model.eigenvalues) <= 0) and np.all(model.eigenvalues >= 0)
    idx = np.argmax(np.abs(model.axes), axis=1)
    assert np.all(model.axes[np.arange(d), idx] > 0)
    proj = model.transform(train.atom_descriptors())
    corr = np.corrcoef(proj.T)
    assert np.max(np.abs(corr - np.diag(np.diag(corr)))) < 1e-8
    z = (train.atom_descriptors() - model.scaler.mean) / model.scaler.std
    np.testing.assert_allclose(proj @ model.axes, z, atol=1e-8)


def test_pca_table(small_synth):
    train = compute_residuals(small_synth["train"])
    test = compute_residuals(small_synth["test"])
    rep = UncertaintyReport("x", atoms={r.structure_id: np.arange(r.n_atoms, dtype=float) for r in test.records})
    _, table = ev.pca_project(train, [("test", test)], 2, rep)
    lines = table.to_csv().splitlines()
    assert lines[0] == "set,structure_id,atom_index,pc1,pc2,force_error_norm,uncertainty"
    assert len(lines) == 1 + train.n_atoms + test.n_atoms
    assert lines[1].endswith(",")  # training atoms carry no score
    with pytest.raises(ValueError):
        ev.pca_project(train, [], train.d_desc + 1)

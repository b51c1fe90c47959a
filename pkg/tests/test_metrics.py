import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aupretrain.errors import ContractError
from aupretrain.metrics import (
    ConfusionCounts, FoldPredictions, build_report, bundled_tables, confusion_counts, f1_score, load_bundled_table,
    macro, per_au_metrics, pr_auc, read_score_table, roc_auc,
)

from oracles import ap_threshold_sweep, confusion_loop, roc_pairwise

TABLE3_OURS = (41.5, 49.5, 70.2, 46.2, 47.9, 75.6, 90.7, 57.6)


def random_case(rng, n=None, ties=True):
    n = n or int(rng.integers(2, 60))
    scores = rng.integers(0, 8, size=n) / 7.0 if ties and rng.random() < 0.5 else rng.random(n)
    labels = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(int)
    return scores, labels


# -- confusion / F1 -----------------------------------------------------------------

def test_perfect_predictor():
    y = np.array([[1, 0], [0, 1], [1, 1]])
    c = confusion_counts(y.astype(float), y)
    assert not c.fp.any() and not c.fn.any()


def test_threshold_boundary_is_inclusive():
    c = confusion_counts(np.full((4, 1), 0.5), np.array([[0], [1], [0], [1]]))
    assert c.tp[0] + c.fp[0] == 4


def test_counts_match_loop_oracle():
    rng = np.random.default_rng(0)
    s, y = rng.random(1000), rng.integers(0, 2, 1000)
    c = confusion_counts(s, y)
    assert (c.tp[0], c.fp[0], c.tn[0], c.fn[0]) == confusion_loop(s, y)
    assert c.total[0] == 1000


def test_shape_mismatch():
    with pytest.raises(ContractError):
        confusion_counts(np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(ContractError):
        roc_auc(np.zeros(3), np.zeros(4))


def test_f1_analytic_and_degenerate():
    assert f1_score(ConfusionCounts(np.array(2), np.array(1), np.array(0), np.array(1))) == pytest.approx(2 / 3)
    assert f1_score(ConfusionCounts(np.array(0), np.array(0), np.array(5), np.array(0))) == 0.0


def test_table3_row_mean():
    assert round(float(np.mean(TABLE3_OURS)), 1) == 59.9


def test_f1_monotone_in_tp():
    for fp in range(4):
        for fn in range(4):
            vals = [f1_score(ConfusionCounts(np.array(tp), np.array(fp), np.array(0), np.array(fn))) for tp in range(6)]
            assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_pooled_counts_equal_summed_counts():
    rng = np.random.default_rng(1)
    parts = [(rng.random((20, 3)), rng.integers(0, 2, (20, 3))) for _ in range(3)]
    summed = confusion_counts(*parts[0]) + confusion_counts(*parts[1]) + confusion_counts(*parts[2])
    pooled = confusion_counts(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    for k in ("tp", "fp", "tn", "fn"):
        assert np.array_equal(getattr(summed, k), getattr(pooled, k))


# -- ROC / PR -----------------------------------------------------------------------

def test_roc_simple_cases():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert np.isnan(roc_auc([0.1, 0.2], [1, 1]))


def test_pr_simple_cases():
    assert pr_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert pr_auc([0.3, 0.1, 0.9], [1, 1, 1]) == 1.0
    assert np.isnan(pr_auc([0.1, 0.2], [0, 0]))


def test_brute_force_oracles_500_cases():
    rng = np.random.default_rng(2)
    for _ in range(500):
        s, y = random_case(rng)
        if 0 < y.sum() < len(y):
            assert abs(roc_auc(s, y) - roc_pairwise(s, y)) < 1e-9
        if y.sum() > 0:
            assert abs(pr_auc(s, y) - ap_threshold_sweep(s, y)) < 1e-9
        c = confusion_counts(s, y)
        tp, fp, tn, fn = confusion_loop(s, y)
        want = 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        assert abs(f1_score(c)[0] - want) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1000), st.integers(0, 1)), min_size=2, max_size=40))
def test_roc_invariant_to_monotone_transform(pairs):
    s = np.array([p[0] for p in pairs]) / 1000.0
    y = np.array([p[1] for p in pairs])
    if 0 < y.sum() < len(y):
        a = roc_auc(s, y)
        assert 0.0 <= a <= 1.0
        assert roc_auc(np.exp(3 * s) - 7, y) == pytest.approx(a, abs=1e-12)
    if y.sum() > 0:
        assert 0.0 <= pr_auc(s, y) <= 1.0


# -- reports ------------------------------------------------------------------------

def folds_fixture(rng, n_folds=3, n=30, L=4):
    out, start = [], 0
    for f in range(n_folds):
        out.append(FoldPredictions(f, list(range(start, start + n)), rng.random((n, L)), rng.integers(0, 2, (n, L))))
        start += n
    return out


def test_single_fold_report_equals_direct():
    rng = np.random.default_rng(3)
    fold = folds_fixture(rng, 1)[0]
    rep = build_report([fold], ["A", "B", "C", "D"])
    direct = per_au_metrics(fold.scores, fold.labels)
    for m in ("f1", "roc_auc", "pr_auc"):
        np.testing.assert_array_equal(rep.values[m], direct[m])


def test_macro_is_mean():
    rng = np.random.default_rng(4)
    rep = build_report(folds_fixture(rng), ["A", "B", "C", "D"])
    for m in ("f1", "roc_auc", "pr_auc"):
        assert abs(rep.macro[m] - np.mean(rep.values[m])) < 1e-12


def test_macro_skips_undefined():
    assert macro([0.5, np.nan, 0.7]) == pytest.approx(0.6)
    assert np.isnan(macro([np.nan]))


def test_overlapping_folds_rejected():
    rng = np.random.default_rng(5)
    folds = folds_fixture(rng)
    folds[1].sample_ids[0] = folds[0].sample_ids[0]
    with pytest.raises(ContractError):
        build_report(folds, ["A", "B", "C", "D"])


def test_report_csv_and_text():
    scores = np.array([[0.9, 0.2], [0.8, 0.1], [0.3, 0.7], [0.1, 0.6]])
    labels = np.array([[1, 0], [1, 0], [0, 1], [0, 0]])
    rep = build_report([FoldPredictions(0, [0, 1, 2, 3], scores, labels)], ["AU01", "AU02"], {"config_hash": "x1", "seed": 0})
    lines = rep.to_csv().splitlines()
    assert lines[0] == "# config_hash=x1,folds=0,seed=0,threshold=0.5"
    assert lines[1] == "metric,AU01,AU02,Avg"
    assert lines[2] == "f1,100.0,66.7,83.3"
    assert "Avg" in rep.to_text() and "83.3" in rep.to_text()


def test_absent_metric_rendered_na():
    rep = build_report([FoldPredictions(0, [0, 1], np.array([[0.2], [0.4]]), np.array([[0], [0]]))], ["AU01"])
    assert "NA" in rep.to_csv().splitlines()[3]


# -- bundled tables -----------------------------------------------------------------

def test_bundled_tables_listed():
    assert set(bundled_tables()) >= {"disfa_f1_comparison", "disfa_f1_by_pretrain_images", "disfa_f1_by_pretrain_subjects"}


@pytest.mark.parametrize("name,expected", [
    ("disfa_f1_comparison", {"Ours": 59.9, "LP-Net": 56.9, "OpenFace 2.0": 53.6}),
    ("disfa_f1_by_pretrain_images", {"1,000": 28.0, "2,000": 39.7, "10,000": 44.6, "~160,000": 59.9}),
    ("disfa_f1_by_pretrain_subjects", {"12": 0.0, "200": 45.7, "600": 49.3, "1,000": 58.5, "~2,000": 59.9}),
])
def test_table_means(name, expected):
    table = load_bundled_table(name)
    assert table.au_names == ("AU01", "AU02", "AU04", "AU06", "AU09", "AU12", "AU25", "AU26")
    means = table.means()
    assert set(means) == set(expected)
    for label, value in expected.items():
        assert abs(round(means[label], 1) - value) <= 0.05


def test_ours_row_values():
    table = load_bundled_table("disfa_f1_comparison")
    assert tuple(dict(table.rows)["Ours"]) == TABLE3_OURS


def test_read_score_table_and_render():
    t = read_score_table("Method,A,B\nx,10,20\ny,0,0\n")
    assert t.means() == {"x": 15.0, "y": 0.0}
    text = t.render()
    assert text.splitlines()[0].split("|")[-1].strip() == "Avg"
    assert "15.0" in text


def test_pooled_and_fold_mean_differ_and_both_emitted():
    # fold 0 is all correct, fold 1 has one positive and one false alarm
    folds = [
        FoldPredictions(0, [0, 1, 2, 3], np.array([[0.9], [0.8], [0.1], [0.2]]), np.array([[1], [1], [0], [0]])),
        FoldPredictions(1, [4, 5], np.array([[0.9], [0.7]]), np.array([[1], [0]])),
    ]
    rep = build_report(folds, ["AU01"])
    assert rep.macro["f1"] == pytest.approx(2 * 3 / (2 * 3 + 1))
    assert rep.fold_macro["f1"] == pytest.approx((1.0 + 2 / 3) / 2)
    names = [r[0] for r in rep.rows()]
    assert names == ["f1", "roc_auc", "pr_auc", "f1_fold_mean", "roc_auc_fold_mean", "pr_auc_fold_mean"]
    assert rep.to_csv().splitlines()[5] == "f1_fold_mean,NA,83.3"

"""Metric tests: every aggregate is checked against a pairwise enumeration."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from itertools import combinations

from fairembed.cvae import CvaeConfig, CvaeModel
from fairembed.evaluation import (
    DensityData,
    MetricsReport,
    ProbeConfig,
    auc,
    delta_cp,
    delta_dp,
    delta_eo,
    density_data,
    evaluate_run,
    fit_probe,
    leakage_auc,
    rmse,
)
from fairembed.faircl import EncoderConfig, EncoderStack
from fairembed.tabular import (
    ColumnSpec,
    DataError,
    Dataset,
    DatasetSchema,
    encode,
    fit_encoder,
    split,
    synth_generate,
)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def auc_brute(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def dp_brute(preds, groups):
    ids = sorted(set(groups))
    rates = {g: np.mean([p for p, gg in zip(preds, groups) if gg == g]) for g in ids}
    gaps = [abs(rates[a] - rates[b]) for a, b in combinations(ids, 2)]
    return float(np.mean(gaps))


def eo_brute(preds, labels, groups):
    ids = sorted(set(groups))
    gaps = []
    for y in (0, 1):
        rates = {}
        for g in ids:
            cell = [p for p, l, gg in zip(preds, labels, groups) if gg == g and l == y]
            if cell:
                rates[g] = np.mean(cell)
        for a, b in combinations(sorted(rates), 2):
            gaps.append(abs(rates[a] - rates[b]))
    return float(np.mean(gaps))


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def test_logistic_probe_separates_two_points():
    x = np.array([[0.0], [1.0]])
    y = np.array([0.0, 1.0])
    probe = fit_probe(x, y, "logistic")
    assert np.array_equal(probe.predict(x), y)
    assert np.all((probe.scores(x) > 0) & (probe.scores(x) < 1))


def test_ridge_huge_penalty_predicts_mean():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3))
    y = rng.normal(size=40) + 2.0
    probe = fit_probe(x, y, "ridge", l2=1e12)
    assert np.allclose(probe.weights, 0.0, atol=1e-9)
    assert np.allclose(probe.scores(x), y.mean(), atol=1e-6)


def test_ridge_matches_hand_normal_equations():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 4))
    y = x @ np.array([1.0, -2.0, 0.5, 0.0]) + 3.0 + rng.normal(0, 0.01, 30)
    probe = fit_probe(x, y, "ridge", l2=1e-2)
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    w = np.linalg.solve(xc.T @ xc + 1e-2 * np.eye(4), xc.T @ yc)
    assert np.allclose(probe.weights, w)
    assert probe.bias == pytest.approx(y.mean() - x.mean(axis=0) @ w)


def test_ridge_singular_without_penalty():
    x = np.ones((10, 2))  # collinear columns
    y = np.arange(10.0)
    with pytest.raises(DataError, match="penalty > 0"):
        fit_probe(x, y, "ridge", l2=0.0)


def test_logistic_rejects_nonbinary_labels():
    with pytest.raises(DataError, match="0, 1"):
        fit_probe(np.ones((3, 1)), np.array([0.0, 1.0, 2.0]), "logistic")
    with pytest.raises(DataError, match="kind"):
        fit_probe(np.ones((3, 1)), np.zeros(3), "forest")


def test_logistic_on_raw_synth_features_beats_08_auc():
    ds = synth_generate(800, bias=2.0, seed=5)
    enc = fit_encoder(ds, continuous_mode="zscore")
    ed = encode(enc, ds)
    tr, te = split(ds, (3, 1), np.random.default_rng(6))
    ed_tr, ed_te = encode(enc, tr), encode(enc, te)
    probe = fit_probe(ed_tr.matrix, ed_tr.targets, "logistic")
    assert auc(probe.scores(ed_te.matrix), ed_te.targets) > 0.8


# ---------------------------------------------------------------------------
# auc / rmse
# ---------------------------------------------------------------------------


def test_auc_trivial_cases():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.1, 0.9], [1, 0]) == 0.0
    assert auc([0.5, 0.5], [1, 0]) == 0.5


def test_auc_matches_brute_force_with_ties():
    rng = np.random.default_rng(2)
    scores = rng.integers(0, 10, size=50) / 10.0  # plenty of ties
    labels = rng.integers(0, 2, size=50)
    if labels.sum() in (0, 50):
        labels[0] = 1 - labels[0]
    assert auc(scores, labels) == auc_brute(scores.tolist(), labels.tolist())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=40),
       st.integers(0, 2 ** 31 - 1))
def test_property_auc_equals_pair_enumeration(raw, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=len(raw))
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == len(labels):
        labels[0] = 0
    scores = np.array(raw, dtype=float) / 5.0
    assert auc(scores, labels) == auc_brute(scores.tolist(), labels.tolist())


def test_auc_single_class_error():
    with pytest.raises(DataError, match="both classes"):
        auc([0.1, 0.2], [1, 1])


def test_rmse_cases():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5))
    rng = np.random.default_rng(3)
    p, t = rng.normal(size=25), rng.normal(size=25)
    oracle = np.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / 25)
    assert rmse(p, t) == pytest.approx(oracle, rel=1e-12)
    with pytest.raises(DataError, match="empty"):
        rmse([], [])


# ---------------------------------------------------------------------------
# fairness gaps
# ---------------------------------------------------------------------------


def test_delta_dp_hand_cases():
    assert delta_dp([1, 1, 1, 1], ["a", "a", "b", "b"]) == 0.0
    # rates 0.8 vs 0.3
    preds = [1, 1, 1, 1, 0] + [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
    groups = ["a"] * 5 + ["b"] * 10
    assert delta_dp(preds, groups) == pytest.approx(0.5)


def test_delta_dp_three_groups():
    preds = ([1, 0, 0, 0, 0] + [1, 1, 1, 0, 0, 0] + [1, 1, 1, 1, 0])
    groups = ["a"] * 5 + ["b"] * 6 + ["c"] * 5
    # rates 0.2, 0.5, 0.8 -> gaps 0.3, 0.6, 0.3 -> mean 0.4
    assert delta_dp(preds, groups) == pytest.approx(0.4)
    assert delta_dp(preds, groups) == pytest.approx(dp_brute(preds, groups))


def test_delta_dp_needs_two_groups():
    with pytest.raises(DataError, match="2 sensitive groups"):
        delta_dp([1, 0], ["a", "a"])


def test_delta_eo_perfect_predictor_is_zero():
    labels = [0, 1, 0, 1, 0, 1, 0, 1]
    groups = ["a", "a", "a", "a", "b", "b", "b", "b"]
    assert delta_eo(labels, labels, groups) == 0.0


def test_delta_eo_matches_enumeration_on_hand_table():
    preds = [1, 1, 0, 1, 0, 0, 1, 0]
    labels = [1, 1, 0, 0, 1, 0, 0, 0]
    groups = ["a", "a", "a", "a", "b", "b", "b", "b"]
    # y=1: a -> 1.0 (2/2), b -> 0.0 (0/1); y=0: a -> 0.5 (1/2), b -> 1/3
    expect = np.mean([abs(1.0 - 0.0), abs(0.5 - 1.0 / 3.0)])
    got = delta_eo(preds, labels, groups)
    assert got == pytest.approx(expect)
    assert got == pytest.approx(eo_brute(preds, labels, groups))


def test_delta_eo_skips_empty_cells_with_warning():
    preds = [1, 0, 1, 0, 1, 1]
    labels = [1, 1, 1, 1, 0, 0]  # group b never has y=0
    groups = ["a", "a", "b", "b", "a", "a"]
    with pytest.warns(UserWarning, match="empty cell"):
        got = delta_eo(preds, labels, groups)
    # only the y=1 pair remains: |0.5 - 0.5| = 0
    assert got == 0.0


def test_delta_eo_random_predictor_vanishes():
    rng = np.random.default_rng(4)
    n = 40000
    groups = np.where(rng.random(n) < 0.5, "a", "b")
    labels = rng.integers(0, 2, size=n)
    preds = rng.integers(0, 2, size=n)
    assert delta_eo(preds, labels, groups) < 3.0 / np.sqrt(n / 4)


def test_fairness_gaps_invariant_under_group_relabeling():
    rng = np.random.default_rng(5)
    preds = rng.integers(0, 2, size=30)
    labels = rng.integers(0, 2, size=30)
    groups = rng.choice(["a", "b", "c"], size=30).tolist()
    renamed = [{"a": "z9", "b": "k", "c": "m"}[g] for g in groups]
    assert delta_dp(preds, groups) == pytest.approx(delta_dp(preds, renamed))
    assert delta_eo(preds, labels, groups) == pytest.approx(
        delta_eo(preds, labels, renamed))


def test_delta_cp_cases():
    assert delta_cp([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert delta_cp([0.2, 0.6], [0.4, 0.6]) == pytest.approx(0.1)
    rng = np.random.default_rng(6)
    a, b = rng.random(17), rng.random(17)
    oracle = sum(abs(x - y) for x, y in zip(a, b)) / 17
    assert delta_cp(a, b) == pytest.approx(oracle, rel=1e-12)
    with pytest.raises(DataError, match="align"):
        delta_cp([0.1], [0.1, 0.2])


# ---------------------------------------------------------------------------
# leakage
# ---------------------------------------------------------------------------


def test_leakage_perfectly_separable():
    groups = np.array(["m"] * 50 + ["f"] * 50)
    onehot = np.zeros((100, 2))
    onehot[:50, 0] = 1.0
    onehot[50:, 1] = 1.0
    assert leakage_auc(onehot, groups) == 1.0


def test_leakage_noise_embeddings_near_half():
    rng = np.random.default_rng(7)
    emb = rng.normal(size=(2000, 8))
    groups = np.where(rng.random(2000) < 0.5, "a", "b")
    assert abs(leakage_auc(emb, groups) - 0.5) < 0.05


def test_leakage_single_group_error():
    with pytest.raises(DataError, match="2 sensitive groups"):
        leakage_auc(np.ones((4, 2)), ["a"] * 4)


def test_leakage_multigroup_one_vs_rest():
    rng = np.random.default_rng(8)
    groups = np.array(["a"] * 40 + ["b"] * 40 + ["c"] * 40)
    emb = np.zeros((120, 3))
    emb[np.arange(120), np.repeat([0, 1, 2], 40)] = 1.0
    emb += rng.normal(0, 0.01, emb.shape)
    assert leakage_auc(emb, groups) > 0.99


# ---------------------------------------------------------------------------
# run-level report
# ---------------------------------------------------------------------------


def run_setup(n=60, seed=9):
    ds = synth_generate(n, bias=1.0, seed=seed)
    stack_enc = fit_encoder(ds, continuous_mode="zscore")
    gen_enc = fit_encoder(ds, continuous_mode="mode_specific", max_modes=3)
    generator = CvaeModel(gen_enc, CvaeConfig(latent_dim=3, hidden=8, epochs=1),
                          np.random.default_rng(seed))
    tr, te = split(ds, (7, 3), np.random.default_rng(seed + 1))
    ed = encode(stack_enc, ds)
    cfg = EncoderConfig(embed_dim=4, hidden=8, epochs=1, batch_size=16)
    stacks = [EncoderStack(ed.dim, cfg, np.random.default_rng(s)) for s in (1, 2)]
    return ds, stack_enc, generator, tr, te, stacks


def test_evaluate_run_shape_and_columns():
    _, stack_enc, generator, tr, te, stacks = run_setup()
    report = evaluate_run(stacks, stack_enc, tr, te, generator,
                          rng=np.random.default_rng(10))
    assert report.task == "classification"
    assert report.metric_names == ("auc", "delta_dp", "delta_eo", "delta_cp",
                                   "leakage_auc")
    rows = report.rows()
    assert len(rows) == 3  # one per snapshot + mean
    assert rows[-1]["snapshot"] == "mean"
    for name in report.metric_names:
        vals = [r[name] for r in report.per_snapshot]
        assert report.mean[name] == pytest.approx(np.mean(vals))
        assert all(np.isfinite(v) for v in vals)
    assert "auc: mean" in report.summary()


def test_evaluate_run_without_generator_omits_counterfactual_column():
    _, stack_enc, _, tr, te, stacks = run_setup()
    report = evaluate_run(stacks[:1], stack_enc, tr, te, generator=None)
    assert "delta_cp" not in report.metric_names
    assert len(report.rows()) == 2


def test_evaluate_run_constant_embeddings_degenerate():
    _, stack_enc, generator, tr, te, stacks = run_setup()
    stack = stacks[0]
    for _, params in stack.stacks().values():
        for w, b in params.layers:
            w.data[:] = 0.0
            b.data[:] = 0.0
    stack.projection.layers[-1][1].data[:] = 0.5
    report = evaluate_run([stack], stack_enc, tr, te, generator,
                          rng=np.random.default_rng(11))
    row = report.per_snapshot[0]
    assert row["auc"] == 0.5
    assert row["delta_dp"] == 0.0
    assert row["delta_eo"] == 0.0
    assert row["delta_cp"] == 0.0
    assert row["leakage_auc"] == 0.5


def regression_dataset(n=48, seed=12):
    rng = np.random.default_rng(seed)
    group = np.where(rng.random(n) < 0.5, "a", "b")
    x0 = rng.normal(size=n)
    x1 = rng.normal(size=n)
    y = 2.0 * x0 - x1 + (group == "a") * 0.5 + rng.normal(0, 0.1, n)
    schema = DatasetSchema(
        (ColumnSpec("x0", "continuous"), ColumnSpec("x1", "continuous"),
         ColumnSpec("group", "categorical"), ColumnSpec("score", "continuous")),
        sensitive_column="group", target_column="score", task="regression")
    return Dataset(schema, {"x0": x0, "x1": x1,
                            "group": group.astype(object), "score": y})


def test_evaluate_run_regression_columns():
    ds = regression_dataset()
    enc = fit_encoder(ds, continuous_mode="zscore")
    tr, te = split(ds, (7, 3), np.random.default_rng(13))
    ed = encode(enc, ds)
    cfg = EncoderConfig(embed_dim=4, hidden=8, epochs=1, batch_size=16)
    stack = EncoderStack(ed.dim, cfg, np.random.default_rng(14))
    report = evaluate_run([stack], enc, tr, te, generator=None)
    assert report.task == "regression"
    assert report.metric_names == ("rmse", "delta_dp", "leakage_auc")
    assert "delta_eo" not in report.metric_names
    assert all(np.isfinite(v) for v in report.per_snapshot[0].values())


def test_evaluate_run_needs_snapshots():
    _, stack_enc, _, tr, te, _ = run_setup()
    with pytest.raises(DataError, match="at least one snapshot"):
        evaluate_run([], stack_enc, tr, te)


# ---------------------------------------------------------------------------
# density data
# ---------------------------------------------------------------------------


def test_density_single_bin_occupied():
    d = density_data([0.5] * 6, ["a", "a", "a", "b", "b", "b"], n_bins=4)
    for g in ("a", "b"):
        probs = d.by_group[g]
        assert probs.sum() == pytest.approx(1.0)
        assert np.count_nonzero(probs) == 1


def test_density_masses_sum_to_one_and_symmetry():
    rng = np.random.default_rng(15)
    preds = np.tile(rng.random(20), 2)
    groups = ["a"] * 20 + ["b"] * 20
    d = density_data(preds, groups, n_bins=10)
    assert np.array_equal(d.by_group["a"], d.by_group["b"])
    assert len(d.edges) == 11
    rows = d.rows()
    assert len(rows) == 20  # 10 bins per group
    assert {r["group"] for r in rows} == {"a", "b"}


def test_density_validation():
    with pytest.raises(DataError, match="n_bins"):
        density_data([0.5], ["a"], n_bins=1)
    with pytest.raises(DataError, match="empty"):
        density_data([], [], n_bins=4)

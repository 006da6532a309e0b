import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facade_recon.data import MaskScenario, NormalizationStats, PressureRecord, split_and_normalize
from facade_recon.errors import ConfigError, DataError
from facade_recon.graph import FacadeGraph
from facade_recon.inference import (TABLE_COLUMNS, OverlapPlan, aggregate, band_energy, bandpower_error,
                                    evaluate_fields, format_table, metrics, neighbor_average, overlap_add,
                                    reconstruct_full, welch_psd, window_weights)


def test_window_weights():
    w = window_weights(200)
    assert w.min() > 0
    np.testing.assert_allclose(w, w[::-1], rtol=0, atol=1e-15)
    assert w[0] < w[100]
    assert np.all(window_weights(7, "uniform") == 1)
    with pytest.raises(ConfigError):
        window_weights(10, "triangle")


def test_plan_starts_for_holdout():
    plan = OverlapPlan(1520, 200, 100)
    assert plan.starts == list(range(0, 1301, 100)) + [1320]
    assert len(plan.starts) == 15
    assert OverlapPlan(1500, 200, 100).starts[-1] == 1300
    with pytest.raises(DataError):
        OverlapPlan(150, 200, 100)


def test_overlap_single_window():
    plan = OverlapPlan(10, 10, 5, "uniform")
    p = np.arange(20.0).reshape(2, 10) + 1
    out = overlap_add([p], plan)
    np.testing.assert_allclose(out, p / (1 + plan.eps), rtol=0, atol=0)
    np.testing.assert_allclose(out, p, rtol=1e-8)


def test_overlap_equal_values():
    plan = OverlapPlan(15, 10, 5)
    out = overlap_add([np.full((1, 10), 3.0), np.full((1, 10), 3.0)], plan)
    np.testing.assert_allclose(out[0], 3.0 * plan.coverage() / (plan.coverage() + plan.eps), rtol=1e-14)


def test_overlap_hand_weights():
    plan = OverlapPlan(3, 2, 1, starts=[0, 1])
    plan_w = np.array([0.75, 0.25])  # first window ends light, second begins heavy

    class Fixed(OverlapPlan):
        @property
        def weights(self):
            return plan_w

    fixed = Fixed(3, 2, 1, starts=[0, 1])
    out = overlap_add([np.array([[9.0, 0.0]]), np.array([[4.0, 9.0]])], fixed)
    assert out[0, 1] == (0.25 * 0 + 0.75 * 4) / (1.0 + fixed.eps)
    assert out[0, 1] == pytest.approx(3.0, abs=1e-7)
    assert plan.starts == [0, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(20, 120), st.integers(5, 20), st.integers(1, 20), st.integers(0, 10_000))
def test_overlap_matches_brute_force(total, window, hop, seed):
    if window > total or hop > window:
        return
    plan = OverlapPlan(total, window, hop)
    rng = np.random.default_rng(seed)
    preds = [rng.standard_normal((3, window)) for _ in plan.starts]
    fast = overlap_add(preds, plan)
    w = plan.weights
    brute = np.zeros((3, total))
    for t in range(total):
        num = np.zeros(3)
        den = 0.0
        for k, s in enumerate(plan.starts):
            if s <= t < s + window:
                num += w[t - s] * preds[k][:, t - s]
                den += w[t - s]
        brute[:, t] = num / (den + plan.eps)
    np.testing.assert_allclose(fast, brute, rtol=0, atol=1e-12)


def test_overlap_gap_reported():
    plan = OverlapPlan(30, 10, 10, starts=[0, 20])
    with pytest.raises(DataError, match="10"):
        overlap_add([np.zeros((1, 10))] * 2, plan)


def _identity_model(X, P, C):
    return X * P


def test_identity_model_reproduces_observed_rows():
    g = FacadeGraph.build()
    rng = np.random.default_rng(0)
    raw = rng.standard_normal((125, 7600)) * 3 + 1
    seg = split_and_normalize(PressureRecord(20.0, raw))
    sc = MaskScenario.for_graph(g, [0, 1])
    obs = sc.available_nodes
    exact = reconstruct_full(seg.holdout, 20.0, _identity_model, sc, OverlapPlan(1520, eps=0.0), seg.stats)
    np.testing.assert_allclose(exact.physical[obs], raw[obs, 6080:], rtol=1e-12, atol=1e-12)
    # with the default ε the only deviation is the attenuation ε / Σω, largest at the record edges
    res = reconstruct_full(seg.holdout, 20.0, _identity_model, sc, stats=seg.stats)
    assert res.starts == OverlapPlan(1520).starts
    cov = OverlapPlan(1520).coverage()
    np.testing.assert_allclose(res.normalized[obs], seg.holdout[obs] * cov / (cov + 1e-8), rtol=1e-12, atol=1e-15)
    res2 = reconstruct_full(seg.holdout, 20.0, _identity_model, sc, stats=seg.stats)
    assert np.array_equal(res.normalized, res2.normalized)


def test_reconstruct_never_sees_masked_truth():
    g = FacadeGraph.build()
    sc = MaskScenario.for_graph(g, [3])
    seen = []

    def spy(X, P, C):
        seen.append(X.copy())
        return np.zeros_like(X)

    v = np.random.default_rng(1).standard_normal((125, 400))
    reconstruct_full(v, 0.0, spy, sc)
    for X in seen:
        assert not X[:, sc.masked_nodes].any()
        assert not X[:, sc.unobserved_nodes].any()


def test_neighbor_average():
    g = FacadeGraph.build(3, 3, [0, 2, 6, 8])
    sc = MaskScenario.for_graph(g)
    v = np.zeros((9, 4))
    v[[0, 2, 6, 8]] = np.array([1.0, 2.0, 3.0, 4.0])[:, None]
    out = neighbor_average(v, g, sc)
    avail = set(sc.available_nodes)
    for i, nb in enumerate(g.neighbors()):
        obs = [j for j in nb if j in avail]
        expect = np.mean([v[j, 0] for j in obs]) if obs else 0.0
        assert out[i, 0] == expect


def test_metric_cases():
    r = np.array([0.0, 1.0, 3.0, 2.0])
    assert metrics(r, r) == (0.0, 0.0, 1.0)
    rm, ma, pe = metrics(r + 0.5, r)
    assert (rm, ma) == (0.5, 0.5) and pe == pytest.approx(1.0, abs=1e-15)
    rm, ma, pe = metrics([0.0, 2.0], [0.0, 1.0])
    assert rm == pytest.approx(math.sqrt(0.5), abs=1e-15)
    assert ma == 0.5 and pe == 1.0
    assert math.isnan(metrics([1.0, 1.0, 1.0], [0.0, 1.0, 2.0])[2])


def test_welch_sine_peak():
    fs = 1000.0
    t = np.arange(7600) / fs
    f, p = welch_psd(np.sin(2 * np.pi * 50 * t), fs)
    assert f[np.argmax(p)] == f[np.argmin(np.abs(f - 50))]


def test_welch_constant_and_white():
    f, p = welch_psd(np.full(2000, 4.2), 1000.0)
    assert p.max() < 1e-20
    x = np.random.default_rng(0).standard_normal(7600)
    f, p = welch_psd(x, 1000.0)
    assert abs(band_energy(f, p) - 1) < 0.1
    with pytest.raises(DataError, match="nperseg"):
        welch_psd(x[:100], 1000.0)


def test_bandpower_error_cases():
    f = np.linspace(0, 500, 129)
    ref = np.ones_like(f)
    assert bandpower_error(f, ref, ref) == 0.0
    assert bandpower_error(f, 1.2 * ref, ref) == pytest.approx(0.2, abs=1e-15)
    fine = np.linspace(0, 500, 100_001)
    cut = np.where(fine <= 250, 1.0, 0.0)
    assert bandpower_error(fine, cut, np.ones_like(fine)) == pytest.approx(0.5, abs=1e-4)
    assert math.isnan(bandpower_error(f, ref, np.zeros_like(f)))


def test_aggregate_two_directions():
    reps = [{"masked": {"summary": {"rmse": 0.1, "mae": 0.1, "pearson": 0.9, "psd_rel_err": 0.1}}},
            {"masked": {"summary": {"rmse": 0.3, "mae": 0.2, "pearson": 0.8, "psd_rel_err": 0.2}}}]
    row = aggregate(reps, "A", "masked")
    assert row["rmse"] == pytest.approx(0.2)
    assert row["rmse_std"] == pytest.approx(0.1414, abs=1e-4)
    single = aggregate(reps[:1], "A", "masked")
    assert single["rmse_std"] == 0.0 and single["single_direction"]


def test_table_format():
    row = {"facade": "A", **{k: 0.5 for k in ("rmse", "mae", "pearson", "psd_rel_err")},
           **{k + "_std": 0.01 for k in ("rmse", "mae", "pearson", "psd_rel_err")}}
    lines = format_table([row]).splitlines()
    assert lines[0].split("\t") == list(TABLE_COLUMNS)
    cells = lines[1].split("\t")
    assert cells[0] == "A" and cells[4] == "50.000 (± 1.000)"


def test_evaluate_fields_zero_variance_flagged(caplog):
    g = FacadeGraph.build(3, 3, [0, 2, 6, 8])
    sc = MaskScenario.for_graph(g, [0])
    ref = np.random.default_rng(0).standard_normal((9, 300))
    pred = ref.copy()
    pred[1] = 0.0  # an unobserved node predicted flat
    with caplog.at_level(logging.WARNING):
        rep = evaluate_fields(pred, ref, sc, 1000.0, 128)
    assert "undefined pearson" in caplog.text
    assert rep["masked"]["summary"]["rmse"] == 0.0
    assert rep["unobserved"]["summary"]["count"] == 5


def test_stats_json_round_trip():
    s = NormalizationStats(5.0, np.array([1.0, 2.0]), np.array([0.5, 3.0]))
    s2 = NormalizationStats.from_json(s.to_json())
    assert s2.direction_deg == 5.0
    np.testing.assert_array_equal(s2.std, s.std)

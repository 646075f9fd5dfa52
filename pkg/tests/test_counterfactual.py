import dataclasses

import numpy as np
import pandas as pd
import pytest

from conftest import make_panel, subject_rows
from core.counterfactual import (
    InsufficientUntreatedData,
    build_manipulated_panel,
    counterfactual_summary,
    impute_counterfactual,
    treated_averages,
)


def _declining_panel():
    """未治疗时 L 每期恰好下降 1；个体 t 在 S=3 开始治疗，t=6 发生事件"""
    rows = []
    for k, start in enumerate([20.0, 15.0, 12.0]):
        rows += subject_rows(f"u{k}", [start - t for t in range(8)])
    rows += subject_rows("t", [12.0, 11.0, 10.0, 12.0, 13.0, 14.0, 15.0], start=3, event=True)
    return make_panel(rows)


def test_counterfactual_domain_and_hand_iteration():
    cf = impute_counterfactual(_declining_panel(), ["L"])
    assert cf.treated_ids.tolist() == ["t"]
    assert cf.L0["t"].tolist() == [3, 4, 5, 6]
    # 第 S 行在治疗决定前测得，作为起点保留
    assert cf.L0["L"].to_numpy() == pytest.approx([12.0, 11.0, 10.0, 9.0], abs=1e-9)
    assert cf.L1["L"].tolist() == [12.0, 13.0, 14.0, 15.0]


def test_manipulated_panel_replaces_only_treated_rows():
    panel = _declining_panel()
    cf = impute_counterfactual(panel, ["L"])
    manipulated = build_manipulated_panel(cf)
    before = panel.frame
    after = manipulated.frame
    untouched = (before["id"] != "t") | (before["t"] < 3)
    pd.testing.assert_frame_equal(after[untouched], before[untouched])
    treated = after[after["id"] == "t"].set_index("t")
    assert treated.loc[[3, 4, 5], "L"].to_numpy() == pytest.approx([12.0, 11.0, 10.0])
    assert treated.loc[[3, 4, 5], "treat"].tolist() == [1, 1, 1]


def test_untreated_panel_gives_empty_counterfactual():
    rows = subject_rows("a", [1.0, 2.0]) + subject_rows("b", [2.0, 3.0])
    panel = make_panel(rows)
    cf = impute_counterfactual(panel, ["L"])
    assert cf.is_empty
    pd.testing.assert_frame_equal(build_manipulated_panel(cf).frame, panel.frame)
    assert treated_averages(cf).r.sum() == 0
    assert cf.to_frame().empty


def test_treatment_from_start_seeds_with_baseline_value():
    rows = []
    for k in range(3):
        rows += subject_rows(f"u{k}", [10.0 + k - t for t in range(4)])
    rows += subject_rows("t", [8.0, 9.0, 10.0, 11.0], start=0)
    cf = impute_counterfactual(make_panel(rows), ["L"])
    assert cf.L0["t"].tolist() == [0, 1, 2, 3]
    assert cf.L0["L"].to_numpy() == pytest.approx([8.0, 7.0, 6.0, 5.0], abs=1e-9)


def test_no_untreated_increments_is_an_error():
    rows = subject_rows("a", [1.0, 2.0, 3.0], start=0) + subject_rows("b", [2.0, 3.0], start=1)
    with pytest.raises(InsufficientUntreatedData):
        impute_counterfactual(make_panel(rows), ["L"])


def test_treated_averages_mean_of_two():
    rows = []
    for k in range(3):
        rows += subject_rows(f"u{k}", [10.0 + k - t for t in range(4)])
    rows += subject_rows("t1", [9.0, 8.0, 4.0, 4.0], start=1)
    rows += subject_rows("t2", [9.0, 8.0, 6.0, 6.0], start=1)
    avgs = treated_averages(impute_counterfactual(make_panel(rows), ["L"]))
    assert avgs.r.tolist() == [0, 0, 2, 2]
    assert avgs.a_hat[2, 0] == pytest.approx(5.0)
    assert np.isnan(avgs.a_hat[0, 0])
    assert avgs.difference()[0, 0] == 0.0


def test_treated_averages_match_groupby_oracle(small_cohort):
    cf = impute_counterfactual(small_cohort.observed, ["L"])
    avgs = treated_averages(cf)
    starts = cf.L1["id"].map(cf.treatment_start)
    in_risk = starts < cf.L1["t"]
    oracle_a = cf.L1[in_risk].groupby("t")["L"].mean()
    oracle_b = cf.L0[in_risk].groupby("t")["L"].mean()
    for t, value in oracle_a.items():
        assert avgs.a_hat[t, 0] == pytest.approx(value, rel=1e-12)
        assert avgs.b_hat[t, 0] == pytest.approx(oracle_b[t], rel=1e-12)


def test_treatment_raising_covariate_gives_lower_counterfactual(small_cohort):
    cf = impute_counterfactual(small_cohort.observed, ["L"])
    summary = counterfactual_summary(cf)
    assert summary["treated_subjects"] > 0
    assert summary["mean_L0_L"] < summary["mean_L1_L"]


def test_pre_treatment_rows_never_modified(small_cohort):
    panel = small_cohort.observed
    manipulated = build_manipulated_panel(impute_counterfactual(panel, ["L"]))
    pre = panel.row_treatment_start() > panel.frame["t"].to_numpy()
    np.testing.assert_array_equal(
        manipulated.frame.loc[pre, "L"].to_numpy(), panel.frame.loc[pre, "L"].to_numpy()
    )


def test_counterfactual_starts_from_value_at_treatment_start(small_cohort):
    cf = impute_counterfactual(small_cohort.observed, ["L"])
    starts = cf.L0["id"].map(cf.treatment_start).to_numpy()
    at_start = cf.L0["t"].to_numpy() == starts
    assert at_start.sum() == len(cf.treated_ids)
    np.testing.assert_array_equal(
        cf.L0.loc[at_start, "L"].to_numpy(), cf.L1.loc[at_start, "L"].to_numpy()
    )
    assert set(cf.to_frame()["provenance"]) == {"observed", "counterfactual"}


def test_treated_averages_ignore_row_order(small_cohort):
    cf = impute_counterfactual(small_cohort.observed, ["L"])
    order = np.random.default_rng(0).permutation(len(cf.L0))
    shuffled = dataclasses.replace(
        cf,
        L0=cf.L0.iloc[order].reset_index(drop=True),
        L1=cf.L1.iloc[order].reset_index(drop=True),
    )
    before = treated_averages(cf)
    after = treated_averages(shuffled)
    np.testing.assert_array_equal(after.r, before.r)
    np.testing.assert_allclose(after.a_hat, before.a_hat, rtol=1e-12)
    np.testing.assert_allclose(after.b_hat, before.b_hat, rtol=1e-12)

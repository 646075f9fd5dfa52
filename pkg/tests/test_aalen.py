import numpy as np
import pytest
from scipy import stats

from conftest import make_panel, subject_rows
from core.aalen import UnknownCoefficient, curve_at, fit_additive, slope_test


def nelson_aalen(panel):
    """独立实现：每个区间事件数 / 风险集大小 的累积和"""
    df = panel.frame
    out = []
    total = 0.0
    for t in panel.grid:
        rows = df[df["t"] == t]
        if len(rows):
            total += rows["event"].sum() / len(rows)
        out.append(total)
    return np.array(out)


def test_intercept_only_is_nelson_aalen(nelson_aalen_panel):
    fit = fit_additive(nelson_aalen_panel, [])
    assert fit.coef_names == ("const",)
    assert fit.increments[:, 0] == pytest.approx([0.0, 0.0, 1.0 / 3.0], abs=1e-15)
    assert fit.cumulative[:, 0] == pytest.approx(nelson_aalen(nelson_aalen_panel), abs=1e-12)


def test_intercept_only_matches_oracle_on_random_panels():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        rows = []
        for k in range(int(rng.integers(2, 12))):
            exit_t = int(rng.integers(0, 6))
            values = list(rng.normal(size=exit_t + 1))
            rows += subject_rows(f"s{k}", values, event=bool(rng.random() < 0.6))
        panel = make_panel(rows)
        fit = fit_additive(panel, [])
        assert np.max(np.abs(fit.cumulative[:, 0] - nelson_aalen(panel))) < 1e-12


def test_binary_covariate_two_by_two():
    rows = [
        ("a", 0, 0, 1, 0, 1.0),
        ("b", 0, 0, 0, 1, 0.0),
    ]
    fit = fit_additive(make_panel(rows, covariates=("x",)), ["x"])
    assert fit.increments[0] == pytest.approx([0.0, 1.0], abs=1e-12)


def test_unit_weights_equal_no_weights(small_cohort):
    panel = small_cohort.observed
    plain = fit_additive(panel, ["treat", "L"])
    weighted = fit_additive(panel, ["treat", "L"], np.ones(len(panel.frame)))
    np.testing.assert_allclose(weighted.cumulative, plain.cumulative, rtol=0, atol=1e-12)


def test_zero_covariate_leaves_other_curves_unchanged(small_cohort):
    panel = small_cohort.observed
    frame = panel.frame.copy()
    frame["z"] = 0.0
    extended = type(panel).from_frame(frame, ("L",), ("z",))
    base = fit_additive(panel, ["treat", "L"])
    with_zero = fit_additive(extended, ["treat", "L", "z"])
    np.testing.assert_allclose(with_zero.cumulative[:, :3], base.cumulative, atol=1e-12)
    assert np.all(with_zero.cumulative[:, 3] == 0.0)
    assert with_zero.zero_columns


def test_singular_interval_is_skipped_and_recorded():
    # t=0: x identical to the intercept for everyone at risk
    rows = [
        ("a", 0, 0, 0, 0, 1.0),
        ("a", 1, 0, 1, 0, 1.0),
        ("b", 0, 0, 1, 0, 1.0),
        ("c", 0, 0, 0, 0, 1.0),
        ("c", 1, 0, 0, 1, 0.0),
    ]
    fit = fit_additive(make_panel(rows, covariates=("x",)), ["x"])
    assert fit.diagnostics == {0: "singular_design"}
    assert np.all(fit.increments[0] == 0.0)
    assert fit.increments[1] == pytest.approx([0.0, 1.0], abs=1e-12)


def test_robust_variance_is_nonnegative(small_cohort):
    fit = fit_additive(small_cohort.observed, ["treat", "L"])
    diag = np.diagonal(fit.robust_cov, axis1=1, axis2=2)
    assert np.all(diag >= -1e-15)


def test_slope_test_null_case(nelson_aalen_panel):
    frame = nelson_aalen_panel.frame.copy()
    frame["x"] = 0.0
    panel = type(nelson_aalen_panel).from_frame(frame, ("L",), ("x",))
    result = slope_test(fit_additive(panel, ["x"]), "x")
    assert result.statistic == 0.0
    assert result.p_value == 1.0


def test_slope_test_detects_protective_treatment():
    from core.simulate import RegimeConfig, generate_cohort

    cohort = generate_cohort(RegimeConfig(regime="randomized", n=3000, seed=4, base_prob=0.3))
    fit = fit_additive(cohort.observed, ["treat"])
    result = slope_test(fit, "treat")
    assert result.statistic < 0
    assert result.p_value < 0.05


def test_slope_test_rejects_unknown_weighting(nelson_aalen_panel):
    fit = fit_additive(nelson_aalen_panel, [])
    with pytest.raises(ValueError):
        slope_test(fit, "const", "median")


def test_curve_at_step_function(small_cohort):
    fit = fit_additive(small_cohort.observed, ["treat", "L"])
    j = fit.index("treat")
    assert curve_at(fit, "treat", -0.5) == (0.0, 0.0)
    value, _ = curve_at(fit, "treat", 1000)
    assert value == fit.cumulative[-1, j]
    for t in range(len(fit.times)):
        value, se = curve_at(fit, "treat", t + 0.5)
        assert value == pytest.approx(np.sum(fit.increments[: t + 1, j]), abs=1e-12)
        assert se == pytest.approx(fit.robust_se("treat")[t])


def test_unknown_coefficient(nelson_aalen_panel):
    fit = fit_additive(nelson_aalen_panel, [])
    with pytest.raises(UnknownCoefficient):
        curve_at(fit, "treat", 1)


def test_subject_relabelling_and_row_order_do_not_change_fit(small_cohort):
    panel = small_cohort.observed
    ids = panel.ids
    labels = np.random.default_rng(3).permutation([f"p{k:05d}" for k in range(len(ids))])
    frame = panel.frame.copy()
    frame["id"] = frame["id"].map(dict(zip(ids, labels)))
    shuffled = panel.with_frame(frame.sample(frac=1.0, random_state=5))
    base = fit_additive(panel, ["treat", "L"])
    again = fit_additive(shuffled, ["treat", "L"])
    np.testing.assert_allclose(again.cumulative, base.cumulative, rtol=0, atol=1e-12)
    np.testing.assert_allclose(again.robust_cov, base.robust_cov, rtol=1e-9, atol=1e-15)


def test_weight_scale_does_not_change_fit(small_cohort):
    panel = small_cohort.observed
    w = np.random.default_rng(8).uniform(0.5, 2.0, len(panel.frame))
    base = fit_additive(panel, ["treat", "L"], w)
    scaled = fit_additive(panel, ["treat", "L"], 7.5 * w)
    np.testing.assert_allclose(scaled.cumulative, base.cumulative, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(scaled.robust_cov, base.robust_cov, rtol=1e-8, atol=1e-15)


@pytest.mark.slow
def test_slope_test_p_values_uniform_under_null():
    from core.simulate import RegimeConfig, generate_cohort

    p_values = []
    for rep in range(200):
        cfg = RegimeConfig(
            regime="randomized", n=600, seed=41, replicate=rep, aB=0.0, drift_treated=-1.0
        )
        fit = fit_additive(generate_cohort(cfg).observed, ["treat"])
        p_values.append(slope_test(fit, "treat").p_value)
    p_values = np.asarray(p_values)
    assert stats.kstest(p_values, "uniform").pvalue > 0.001
    assert 0.01 <= np.mean(p_values < 0.05) <= 0.1


@pytest.mark.slow
def test_slope_test_power_against_protective_treatment():
    from core.simulate import RegimeConfig, generate_cohort

    rejected = []
    for rep in range(20):
        cfg = RegimeConfig(regime="randomized", n=3000, seed=43, replicate=rep, base_prob=0.3)
        fit = fit_additive(generate_cohort(cfg).observed, ["treat"])
        rejected.append(slope_test(fit, "treat").p_value < 0.05)
    assert np.mean(rejected) >= 0.8

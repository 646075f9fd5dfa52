import numpy as np
import pytest

from conftest import make_panel, subject_rows
from core.aalen import AdditiveFit, fit_additive
from core.att import (
    AttSettings,
    GridMismatch,
    att_direct,
    att_shortcut,
    bootstrap_band,
    estimate_att,
    mediation_decompose,
    resample_subjects,
)
from core.counterfactual import (
    NoTreatedPersonTime,
    TreatedAverages,
    build_manipulated_panel,
    impute_counterfactual,
    treated_averages,
)
from core.simulate import RegimeConfig, generate_cohort


def _fit(treat_inc, gamma_inc):
    """治疗与一个协变量的手工拟合结果"""
    T = len(treat_inc)
    increments = np.column_stack([np.zeros(T), treat_inc, gamma_inc])
    return AdditiveFit(
        coef_names=("const", "treat", "L"),
        times=np.arange(T),
        increments=increments,
        cumulative=np.cumsum(increments, axis=0),
        robust_cov=np.zeros((T, 3, 3)),
        increment_var=np.zeros((T, 3)),
        at_risk=np.full(T, 10),
        n_events=3,
    )


def _averages(a, b):
    a = np.asarray(a, dtype=float)[:, None]
    b = np.asarray(b, dtype=float)[:, None]
    return TreatedAverages(("L",), np.arange(len(a)), a, b, np.full(len(a), 2))


def test_equal_averages_give_direct_effect():
    fit = _fit([0.0, -0.01, -0.02, 0.005], [0.0, 0.1, 0.2, 0.3])
    curve = att_direct(fit, _averages([0, 4, 5, 6], [0, 4, 5, 6]))
    np.testing.assert_array_equal(curve.values, fit.cumulative[:, 1])


def test_one_term_hand_sum():
    fit = _fit([0.0, -0.01, -0.02, 0.0], [0.0, 0.1, 0.0, 0.0])
    curve = att_direct(fit, _averages([0, 5, 5, 5], [0, 3, 5, 5]))
    assert curve.values[0] == pytest.approx(fit.cumulative[0, 1])
    assert curve.values[1:] == pytest.approx(fit.cumulative[1:, 1] + 0.2, abs=1e-15)


def test_grid_mismatch():
    fit = _fit([0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    with pytest.raises(GridMismatch):
        att_direct(fit, _averages([0, 1], [0, 1]))


def test_mediation_additivity(small_cohort):
    panel = small_cohort.observed
    fit = fit_additive(panel, ["treat", "L"])
    avgs = treated_averages(impute_counterfactual(panel, ["L"]))
    direct, indirect = mediation_decompose(fit, avgs)
    total = att_direct(fit, avgs)
    np.testing.assert_array_equal(direct.values + indirect.values, total.values)


def test_mediation_without_covariate_difference_has_no_indirect_part():
    fit = _fit([0.0, -0.01, -0.02], [0.0, 0.3, 0.3])
    _, indirect = mediation_decompose(fit, _averages([1, 2, 3], [1, 2, 3]))
    assert np.all(indirect.values == 0.0)


def test_shortcut_without_covariates_is_treatment_curve(small_cohort):
    panel = small_cohort.observed
    curve = att_shortcut(panel, [])
    fit = fit_additive(panel, ["treat"])
    np.testing.assert_array_equal(curve.values, fit.cumulative[:, 1])
    assert curve.variance is not None


def test_estimate_att_pipeline_matches_manual_shortcut(small_cohort):
    panel = small_cohort.observed
    settings = AttSettings(covariates=("L",))
    curve = estimate_att(panel, settings, "shortcut")
    manual = att_shortcut(build_manipulated_panel(impute_counterfactual(panel, ["L"])), ["treat", "L"])
    np.testing.assert_allclose(curve.values, manual.values, atol=1e-14)


def test_no_treated_person_time():
    rows = subject_rows("a", [1.0, 2.0, 3.0], event=True) + subject_rows("b", [2.0, 1.0, 0.0])
    with pytest.raises(NoTreatedPersonTime, match="no treated person-time"):
        estimate_att(make_panel(rows), AttSettings(covariates=("L",)))


def test_resample_keeps_whole_trajectories(small_cohort):
    panel = small_cohort.observed
    sample = resample_subjects(panel, np.random.default_rng(1))
    assert sample.n_subjects == panel.n_subjects
    originals = sample.frame["id"].str.split("#").str[0]
    sizes = sample.frame.groupby("id").size()
    expected = panel.frame.groupby("id").size()
    for sid, size in sizes.items():
        assert size == expected[sid.split("#")[0]]
    assert set(originals) <= set(panel.ids)


@pytest.fixture(scope="module")
def bootstrap_cohort():
    return generate_cohort(RegimeConfig(regime="2", n=300, seed=21))


def test_single_replicate_band_collapses(bootstrap_cohort):
    band = bootstrap_band("shortcut", bootstrap_cohort.observed, 1, seed=5)
    np.testing.assert_array_equal(band.lower, band.upper)
    assert band.meta["replicates"] == 1
    assert band.meta["succeeded"] == 1


def test_bootstrap_is_reproducible_across_workers(bootstrap_cohort):
    panel = bootstrap_cohort.observed
    serial = bootstrap_band("shortcut", panel, 4, seed=8, n_jobs=1)
    parallel = bootstrap_band("shortcut", panel, 4, seed=8, n_jobs=2)
    np.testing.assert_array_equal(serial.lower, parallel.lower)
    np.testing.assert_array_equal(serial.upper, parallel.upper)
    assert np.all(serial.lower <= serial.upper)


def test_bootstrap_rejects_bad_level(bootstrap_cohort):
    with pytest.raises(ValueError):
        bootstrap_band("shortcut", bootstrap_cohort.observed, 2, level=1.5)


def test_wider_level_contains_narrower_band(bootstrap_cohort):
    panel = bootstrap_cohort.observed
    narrow = bootstrap_band("shortcut", panel, 20, level=0.5, seed=13)
    wide = bootstrap_band("shortcut", panel, 20, level=0.9, seed=13)
    assert np.all(wide.lower <= narrow.lower)
    assert np.all(wide.upper >= narrow.upper)


def test_affine_recoding_of_covariate_leaves_att_unchanged(bootstrap_cohort):
    panel = bootstrap_cohort.observed
    frame = panel.frame.copy()
    frame["L"] = 2.0 * frame["L"] + 3.0
    recoded = panel.with_frame(frame)
    settings = AttSettings(covariates=("L",))
    base = estimate_att(panel, settings)
    again = estimate_att(recoded, settings)
    np.testing.assert_allclose(again.values, base.values, rtol=0, atol=1e-9)
    band = bootstrap_band("shortcut", panel, 5, seed=17)
    band_recoded = bootstrap_band("shortcut", recoded, 5, seed=17)
    np.testing.assert_allclose(band_recoded.lower, band.lower, rtol=0, atol=1e-9)
    np.testing.assert_allclose(band_recoded.upper, band.upper, rtol=0, atol=1e-9)


@pytest.mark.slow
def test_effect_through_covariate_only_is_indirect():
    direct_final, indirect_final = [], []
    for rep in range(5):
        cohort = generate_cohort(RegimeConfig(regime="2", n=2000, seed=29, replicate=rep, aB=0.0))
        panel = cohort.observed
        fit = fit_additive(panel, ["treat", "L"])
        avgs = treated_averages(impute_counterfactual(panel, ["L"]))
        direct, indirect = mediation_decompose(fit, avgs)
        direct_final.append(direct.values[-1])
        indirect_final.append(indirect.values[-1])
    assert abs(np.mean(direct_final)) < 0.03
    assert np.mean(indirect_final) < -0.02

import numpy as np
import pandas as pd
import pytest

from conftest import make_panel, subject_rows
from core.flim import (
    MissingBaseline,
    NonEstimableGap,
    fit_flim,
    impute_hypothetical,
    observation_mask,
)
from core.panel import Panel


def _scalar_panel():
    rows = subject_rows("1", [1.0, 2.0]) + subject_rows("2", [2.0, 4.0])
    return make_panel(rows, covariates=("K",))


def test_scalar_least_squares_by_hand():
    fit = fit_flim(_scalar_panel(), ["K"], include_constant=False)
    assert fit.regressor_names == ("K",)
    # (1·1 + 2·2) / (1² + 2²)
    assert fit.beta(1)[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert fit.fitted_counts.tolist() == [2]


def test_zero_increments_give_zero_coefficients():
    rows = subject_rows("1", [3.0, 3.0, 3.0]) + subject_rows("2", [5.0, 5.0, 5.0])
    fit = fit_flim(make_panel(rows, covariates=("K",)), ["K"])
    assert np.all(np.abs(fit.betas) < 1e-12)
    assert fit.estimable.all()


def test_one_step_imputation_by_hand():
    fit = fit_flim(_scalar_panel(), ["K"], include_constant=False)
    target = make_panel(
        [("x", 0, 0, 0, 0, 2.0), ("x", 1, 0, 0, 0, np.nan)], covariates=("K",)
    )
    imputed = impute_hypothetical(fit, target)
    assert imputed.values["K"].tolist() == [2.0, 4.0]
    assert imputed.provenance["K"].tolist() == ["observed", "imputed"]


def test_observation_overrides_state():
    rows = (
        subject_rows("1", [1.0, 2.0, 4.0])
        + subject_rows("2", [2.0, 4.0, 8.0])
    )
    fit = fit_flim(make_panel(rows, covariates=("K",)), ["K"], include_constant=False)
    target = make_panel(
        [("x", 0, 0, 0, 0, 2.0), ("x", 1, 0, 0, 0, np.nan), ("x", 2, 0, 0, 0, 9.0)],
        covariates=("K",),
    )
    imputed = impute_hypothetical(fit, target)
    assert imputed.values["K"].iloc[1] == pytest.approx(4.0)
    assert imputed.values["K"].iloc[2] == 9.0


def test_no_missingness_is_identity(small_cohort):
    panel = small_cohort.observed
    fit = fit_flim(panel, ["L"])
    imputed = impute_hypothetical(fit, panel)
    np.testing.assert_array_equal(imputed.values["L"].to_numpy(), panel.frame["L"].to_numpy())
    assert set(imputed.provenance["L"]) == {"observed"}


def test_observed_cells_never_altered():
    rng = np.random.default_rng(9)
    records = []
    for k in range(40):
        values = list(np.cumsum(rng.normal(size=6)) + 10.0)
        for t, value in enumerate(values):
            if t > 0 and rng.random() < 0.3:
                value = np.nan
            records.append((f"s{k:02d}", t, 0, 0, 0, value))
    panel = make_panel(records)
    fit = fit_flim(panel, ["L"])
    imputed = impute_hypothetical(fit, panel)
    measured = panel.frame["L"].notna().to_numpy()
    np.testing.assert_array_equal(
        imputed.values["L"].to_numpy()[measured], panel.frame["L"].to_numpy()[measured]
    )
    assert imputed.values["L"].notna().all()


def test_linear_dynamics_are_recovered():
    rng = np.random.default_rng(17)
    n, T = 2000, 4
    K = np.empty((n, T + 1))
    K[:, 0] = rng.normal(10.0, 2.0, size=n)
    for t in range(1, T + 1):
        K[:, t] = K[:, t - 1] + 0.5 * K[:, t - 1] + rng.normal(size=n)
    records = [
        (f"{i:04d}", t, 0, 0, 0, K[i, t]) for i in range(n) for t in range(T + 1)
    ]
    fit = fit_flim(make_panel(records, covariates=("K",)), ["K"])
    slopes = fit.betas[:, 1, 0]
    assert np.all(np.abs(slopes - 0.5) < 0.05)


def test_missing_first_row_is_rejected():
    fit = fit_flim(_scalar_panel(), ["K"], include_constant=False)
    target = make_panel([("x", 0, 0, 0, 0, np.nan)], covariates=("K",))
    with pytest.raises(MissingBaseline):
        impute_hypothetical(fit, target)


def test_non_estimable_interval_reuses_earlier_coefficients():
    rows = (
        subject_rows("1", [1.0, 2.0, np.nan])
        + subject_rows("2", [2.0, 4.0, np.nan])
    )
    fit = fit_flim(make_panel(rows, covariates=("K",)), ["K"], include_constant=False)
    assert fit.non_estimable == [2]
    assert fit.reused_from == {2: 1}
    np.testing.assert_array_equal(fit.beta(2), fit.beta(1))
    frame = fit.to_frame()
    assert frame.loc[frame["t"] == 2, "estimated_at"].tolist() == [1]


def test_gap_before_first_estimable_interval_raises():
    rows = subject_rows("1", [1.0, np.nan, 3.0]) + subject_rows("2", [2.0, np.nan, 5.0])
    fit = fit_flim(make_panel(rows, covariates=("K",)), ["K"], include_constant=False)
    assert not fit.estimable.any()
    with pytest.raises(NonEstimableGap):
        fit.beta(1)


def test_restrict_measured_ignores_carried_values():
    frame = pd.DataFrame(
        {
            "id": ["1", "1", "1"],
            "t": [0, 1, 2],
            "treat": [0, 0, 0],
            "event": [0, 0, 0],
            "censor": [0, 0, 0],
            "K": [1.0, 1.0, 3.0],
            "obs_K": [1, 0, 1],
        }
    )
    panel = Panel.from_frame(frame, ("K",))
    assert observation_mask(panel, ("K",))[:, 0].tolist() == [True, True, True]
    assert observation_mask(panel, ("K",), restrict_measured=True)[:, 0].tolist() == [
        True,
        False,
        True,
    ]


def test_coefficients_only_see_their_own_increments(small_cohort):
    panel = small_cohort.observed
    base = fit_flim(panel, ["L"])
    frame = panel.frame.copy()
    frame.loc[frame["t"] >= 6, "L"] += 5.0
    changed = fit_flim(panel.with_frame(frame), ["L"])
    early = base.times <= 5
    np.testing.assert_array_equal(changed.betas[early], base.betas[early])
    assert not np.allclose(changed.beta(6), base.beta(6))


def test_imputation_is_affine_in_the_starting_value(small_cohort):
    fit = fit_flim(small_cohort.observed, ["L"])

    def path(start):
        rows = [("x", t, 0, 0, 0, start if t == 0 else np.nan) for t in range(5)]
        return impute_hypothetical(fit, make_panel(rows)).values["L"].to_numpy()

    low, mid, high = path(10.0), path(12.0), path(14.0)
    np.testing.assert_allclose(high - mid, mid - low, rtol=1e-10)
    gain = np.cumprod([1.0 + fit.beta(t)[1, 0] for t in range(1, 5)])
    np.testing.assert_allclose((mid - low)[1:], 2.0 * gain, rtol=1e-10)

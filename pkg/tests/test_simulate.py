import logging

import numpy as np
import pandas as pd
import pytest

from core.aalen import fit_additive
from core.counterfactual import NoTreatedPersonTime
from core.simulate import (
    CLAMP_RATE_LIMIT,
    COUNTERFACTUAL_PREFIX,
    InvalidConfig,
    RegimeConfig,
    build_full_counterfactual,
    generate_cohort,
    regime_configs,
)


def test_same_seed_same_cohort():
    a = generate_cohort(RegimeConfig(regime="2", n=200, seed=5))
    b = generate_cohort(RegimeConfig(regime="2", n=200, seed=5))
    pd.testing.assert_frame_equal(a.observed.frame, b.observed.frame)
    pd.testing.assert_frame_equal(a.truth, b.truth)


def test_replicates_use_distinct_streams():
    a = generate_cohort(RegimeConfig(regime="2", n=200, seed=5, replicate=0))
    b = generate_cohort(RegimeConfig(regime="2", n=200, seed=5, replicate=1))
    first_a = a.observed.frame.groupby("id")["L"].first().to_numpy()
    first_b = b.observed.frame.groupby("id")["L"].first().to_numpy()
    assert not np.array_equal(first_a, first_b)


def test_baseline_range_and_ids():
    cohort = generate_cohort(RegimeConfig(regime="3", n=300, seed=2))
    first = cohort.observed.frame.groupby("id")["L"].first()
    assert first.min() >= 5.0
    assert first.max() <= np.sqrt(1000.0)
    assert first.index[0] == "00001"
    assert cohort.observed.n_subjects == 300


def test_inert_treatment_gives_identical_arms():
    cfg = RegimeConfig(regime="1", n=300, seed=9, aB=0.0, drift_treated=-1.0)
    cohort = generate_cohort(cfg)
    obs = cohort.observed.frame.drop(columns="treat")
    cf = cohort.counterfactual_untreated.frame.drop(columns="treat")
    pd.testing.assert_frame_equal(obs, cf)
    assert np.all(cohort.truth["true_att"] == 0.0)


def test_regime_one_treats_low_covariate_subjects():
    cohort = generate_cohort(RegimeConfig(regime="1", n=1000, seed=1))
    frame = cohort.observed.frame
    first = frame.groupby("id")["L"].first()
    treated = frame.groupby("id")["treat"].max() == 1
    assert treated.any() and (~treated).any()
    assert first[treated].mean() < first[~treated].mean()


def test_counterfactual_arm_is_never_treated(small_cohort):
    assert small_cohort.counterfactual_untreated.frame["treat"].sum() == 0
    truth = small_cohort.truth
    assert list(truth.columns) == ["t", "r", "hazard_difference", "true_att"]
    assert truth["r"].iloc[0] == 0


def test_full_counterfactual_holds_both_arms_after_start(small_cohort):
    full = build_full_counterfactual(small_cohort)
    starts = small_cohort.observed.treatment_start()
    treated = starts[np.isfinite(starts.to_numpy())]
    frame = full.frame
    is_copy = frame["id"].str.startswith(COUNTERFACTUAL_PREFIX)
    source = frame["id"].str.removeprefix(COUNTERFACTUAL_PREFIX)
    assert set(source) <= set(treated.index)
    assert np.all(frame["t"].to_numpy() > source.map(treated).to_numpy())
    assert frame.loc[is_copy, "treat"].sum() == 0
    assert np.all(frame.loc[~is_copy, "treat"] == 1)
    obs = small_cohort.observed.frame
    expected = obs[obs["id"].isin(treated.index)]
    expected = expected[expected["t"] > expected["id"].map(treated)]
    assert int((~is_copy).sum()) == len(expected)


def test_full_counterfactual_needs_treated_subjects():
    cohort = generate_cohort(RegimeConfig(regime="1", n=20, seed=4, base_prob=1e-9))
    with pytest.raises(NoTreatedPersonTime):
        build_full_counterfactual(cohort)


def test_simulated_reference_tracks_truth():
    finals, truths = [], []
    for rep in range(4):
        cohort = generate_cohort(RegimeConfig(regime="1", n=1000, seed=11, replicate=rep))
        fit = fit_additive(build_full_counterfactual(cohort), ["treat"])
        finals.append(fit.cumulative[-1, fit.index("treat")])
        truths.append(cohort.truth["true_att"].iloc[-1])
    assert np.mean(truths) < 0
    assert abs(np.mean(finals) - np.mean(truths)) < 0.25 * abs(np.mean(truths))


@pytest.mark.parametrize("regime", ["1", "2", "3", "randomized"])
def test_treated_share_within_calibration_band(regime):
    cohort = generate_cohort(RegimeConfig(regime=regime, n=2000, seed=1))
    assert 0.4 <= cohort.diagnostics["treated_share"] <= 0.6
    assert cohort.diagnostics["clamp_rate"] <= CLAMP_RATE_LIMIT


def test_clamp_rate_gate_warns(caplog):
    cfg = RegimeConfig(regime="2", n=200, seed=3, L_ref=0.0)
    with caplog.at_level(logging.WARNING, logger="core.simulate"):
        cohort = generate_cohort(cfg)
    assert cohort.diagnostics["clamp_rate"] > CLAMP_RATE_LIMIT
    assert any("截到 [0, 1]" in r.getMessage() for r in caplog.records)


@pytest.mark.parametrize(
    "changes",
    [{"regime": "4"}, {"n": 0}, {"t_max": 0}, {"base_prob": 1.0}, {"dropout_prob": -0.1}],
)
def test_invalid_config(changes):
    with pytest.raises(InvalidConfig):
        generate_cohort(RegimeConfig(**{"regime": "1", "n": 10, **changes}))


def test_regime_configs_share_parameters():
    configs = regime_configs(RegimeConfig(n=50, seed=3), ["1", "randomized"])
    assert [c.regime for c in configs] == ["1", "randomized"]
    assert all(c.n == 50 and c.seed == 3 for c in configs)

"""
核心模块初始化文件
"""

from .aalen import AdditiveFit, fit_additive, slope_test
from .att import (
    AttSettings,
    CumulativeCurve,
    att_direct,
    att_shortcut,
    bootstrap_band,
    estimate_att,
    mediation_decompose,
)
from .config_loader import ConfigLoader
from .constants import *
from .counterfactual import (
    CfPanel,
    build_manipulated_panel,
    impute_counterfactual,
    treated_averages,
)
from .coxph import CoxFit, fit_cox, partial_likelihood
from .error_handler import CausalAttError, ErrorHandler
from .flim import FlimFit, fit_flim, impute_hypothetical
from .panel import Panel, load_panel, locf_expand, risk_set, validate_panel, write_panel
from .result_formatter import ResultFormatter
from .simulate import RegimeConfig, SimCohort, build_full_counterfactual, generate_cohort
from .study import StudyResult, cox_benchmark, replicate_study
from .utils import PipelineUtils
from .weights_msm import fit_pooled_logistic, msm_additive, stabilized_weights

__all__ = [
    "AdditiveFit",
    "fit_additive",
    "slope_test",
    "AttSettings",
    "CumulativeCurve",
    "att_direct",
    "att_shortcut",
    "bootstrap_band",
    "estimate_att",
    "mediation_decompose",
    "ConfigLoader",
    "ErrorType",
    "ErrorSeverity",
    "ERROR_MESSAGES",
    "CfPanel",
    "build_manipulated_panel",
    "impute_counterfactual",
    "treated_averages",
    "CoxFit",
    "fit_cox",
    "partial_likelihood",
    "CausalAttError",
    "ErrorHandler",
    "FlimFit",
    "fit_flim",
    "impute_hypothetical",
    "Panel",
    "load_panel",
    "locf_expand",
    "risk_set",
    "validate_panel",
    "write_panel",
    "ResultFormatter",
    "RegimeConfig",
    "SimCohort",
    "build_full_counterfactual",
    "generate_cohort",
    "StudyResult",
    "cox_benchmark",
    "replicate_study",
    "PipelineUtils",
    "fit_pooled_logistic",
    "msm_additive",
    "stabilized_weights",
]

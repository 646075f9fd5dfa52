"""
逆概率权重与边际结构模型模块

- 合并离散时间逻辑回归（statsmodels Logit），分段常数时间基
- 稳定化治疗权重（治疗开始后冻结）与删失权重，按百分位截断
- 加权加性风险模型（边际结构模型），治疗曲线为 ATE 估计
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy.special import expit
from statsmodels.tools.sm_exceptions import (
    ConvergenceWarning,
    PerfectSeparationError,
    PerfectSeparationWarning,
)

from .aalen import AdditiveFit, fit_additive
from .constants import (
    CENSOR_COL,
    ID_COL,
    INTERCEPT_NAME,
    NEWTON_GRADIENT_TOL,
    NEWTON_MAX_ITER,
    TIME_COL,
    TREAT_COL,
    TREATMENT_NAME,
)
from .error_handler import CausalAttError
from .panel import Panel
from .utils import PipelineUtils

logger = logging.getLogger(__name__)

OUTCOMES = ("treatment_start", "censoring")
DEFAULT_TRUNCATION = (1.0, 99.0)
# 拟合概率离 0/1 小于该值视为完全预测
PERFECT_PREDICTION_EPS = 1e-10
DIVERGENT_COEF = 15.0


# 自定义异常类
class WeightModelError(CausalAttError):
    """权重模型相关基础异常类"""

    pass


class NonConvergence(WeightModelError):
    """牛顿迭代在上限内未收敛"""

    pass


class Separation(WeightModelError):
    """完全分离：极大似然估计不存在"""

    pass


class FormulaError(WeightModelError):
    """模型公式不合法（列不存在、模型不嵌套等）"""

    pass


@dataclass(frozen=True, eq=False)
class PooledLogisticFit:
    """合并逻辑回归结果，保存足够信息以在新行上预测"""

    outcome: str
    coef_names: tuple[str, ...]
    coef: np.ndarray
    covariates: tuple[str, ...]
    time_knots: tuple[int, ...]
    iterations: int
    grad_norm: float
    n_rows: int
    dropped: tuple[str, ...] = ()
    admin_time: int | None = None
    perfect_prediction: bool = False

    def design(self, frame: pd.DataFrame) -> np.ndarray:
        return _design_matrix(frame, self.covariates, self.time_knots)

    def predict(self, frame: pd.DataFrame) -> np.ndarray:
        """逐行预测概率"""
        return expit(self.design(frame) @ self.coef)


@dataclass(frozen=True, eq=False)
class WeightSet:
    """逐人-区间权重，frame 与面板行对齐：id, t, w_treat, w_cens, w_comb"""

    frame: pd.DataFrame
    truncation: dict[str, dict[str, Any]] = field(default_factory=dict)

    @property
    def combined(self) -> pd.Series:
        return self.frame["w_comb"]

    def summary(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for col in ("w_treat", "w_cens", "w_comb"):
            out[f"{col}_mean"] = float(self.frame[col].mean())
            out[f"{col}_max"] = float(self.frame[col].max())
        out["truncated"] = float(sum(r["count"] for r in self.truncation.values()))
        return out

    def to_frame(self) -> pd.DataFrame:
        return self.frame.copy()


@dataclass(frozen=True, eq=False)
class WeightModels:
    """治疗模型与删失模型的分子/分母拟合；删失模型可为空"""

    treat_num: PooledLogisticFit
    treat_den: PooledLogisticFit
    cens_num: PooledLogisticFit | None = None
    cens_den: PooledLogisticFit | None = None


def time_knots(grid_length: int, pieces: int) -> tuple[int, ...]:
    """把网格等分为 pieces 段，返回各段起点"""
    pieces = max(1, min(pieces, grid_length))
    return tuple(sorted({int(np.floor(k * grid_length / pieces)) for k in range(pieces)}))


def _resolve_knots(panel: Panel, time_basis: Any) -> tuple[int, ...]:
    if time_basis is None:
        return (0,)
    if time_basis == "quarters":
        return time_knots(len(panel.grid), 4)
    if isinstance(time_basis, int):
        return time_knots(len(panel.grid), time_basis)
    return tuple(int(k) for k in time_basis)


def _basis_names(knots: tuple[int, ...]) -> list[str]:
    return [f"time_{k}" for k in knots[1:]]


def _design_matrix(
    frame: pd.DataFrame, covariates: tuple[str, ...], knots: tuple[int, ...]
) -> np.ndarray:
    t = frame[TIME_COL].to_numpy()
    piece = np.searchsorted(np.asarray(knots), t, side="right") - 1
    cols = [np.ones(len(frame))]
    cols += [(piece == k).astype(float) for k in range(1, len(knots))]
    cols += [frame[c].to_numpy(dtype=float) for c in covariates]
    return np.column_stack(cols)


def model_rows(panel: Panel, outcome: str, admin_time: int | None = None) -> np.ndarray:
    """模型使用的行

    treatment_start: 尚未开始治疗的人时（S ≥ t）；
    censoring: 风险中的人时，不含行政删失区间。
    """
    df = panel.frame
    t = df[TIME_COL].to_numpy()
    if outcome == "treatment_start":
        return panel.row_treatment_start() >= t
    if outcome == "censoring":
        admin = panel.t_max if admin_time is None else admin_time
        return t < admin
    raise FormulaError(f"unknown weight-model outcome: {outcome}")


def _separation_flagged(caught: list[warnings.WarningMessage]) -> bool:
    return any(issubclass(w.category, PerfectSeparationWarning) for w in caught)


def fit_pooled_logistic(
    panel: Panel,
    outcome: str,
    covariates: list[str] | tuple[str, ...] = (),
    time_basis: Any = "quarters",
    admin_time: int | None = None,
) -> PooledLogisticFit:
    """合并离散时间逻辑回归

    由 statsmodels 的 Logit（牛顿法）拟合。收敛以 statsmodels 的结果为准，
    或梯度最大分量满足 PipelineUtils.newton_converged。零方差列剔除并记为系数 0。

    Args:
        panel: LOCF 面板
        outcome: treatment_start 或 censoring
        covariates: 基线与时变协变量
        time_basis: "quarters"、段数、段起点序列或 None（只有常数）
        admin_time: 行政删失区间，默认面板 T_max

    Returns:
        PooledLogisticFit

    Raises:
        FormulaError: 协变量不存在或结局未知
        NonConvergence: 迭代上限内未收敛
        Separation: 出现完全分离，或未收敛且出现完全预测
    """
    covariates = tuple(covariates)
    missing = [c for c in covariates if c not in panel.frame.columns]
    if missing:
        raise FormulaError(f"weight-model covariates not in panel: {missing}")

    knots = _resolve_knots(panel, time_basis)
    rows = model_rows(panel, outcome, admin_time)
    sub = panel.frame.loc[rows]
    y_col = TREAT_COL if outcome == "treatment_start" else CENSOR_COL
    y = sub[y_col].to_numpy(dtype=float)
    X_full = _design_matrix(sub, covariates, knots)
    coef_names = (INTERCEPT_NAME, *_basis_names(knots), *covariates)

    if len(sub) == 0:
        raise FormulaError(f"no person-time available for the {outcome} model")

    keep = np.ones(X_full.shape[1], dtype=bool)
    keep[1:] = X_full[:, 1:].std(axis=0) > 0
    dropped = tuple(n for n, k in zip(coef_names, keep) if not k)
    if dropped:
        logger.warning(f"{outcome} 模型剔除了零方差列: {list(dropped)}")
    X = X_full[:, keep]
    n = len(y)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            result = sm.Logit(y, X).fit(
                method="newton",
                maxiter=NEWTON_MAX_ITER,
                tol=NEWTON_GRADIENT_TOL,
                disp=False,
            )
        except PerfectSeparationError as e:
            logger.error(f"{outcome} 模型出现完全分离")
            raise Separation(f"{outcome} model: perfect prediction, no finite MLE") from e
        except np.linalg.LinAlgError as e:
            logger.error(f"{outcome} 模型信息矩阵奇异: {e}")
            raise NonConvergence(f"{outcome} model: singular information matrix") from e
    if _separation_flagged(caught):
        logger.error(f"{outcome} 模型出现完全分离")
        raise Separation(f"{outcome} model: perfect prediction, no finite MLE")
    for w in caught:
        if issubclass(w.category, ConvergenceWarning):
            logger.debug(f"{outcome} 模型: {w.message}")

    beta = np.asarray(result.params, dtype=float)
    iterations = int(result.mle_retvals.get("iterations", 0))
    p = expit(X @ beta)
    grad_norm = float(np.max(np.abs(X.T @ (y - p))))
    loglik = float(result.llf)
    converged = bool(result.mle_retvals.get("converged", False)) or (
        PipelineUtils.newton_converged(grad_norm, loglik)
    )
    perfect = bool(
        np.any(np.minimum(p, 1 - p) < PERFECT_PREDICTION_EPS)
        or np.any(np.abs(beta) > DIVERGENT_COEF)
    )
    if not converged or not np.all(np.isfinite(beta)):
        if perfect:
            logger.error(f"{outcome} 模型出现完全分离")
            raise Separation(f"{outcome} model: perfect prediction, no finite MLE")
        logger.error(f"{outcome} 模型 {iterations} 次迭代未收敛, 梯度 {grad_norm:.3g}")
        raise NonConvergence(
            f"{outcome} model did not converge (gradient {grad_norm:.3g})"
        )
    if perfect:
        logger.warning(f"{outcome} 模型的部分拟合概率接近 0 或 1（完全预测）")

    admin = None
    if outcome == "censoring":
        admin = panel.t_max if admin_time is None else admin_time
    coef = np.zeros(len(coef_names))
    coef[keep] = beta
    logger.debug(
        f"{outcome} 模型收敛: {iterations} 次迭代, 行数 {n}, "
        f"系数 {dict(zip(coef_names, np.round(coef, 4)))}"
    )
    return PooledLogisticFit(
        outcome=outcome,
        coef_names=coef_names,
        coef=coef,
        covariates=covariates,
        time_knots=knots,
        iterations=iterations,
        grad_norm=grad_norm,
        n_rows=n,
        dropped=dropped,
        admin_time=admin,
        perfect_prediction=perfect,
    )


def _check_nested(num: PooledLogisticFit, den: PooledLogisticFit) -> None:
    if num.outcome != den.outcome:
        raise FormulaError("numerator and denominator models have different outcomes")
    extra = set(num.covariates) - set(den.covariates)
    if extra:
        raise FormulaError(f"numerator model not nested in denominator: {sorted(extra)}")


def _truncate(
    values: np.ndarray, truncation: tuple[float, float] | None
) -> tuple[np.ndarray, dict[str, Any]]:
    if truncation is None:
        return values, {"lower": None, "upper": None, "count": 0}
    lo, hi = np.percentile(values, list(truncation))
    clipped = np.clip(values, lo, hi)
    count = int(np.sum(clipped != values))
    return clipped, {"lower": float(lo), "upper": float(hi), "count": count}


def stabilized_weights(
    panel: Panel,
    num_fit: PooledLogisticFit,
    den_fit: PooledLogisticFit,
    truncation: tuple[float, float] | None = DEFAULT_TRUNCATION,
    cens_num: PooledLogisticFit | None = None,
    cens_den: PooledLogisticFit | None = None,
) -> WeightSet:
    """稳定化治疗权重与删失权重

    治疗权重：u ≤ min(t, S) 上 f_num(B(u)) / f_den(B(u)) 的累积乘积，S 之后冻结；
    删失权重：u < t 上 (1 − p_num(u)) / (1 − p_den(u)) 的累积乘积；
    两者分别按百分位截断，合并权重为两者之积。

    Args:
        panel: LOCF 面板
        num_fit / den_fit: 治疗模型分子（基线）与分母（基线 + 时变协变量）
        truncation: 百分位对，None 表示不截断
        cens_num / cens_den: 删失模型分子与分母（可选）

    Returns:
        WeightSet
    """
    _check_nested(num_fit, den_fit)
    df = panel.frame
    ids = df[ID_COL]

    rows = model_rows(panel, "treatment_start")
    b = df[TREAT_COL].to_numpy() == 1
    p_num = num_fit.predict(df)
    p_den = den_fit.predict(df)
    f_num = np.where(b, p_num, 1 - p_num)
    f_den = np.where(b, p_den, 1 - p_den)
    ratio = np.where(rows, f_num / f_den, 1.0)
    w_treat = pd.Series(ratio, index=df.index).groupby(ids).cumprod().to_numpy()

    if cens_num is not None and cens_den is not None:
        _check_nested(cens_num, cens_den)
        admin = cens_den.admin_time if cens_den.admin_time is not None else panel.t_max
        c_rows = df[TIME_COL].to_numpy() < admin
        c_ratio = np.where(
            c_rows, (1 - cens_num.predict(df)) / (1 - cens_den.predict(df)), 1.0
        )
        through = pd.Series(c_ratio, index=df.index).groupby(ids).cumprod().to_numpy()
        w_cens = through / c_ratio
    else:
        w_cens = np.ones(len(df))

    w_treat, treat_report = _truncate(w_treat, truncation)
    w_cens, cens_report = _truncate(w_cens, truncation)
    frame = pd.DataFrame(
        {
            ID_COL: df[ID_COL].to_numpy(),
            TIME_COL: df[TIME_COL].to_numpy(),
            "w_treat": w_treat,
            "w_cens": w_cens,
            "w_comb": w_treat * w_cens,
        },
        index=df.index,
    )
    report = {"w_treat": treat_report, "w_cens": cens_report}
    truncated = treat_report["count"] + cens_report["count"]
    if truncated:
        logger.info(f"权重截断: {truncated} 个人-区间被截断到百分位 {truncation}")
    logger.info(
        f"稳定化权重完成: 治疗权重均值 {w_treat.mean():.4f}, 最大 {w_treat.max():.4f}"
    )
    return WeightSet(frame=frame, truncation=report)


def fit_weight_models(
    panel: Panel,
    baselines: list[str] | tuple[str, ...],
    covariates: list[str] | tuple[str, ...],
    time_basis: Any = "quarters",
    censoring: bool = True,
) -> WeightModels:
    """拟合治疗与删失模型的分子（基线）和分母（基线 + 时变协变量）

    没有非行政删失时跳过删失模型，删失权重取 1。
    """
    baselines = tuple(baselines)
    full = baselines + tuple(covariates)
    treat_num = fit_pooled_logistic(panel, "treatment_start", baselines, time_basis)
    treat_den = fit_pooled_logistic(panel, "treatment_start", full, time_basis)

    if not censoring:
        return WeightModels(treat_num, treat_den)
    rows = model_rows(panel, "censoring")
    if panel.frame.loc[rows, CENSOR_COL].sum() == 0:
        logger.warning("没有行政删失以外的删失事件，删失权重取 1")
        return WeightModels(treat_num, treat_den)
    cens_num = fit_pooled_logistic(panel, "censoring", baselines, time_basis)
    cens_den = fit_pooled_logistic(panel, "censoring", full, time_basis)
    return WeightModels(treat_num, treat_den, cens_num, cens_den)


def compute_weights(
    panel: Panel,
    baselines: list[str] | tuple[str, ...],
    covariates: list[str] | tuple[str, ...],
    time_basis: Any = "quarters",
    truncation: tuple[float, float] | None = DEFAULT_TRUNCATION,
    censoring: bool = True,
) -> WeightSet:
    """拟合全部权重模型并计算权重"""
    models = fit_weight_models(panel, baselines, covariates, time_basis, censoring)
    return stabilized_weights(
        panel,
        models.treat_num,
        models.treat_den,
        truncation,
        models.cens_num,
        models.cens_den,
    )


def msm_additive(
    panel: Panel,
    weights: WeightSet,
    formula: list[str] | tuple[str, ...] | None = None,
) -> AdditiveFit:
    """边际结构加性风险模型

    Args:
        panel: LOCF 面板
        weights: stabilized_weights 的输出
        formula: 治疗与基线变量，默认 treat + 全部基线变量

    Returns:
        AdditiveFit，治疗系数的累积曲线为 ATE 估计

    Raises:
        FormulaError: 公式包含时变协变量
    """
    formula = list(formula) if formula is not None else [TREATMENT_NAME, *panel.baseline_names]
    time_varying = [c for c in formula if c in panel.covariate_names]
    if time_varying:
        raise FormulaError(
            f"time-varying covariates are replaced by weights in the MSM: {time_varying}"
        )
    if TREATMENT_NAME not in formula:
        formula.insert(0, TREATMENT_NAME)
    return fit_additive(panel, formula, weights.frame["w_comb"])

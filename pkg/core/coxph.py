"""
Cox 比例风险模块

离散网格上的 Cox 回归：每个区间的风险集为该区间仍有记录的人-区间行，
同一区间的多个事件按 Breslow 方式处理，支持个案权重。起点由 lifelines
的时变 Cox 拟合给出，Breslow 偏似然的极大化交给 scipy.optimize。
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd
from lifelines import CoxTimeVaryingFitter
from lifelines.exceptions import ConvergenceError
from scipy import linalg, optimize

from .constants import (
    EVENT_COL,
    ID_COL,
    MONOTONE_BETA_LIMIT,
    NEWTON_GRADIENT_TOL,
    NEWTON_MAX_ITER,
    TIME_COL,
)
from .error_handler import CausalAttError
from .panel import Panel
from .utils import PipelineUtils

logger = logging.getLogger(__name__)

# 单调似然检查：沿发散方向再走这么远，似然不下降即判定无有限极大值
MONOTONE_PROBE = 5.0
MONOTONE_LL_TOL = 1e-6


# 自定义异常类
class CoxFitError(CausalAttError):
    """Cox 拟合相关基础异常类"""

    pass


class CoxNonConvergence(CoxFitError):
    """牛顿迭代在上限内未收敛"""

    pass


class MonotoneLikelihood(CoxFitError):
    """偏似然单调，某个系数没有有限极大值"""

    def __init__(self, message: str, coefficient: str | None = None):
        super().__init__(message)
        self.coefficient = coefficient


@dataclass(frozen=True, eq=False)
class CoxFit:
    """Cox 回归结果"""

    coef_names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    loglik: float
    iterations: int
    grad_norm: float
    n_events: int
    dropped: tuple[str, ...] = ()
    # lifelines 的 Efron 结估计，拟合失败时为 None
    efron_coef: np.ndarray | None = None
    loglik_trace: tuple[float, ...] = ()
    tied_intervals: int = 0

    @property
    def hazard_ratios(self) -> np.ndarray:
        return np.exp(self.coef)

    def hazard_ratio(self, name: str) -> float:
        return float(np.exp(self.coef[self.coef_names.index(name)]))

    def summary_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                "coefficient": self.coef_names,
                "coef": self.coef,
                "hazard_ratio": self.hazard_ratios,
                "se": self.se,
            }
        )
        if self.efron_coef is not None:
            frame["coef_efron"] = self.efron_coef
        return frame


class _RiskSets:
    """按区间分组的设计，供偏似然及其导数重复计算"""

    def __init__(self, X: np.ndarray, w: np.ndarray, d: np.ndarray, t: np.ndarray):
        self.X = X
        self.w = w
        self.d = d
        self.codes, self.levels = pd.factorize(t, sort=True)
        self.n_t = len(self.levels)
        self.wd_t = np.bincount(self.codes, weights=w * d, minlength=self.n_t)
        self.xd = X.T @ (w * d)
        self.event_sets = self.wd_t > 0

    def evaluate(
        self, beta: np.ndarray, derivatives: bool = True
    ) -> tuple[float, np.ndarray | None, np.ndarray | None]:
        X, w, codes, n_t = self.X, self.w, self.codes, self.n_t
        p = X.shape[1]
        eta = X @ beta if p else np.zeros(len(w))
        shift = float(eta.max()) if len(eta) else 0.0
        r = w * np.exp(eta - shift)
        s0 = np.bincount(codes, weights=r, minlength=n_t)
        ev = self.event_sets
        loglik = float(np.sum(self.w * self.d * eta)) - float(
            np.sum(self.wd_t[ev] * (np.log(s0[ev]) + shift))
        )
        if not derivatives:
            return loglik, None, None

        s1 = np.zeros((n_t, p))
        for j in range(p):
            s1[:, j] = np.bincount(codes, weights=r * X[:, j], minlength=n_t)
        s2 = np.zeros((n_t, p, p))
        np.add.at(s2, codes, r[:, None, None] * X[:, :, None] * X[:, None, :])

        mean = np.zeros((n_t, p))
        mean[ev] = s1[ev] / s0[ev, None]
        score = self.xd - self.wd_t @ mean
        info = np.zeros((p, p))
        for k in np.flatnonzero(ev):
            info += self.wd_t[k] * (s2[k] / s0[k] - np.outer(mean[k], mean[k]))
        return loglik, score, info


def _prepare(
    panel: Panel, formula: list[str] | tuple[str, ...], weights: Any
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    df = panel.frame
    missing = [c for c in formula if c not in df.columns]
    if missing:
        raise CoxFitError(f"formula columns not in panel: {missing}")
    X = df[list(formula)].to_numpy(dtype=float).reshape(len(df), len(formula))
    if weights is None:
        w = np.ones(len(df))
    elif isinstance(weights, pd.Series):
        w = weights.reindex(df.index).to_numpy(dtype=float)
    else:
        w = np.asarray(weights, dtype=float)
    if w.shape != (len(df),) or np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("case weights must be positive and align with the panel rows")
    return (
        X,
        w,
        df[EVENT_COL].to_numpy(dtype=float),
        df[TIME_COL].to_numpy(),
        df[ID_COL].to_numpy(),
    )


def partial_likelihood(
    panel: Panel,
    formula: list[str] | tuple[str, ...],
    beta: np.ndarray,
    weights: Any = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Breslow 对数偏似然、得分向量与观测信息矩阵"""
    X, w, d, t, _ = _prepare(panel, formula, weights)
    loglik, score, info = _RiskSets(X, w, d, t).evaluate(np.asarray(beta, dtype=float))
    return loglik, score, info


def _efron_start(
    X: np.ndarray, w: np.ndarray, d: np.ndarray, t: np.ndarray, ids: np.ndarray
) -> np.ndarray | None:
    """lifelines 计数过程拟合（Efron 结），失败时返回 None"""
    names = [f"x{j}" for j in range(X.shape[1])]
    long = pd.DataFrame(X, columns=names)
    long["_id"] = ids
    long["_start"] = t.astype(float)
    long["_stop"] = t.astype(float) + 1.0
    long["_event"] = d.astype(bool)
    long["_weight"] = w
    ctv = CoxTimeVaryingFitter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            ctv.fit(
                long,
                id_col="_id",
                event_col="_event",
                start_col="_start",
                stop_col="_stop",
                weights_col="_weight",
            )
        except (ConvergenceError, ValueError, ZeroDivisionError, linalg.LinAlgError) as e:
            logger.debug(f"lifelines 拟合失败, 从 0 开始: {e}")
            return None
    start = ctv.params_.reindex(names).to_numpy(dtype=float)
    if not np.all(np.isfinite(start)):
        return None
    return start


class _Objective:
    """负对数偏似然，缓存最近一次求值供 scipy 的 fun/jac/hess 共用"""

    def __init__(self, risk: _RiskSets):
        self.risk = risk
        self._beta: np.ndarray | None = None
        self._value: tuple[float, np.ndarray, np.ndarray] | None = None

    def _evaluate(self, beta: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        if self._beta is None or not np.array_equal(beta, self._beta):
            self._beta = np.array(beta, dtype=float)
            self._value = self.risk.evaluate(self._beta)
        return self._value

    def fun(self, beta: np.ndarray) -> float:
        return -self._evaluate(beta)[0]

    def jac(self, beta: np.ndarray) -> np.ndarray:
        return -self._evaluate(beta)[1]

    def hess(self, beta: np.ndarray) -> np.ndarray:
        return self._evaluate(beta)[2]


def _monotone_coefficient(
    risk: _RiskSets, beta: np.ndarray, loglik: float
) -> int | None:
    for j in np.flatnonzero(np.abs(beta) >= MONOTONE_BETA_LIMIT):
        probe = beta.copy()
        probe[j] += np.sign(beta[j]) * MONOTONE_PROBE
        ll_probe, _, _ = risk.evaluate(probe, derivatives=False)
        if ll_probe >= loglik - MONOTONE_LL_TOL:
            return int(j)
    return None


def fit_cox(
    panel: Panel,
    formula: list[str] | tuple[str, ...],
    weights: Any = None,
) -> CoxFit:
    """Cox 回归（Breslow 结）

    先用 lifelines 的 CoxTimeVaryingFitter 以计数过程格式 (t, t+1] 拟合，
    lifelines 只支持 Efron 结，其结果作为起点并与 Breslow 解对照；再用
    scipy 的 trust-exact 在 Breslow 偏似然上求极大值。零方差列剔除并记为系数 0。

    Args:
        panel: LOCF 面板，时变协变量取所在区间的值
        formula: 协变量列
        weights: 与行对齐的个案权重（可选）

    Returns:
        CoxFit

    Raises:
        CoxFitError: 没有事件或列不存在
        CoxNonConvergence: 迭代上限内未收敛
        MonotoneLikelihood: 某个系数发散
    """
    formula = tuple(formula)
    X_full, w, d, t, ids = _prepare(panel, formula, weights)
    n_events = int(d.sum())
    if n_events == 0:
        raise CoxFitError("no events: the partial likelihood is empty")

    keep = X_full.std(axis=0) > 0
    dropped = tuple(n for n, k in zip(formula, keep) if not k)
    if dropped:
        logger.warning(f"Cox 模型剔除了零方差列: {list(dropped)}")
    names = np.asarray(formula)[keep]
    X = X_full[:, keep]
    risk = _RiskSets(X, w, d, t)
    tied = int(np.sum(np.bincount(risk.codes, weights=d, minlength=risk.n_t) > 1))

    efron = _efron_start(X, w, d, t, ids) if X.shape[1] else np.zeros(0)
    start = np.zeros(X.shape[1]) if efron is None else efron

    trace: list[float] = []
    if X.shape[1]:
        objective = _Objective(risk)
        trace.append(-objective.fun(start))
        result = optimize.minimize(
            objective.fun,
            start,
            jac=objective.jac,
            hess=objective.hess,
            method="trust-exact",
            callback=lambda xk: trace.append(-objective.fun(xk)),
            options={"gtol": NEWTON_GRADIENT_TOL, "maxiter": NEWTON_MAX_ITER},
        )
        beta = np.asarray(result.x, dtype=float)
        iterations = int(result.nit)
    else:
        beta = np.zeros(0)
        iterations = 0
    loglik, score, info = risk.evaluate(beta)
    grad_norm = float(np.max(np.abs(score))) if len(beta) else 0.0

    j = _monotone_coefficient(risk, beta, loglik)
    if j is not None:
        logger.error(f"Cox 偏似然单调: 系数 {names[j]} 发散")
        raise MonotoneLikelihood(f"no finite MLE for coefficient {names[j]}", str(names[j]))
    if not PipelineUtils.newton_converged(grad_norm, loglik):
        logger.error(f"Cox 模型 {iterations} 次迭代未收敛, 梯度 {grad_norm:.3g}")
        raise CoxNonConvergence(f"Cox fit did not converge (gradient {grad_norm:.3g})")

    coef = np.zeros(len(formula))
    se = np.full(len(formula), np.nan)
    coef[keep] = beta
    if len(beta):
        se[keep] = np.sqrt(np.clip(np.diag(linalg.pinvh(info)), 0.0, None))
    efron_coef = None
    if efron is not None:
        efron_coef = np.zeros(len(formula))
        efron_coef[keep] = efron
        if tied and len(beta):
            logger.debug(
                f"结点区间 {tied} 个, Breslow 与 Efron 系数最大差 "
                f"{float(np.max(np.abs(beta - efron))):.3g}"
            )

    logger.debug(
        f"Cox 模型收敛: {iterations} 次迭代, 事件 {n_events}, "
        f"HR {dict(zip(formula, np.round(np.exp(coef), 4)))}"
    )
    return CoxFit(
        coef_names=formula,
        coef=coef,
        se=se,
        loglik=loglik,
        iterations=iterations,
        grad_norm=grad_norm,
        n_events=n_events,
        dropped=dropped,
        efron_coef=efron_coef,
        loglik_trace=tuple(trace),
        tied_intervals=tied,
    )

"""
Aalen 加性风险回归模块

在离散网格上估计累积回归系数：
- 每个含事件的区间做一次（加权）最小二乘，得到系数增量 dB(t)
- 累积曲线为增量的逐期求和
- 以个体为簇累加残差贡献，得到稳健（三明治）协方差
- 基于风险集加权的斜率检验
"""

import logging
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .constants import EVENT_COL, ID_COL, INTERCEPT_NAME, TIME_COL
from .error_handler import CausalAttError
from .panel import Panel

logger = logging.getLogger(__name__)

SLOPE_WEIGHTINGS = ("at_risk", "unit")


# 自定义异常类
class AdditiveFitError(CausalAttError):
    """加性风险回归相关基础异常类"""

    pass


class UnknownCoefficient(AdditiveFitError):
    """请求的系数不在模型中"""

    pass


@dataclass(frozen=True, eq=False)
class AdditiveFit:
    """加性风险回归结果

    increments / cumulative 形状为 (网格长度, 系数个数)，
    robust_cov 形状为 (网格长度, 系数个数, 系数个数)。
    diagnostics 记录被跳过的区间：t -> "singular_design" / "empty_risk"。
    """

    coef_names: tuple[str, ...]
    times: np.ndarray
    increments: np.ndarray
    cumulative: np.ndarray
    robust_cov: np.ndarray
    increment_var: np.ndarray
    at_risk: np.ndarray
    n_events: int
    diagnostics: dict[int, str] = field(default_factory=dict)
    zero_columns: dict[int, tuple[str, ...]] = field(default_factory=dict)

    def index(self, name: str) -> int:
        try:
            return self.coef_names.index(name)
        except ValueError:
            raise UnknownCoefficient(f"unknown coefficient: {name}") from None

    def robust_se(self, name: str) -> np.ndarray:
        j = self.index(name)
        return np.sqrt(np.clip(self.robust_cov[:, j, j], 0.0, None))

    @property
    def skipped_intervals(self) -> list[int]:
        return sorted(self.diagnostics)

    def to_frame(self) -> pd.DataFrame:
        """导出为长表：t, coefficient, increment, cumulative, robust_se"""
        parts = []
        for j, name in enumerate(self.coef_names):
            parts.append(
                pd.DataFrame(
                    {
                        "t": self.times,
                        "coefficient": name,
                        "increment": self.increments[:, j],
                        "cumulative": self.cumulative[:, j],
                        "robust_se": self.robust_se(name),
                    }
                )
            )
        return pd.concat(parts, ignore_index=True)


class SlopeTestResult(NamedTuple):
    coefficient: str
    statistic: float
    p_value: float


def _row_weights(panel: Panel, weights: Any) -> np.ndarray:
    n = len(panel.frame)
    if weights is None:
        return np.ones(n)
    if isinstance(weights, pd.Series):
        w = weights.reindex(panel.frame.index).to_numpy(dtype=float)
    else:
        w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"weights must align with the {n} panel rows")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be finite and strictly positive")
    return w


def fit_additive(
    panel: Panel,
    covariates: list[str] | tuple[str, ...],
    weights: Any = None,
) -> AdditiveFit:
    """拟合 Aalen 加性风险模型

    Args:
        panel: 面板
        covariates: 进入模型的列（含治疗列、基线与时变协变量），截距自动加入
        weights: 与面板行对齐的正权重（可选）

    Returns:
        AdditiveFit
    """
    df = panel.frame
    coef_names = (INTERCEPT_NAME, *covariates)
    p = len(coef_names)
    grid = panel.grid

    X = np.column_stack([np.ones(len(df))] + [df[c].to_numpy(float) for c in covariates])
    if np.isnan(X).any():
        raise ValueError("design contains missing values; run locf_expand first")
    w = _row_weights(panel, weights)
    dN = df[EVENT_COL].to_numpy(float)
    times = df[TIME_COL].to_numpy()
    subject_codes, _ = pd.factorize(df[ID_COL])
    n_subjects = int(subject_codes.max()) + 1 if len(df) else 0

    increments = np.zeros((len(grid), p))
    increment_var = np.zeros((len(grid), p))
    robust_cov = np.zeros((len(grid), p, p))
    at_risk = np.zeros(len(grid), dtype=np.int64)
    # 每个个体的累积残差贡献（按簇求和得到三明治方差）
    psi_cum = np.zeros((n_subjects, p))
    diagnostics: dict[int, str] = {}
    zero_columns: dict[int, tuple[str, ...]] = {}

    for k, t in enumerate(grid):
        rows = np.flatnonzero(times == t)
        at_risk[k] = len(rows)
        if len(rows) == 0:
            diagnostics[int(t)] = "empty_risk"
            robust_cov[k] = psi_cum.T @ psi_cum
            continue
        dn = dN[rows]
        if dn.sum() > 0:
            Xt, wt = X[rows], w[rows]
            keep = ~np.all(Xt == 0.0, axis=0)
            if not keep.all():
                zero_columns[int(t)] = tuple(n for n, kept in zip(coef_names, keep) if not kept)
            Xk = Xt[:, keep]
            A = Xk.T @ (wt[:, None] * Xk)
            if np.linalg.matrix_rank(A) < Xk.shape[1]:
                diagnostics[int(t)] = "singular_design"
                logger.debug(f"区间 {t} 的设计矩阵秩亏，跳过该增量")
            else:
                A_inv = linalg.inv(A, check_finite=False)
                db = A_inv @ (Xk.T @ (wt * dn))
                resid = dn - Xk @ db
                psi = (wt * resid)[:, None] * (Xk @ A_inv)
                increments[k, keep] = db
                increment_var[k, keep] = (psi**2).sum(axis=0)
                block = psi_cum[:, keep]
                np.add.at(block, subject_codes[rows], psi)
                psi_cum[:, keep] = block
        robust_cov[k] = psi_cum.T @ psi_cum

    cumulative = np.cumsum(increments, axis=0)
    n_events = int(dN.sum())
    skipped = [t for t, reason in diagnostics.items() if reason == "singular_design"]
    if skipped:
        logger.warning(f"加性风险回归跳过了 {len(skipped)} 个秩亏区间: {skipped}")
    logger.info(
        f"加性风险回归完成: 系数 {list(coef_names)}, 事件数 {n_events}, "
        f"网格长度 {len(grid)}"
    )
    return AdditiveFit(
        coef_names=coef_names,
        times=grid,
        increments=increments,
        cumulative=cumulative,
        robust_cov=robust_cov,
        increment_var=increment_var,
        at_risk=at_risk,
        n_events=n_events,
        diagnostics=diagnostics,
        zero_columns=zero_columns,
    )


def slope_test(
    fit: AdditiveFit, coefficient: str, weighting: str = "at_risk"
) -> SlopeTestResult:
    """累积系数的斜率检验

    统计量 = Σ w(t)·dB_j(t) / sqrt(Σ w(t)²·var(dB_j(t)))，默认 w(t) 为风险集大小。

    Args:
        fit: 加性风险回归结果
        coefficient: 系数名
        weighting: at_risk 或 unit

    Returns:
        SlopeTestResult，p 值为双侧正态 p 值
    """
    j = fit.index(coefficient)
    if weighting not in SLOPE_WEIGHTINGS:
        raise ValueError(f"unknown slope weighting: {weighting}")
    w = fit.at_risk.astype(float) if weighting == "at_risk" else np.ones(len(fit.times))
    numerator = float(np.sum(w * fit.increments[:, j]))
    variance = float(np.sum(w**2 * fit.increment_var[:, j]))
    if variance <= 0.0:
        return SlopeTestResult(coefficient, 0.0, 1.0)
    statistic = numerator / np.sqrt(variance)
    p_value = float(min(1.0, 2.0 * stats.norm.sf(abs(statistic))))
    return SlopeTestResult(coefficient, float(statistic), p_value)


def curve_at(fit: AdditiveFit, coefficient: str, t: float) -> tuple[float, float]:
    """右连续阶梯函数取值

    Args:
        fit: 加性风险回归结果
        coefficient: 系数名
        t: 时间点

    Returns:
        (累积值, 稳健标准误)
    """
    j = fit.index(coefficient)
    if t < fit.times[0]:
        return 0.0, 0.0
    k = min(int(np.floor(t)) - int(fit.times[0]), len(fit.times) - 1)
    return float(fit.cumulative[k, j]), float(fit.robust_se(coefficient)[k])

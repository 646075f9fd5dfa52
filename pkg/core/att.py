"""
受治者平均处理效应（ATT）模块

提供：
- 直接代入公式 D*(t) = Δ(t) + Σ_j Σ_{u≤t} (â_j(u) − b̂_j(u)) dΓ_j(u)
- 捷径回归：在操纵面板上拟合加性模型，取治疗系数的累积曲线
- 直接/间接效应分解
- 以个体为单位的自助法逐点百分位区间
"""

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .aalen import AdditiveFit, fit_additive
from .constants import ID_COL, TREATMENT_NAME
from .counterfactual import (
    NoTreatedPersonTime,
    TreatedAverages,
    build_manipulated_panel,
    impute_counterfactual,
    treated_averages,
)
from .error_handler import CausalAttError
from .panel import Panel

logger = logging.getLogger(__name__)

ESTIMATORS = ("direct", "shortcut")
MIN_REPLICATES = 50
SUCCESS_SHARE = 0.9


# 自定义异常类
class AttError(CausalAttError):
    """ATT 估计相关基础异常类"""

    pass


class GridMismatch(AttError):
    """回归拟合与受治平均值的时间网格不一致"""

    pass


class BootstrapFailure(AttError):
    """成功的重复次数不足"""

    pass


@dataclass(frozen=True, eq=False)
class CumulativeCurve:
    """网格上的右连续阶梯曲线

    variance 为逐点方差（可选）；lower / upper 为自助法区间（可选）。
    """

    label: str
    times: np.ndarray
    values: np.ndarray
    variance: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    fit: AdditiveFit | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        if self.variance is None:
            return np.full(len(self.times), np.nan)
        return np.sqrt(np.clip(self.variance, 0.0, None))

    def at(self, t: float) -> float:
        if len(self.times) == 0 or t < self.times[0]:
            return 0.0
        k = min(int(np.floor(t)) - int(self.times[0]), len(self.times) - 1)
        return float(self.values[k])

    def on_grid(self, grid: np.ndarray) -> np.ndarray:
        """在另一网格上取值，超出本网格的时间沿用最后的值"""
        return np.array([self.at(t) for t in grid])

    def to_frame(self) -> pd.DataFrame:
        """导出为 t, estimate, se, lower, upper"""
        nan = np.full(len(self.times), np.nan)
        return pd.DataFrame(
            {
                "t": self.times,
                "estimate": self.values,
                "se": self.se,
                "lower": self.lower if self.lower is not None else nan,
                "upper": self.upper if self.upper is not None else nan,
            }
        )


@dataclass(frozen=True)
class AttSettings:
    """ATT 流程设置

    covariates 同时是结局模型中的时变协变量与线性增量模型的响应。
    """

    covariates: tuple[str, ...]
    baselines: tuple[str, ...] = ()
    adjustments: tuple[str, ...] = ()
    include_constant: bool = True
    restrict_measured: bool = False
    treatment: str = TREATMENT_NAME

    @property
    def formula(self) -> list[str]:
        return [self.treatment, *self.baselines, *self.covariates]


def _check_grid(fit: AdditiveFit, avgs: TreatedAverages) -> None:
    if not np.array_equal(fit.times, avgs.times):
        logger.error(
            f"时间网格不一致: 拟合 {len(fit.times)} 个区间, 平均值 {len(avgs.times)} 个区间"
        )
        raise GridMismatch("additive fit and treated averages use different grids")


def mediation_decompose(
    fit: AdditiveFit,
    avgs: TreatedAverages,
    treatment: str = TREATMENT_NAME,
) -> tuple[CumulativeCurve, CumulativeCurve]:
    """把 D*(t) 分解为直接效应 Δ(t) 与经协变量的间接效应

    Args:
        fit: 观测面板上的加性模型（含治疗与全部时变协变量）
        avgs: 受治平均路径
        treatment: 治疗系数名

    Returns:
        (direct, indirect)

    Raises:
        GridMismatch: 网格不一致
        UnknownCoefficient: 协变量不在模型中
    """
    _check_grid(fit, avgs)
    j_treat = fit.index(treatment)
    diff = avgs.difference()
    indirect_inc = np.zeros(len(fit.times))
    for j, name in enumerate(avgs.covariate_names):
        indirect_inc += diff[:, j] * fit.increments[:, fit.index(name)]

    direct = CumulativeCurve(
        label="direct",
        times=fit.times,
        values=fit.cumulative[:, j_treat].copy(),
        variance=fit.robust_cov[:, j_treat, j_treat].copy(),
        fit=fit,
    )
    indirect = CumulativeCurve(
        label="indirect", times=fit.times, values=np.cumsum(indirect_inc), fit=fit
    )
    return direct, indirect


def att_direct(
    fit: AdditiveFit,
    avgs: TreatedAverages,
    treatment: str = TREATMENT_NAME,
) -> CumulativeCurve:
    """直接代入公式估计累积 ATT

    方差只由自助法提供，返回的曲线不带 variance。
    """
    direct, indirect = mediation_decompose(fit, avgs, treatment)
    return CumulativeCurve(
        label="att_direct",
        times=fit.times,
        values=direct.values + indirect.values,
        fit=fit,
    )


def att_shortcut(
    manipulated: Panel,
    formula: list[str] | tuple[str, ...],
    weights: Any = None,
    treatment: str = TREATMENT_NAME,
) -> CumulativeCurve:
    """捷径回归：操纵面板上的加性模型的治疗累积系数

    Args:
        manipulated: build_manipulated_panel 的输出
        formula: 结局模型列，不含治疗列时自动加在最前
        weights: 与行对齐的权重，例如逆删失概率权重（可选）
        treatment: 治疗列名

    Returns:
        带稳健方差的 CumulativeCurve
    """
    formula = list(formula)
    if treatment not in formula:
        formula.insert(0, treatment)
    fit = fit_additive(manipulated, formula, weights)
    j = fit.index(treatment)
    return CumulativeCurve(
        label="att_shortcut",
        times=fit.times,
        values=fit.cumulative[:, j].copy(),
        variance=fit.robust_cov[:, j, j].copy(),
        fit=fit,
    )


def estimate_att(
    panel: Panel,
    settings: AttSettings,
    estimator: str = "shortcut",
    weights: Any = None,
) -> CumulativeCurve:
    """从 LOCF 面板到累积 ATT 曲线的完整流程

    Raises:
        NoTreatedPersonTime: 没有受治个体
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown ATT estimator: {estimator}")
    cf = impute_counterfactual(
        panel,
        settings.covariates,
        settings.adjustments,
        include_constant=settings.include_constant,
        restrict_measured=settings.restrict_measured,
    )
    if cf.is_empty:
        raise NoTreatedPersonTime()
    if estimator == "direct":
        fit = fit_additive(panel, settings.formula, weights)
        return att_direct(fit, treated_averages(cf), settings.treatment)
    manipulated = build_manipulated_panel(cf)
    return att_shortcut(manipulated, settings.formula, weights, settings.treatment)


def resample_subjects(panel: Panel, rng: np.random.Generator) -> Panel:
    """有放回地抽取个体（整条轨迹），重复抽中的个体编号改为 原编号#序号"""
    df = panel.frame
    ids = panel.ids
    positions = df.groupby(ID_COL, sort=False).indices
    draws = rng.choice(len(ids), size=len(ids), replace=True)
    blocks = []
    for k, d in enumerate(draws):
        block = df.iloc[positions[ids[d]]].copy()
        block[ID_COL] = f"{ids[d]}#{k}"
        blocks.append(block)
    return panel.with_frame(pd.concat(blocks, ignore_index=True))


def _replicate(
    index: int,
    seed_seq: np.random.SeedSequence,
    panel: Panel,
    settings: AttSettings,
    estimator: str,
) -> tuple[int, np.ndarray | None, str | None]:
    rng = np.random.default_rng(seed_seq)
    try:
        sample = resample_subjects(panel, rng)
        curve = estimate_att(sample, settings, estimator)
        return index, curve.on_grid(panel.grid), None
    except (CausalAttError, ValueError, np.linalg.LinAlgError) as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def bootstrap_band(
    estimator: str,
    panel: Panel,
    B: int,
    level: float = 0.95,
    settings: AttSettings | None = None,
    seed: int = 0,
    n_jobs: int = 1,
) -> CumulativeCurve:
    """个体自助法逐点百分位区间

    每个重复样本都重新做反事实插补并重新拟合结局模型；
    成功的重复次数不少于 0.9·B 时用成功的重复计算区间。

    Args:
        estimator: direct 或 shortcut
        panel: LOCF 面板
        B: 重复次数
        level: 区间水平
        settings: 流程设置，默认使用面板的全部时变协变量
        seed: 主种子，第 k 个重复使用其第 k 个子流
        n_jobs: 并行进程数

    Returns:
        带 lower / upper 与自助法方差的 CumulativeCurve

    Raises:
        BootstrapFailure: 成功的重复次数不足
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown ATT estimator: {estimator}")
    if B < 1:
        raise ValueError("bootstrap needs at least one replicate")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if B < MIN_REPLICATES:
        logger.warning(f"自助法重复次数 {B} 少于 {MIN_REPLICATES}，区间仅供参考")
    settings = settings or AttSettings(covariates=panel.covariate_names)

    point = estimate_att(panel, settings, estimator)
    children = np.random.SeedSequence(seed).spawn(B)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_replicate)(k, children[k], panel, settings, estimator) for k in range(B)
    )
    results.sort(key=lambda item: item[0])

    curves = [curve for _, curve, _ in results if curve is not None]
    failures = [(k, msg) for k, curve, msg in results if curve is None]
    for k, msg in failures[:5]:
        logger.warning(f"自助法第 {k} 次重复失败: {msg}")
    if len(curves) < SUCCESS_SHARE * B:
        logger.error(f"自助法成功 {len(curves)}/{B} 次，低于要求")
        raise BootstrapFailure(f"only {len(curves)} of {B} replicates succeeded")

    stack = np.vstack(curves)
    alpha = (1.0 - level) / 2.0
    lower, upper = np.percentile(stack, [100 * alpha, 100 * (1 - alpha)], axis=0)
    variance = stack.var(axis=0, ddof=1) if len(curves) > 1 else np.zeros(len(panel.grid))

    logger.info(
        f"自助法完成: 估计量 {estimator}, 成功 {len(curves)}/{B} 次, 水平 {level}"
    )
    return CumulativeCurve(
        label=f"{point.label}_bootstrap",
        times=panel.grid,
        values=point.on_grid(panel.grid),
        variance=variance,
        lower=lower,
        upper=upper,
        fit=point.fit,
        meta={"replicates": B, "succeeded": len(curves), "failed": len(failures), "level": level},
    )

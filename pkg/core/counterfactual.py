"""
反事实协变量轨迹模块

用未治疗人时拟合线性增量模型，为每个受治个体从治疗开始前的最后状态出发，
迭代得到“若未治疗”的协变量轨迹 L0，并计算受治风险集上的平均路径 â(t)、b̂(t)。
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd

from .constants import ID_COL, TIME_COL, TREAT_COL
from .error_handler import CausalAttError
from .flim import FlimFit, NonEstimableGap, fit_flim, impute_hypothetical
from .panel import Panel

logger = logging.getLogger(__name__)

OBSERVED = "observed"
COUNTERFACTUAL = "counterfactual"


# 自定义异常类
class CounterfactualError(CausalAttError):
    """反事实插补相关基础异常类"""

    pass


class InsufficientUntreatedData(CounterfactualError):
    """未治疗人时不足以估计所需区间的增量模型"""

    pass


class NoTreatedPersonTime(CounterfactualError):
    """没有任何受治人时，ATT 无定义"""

    def __init__(self, message: str = "no treated person-time"):
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class CfPanel:
    """受治个体的观测轨迹 L1 与反事实轨迹 L0

    L0 / L1 的行恰为 {(i, t): S_i ≤ t ≤ exit_i}，列为 id, t, 协变量...
    """

    base: Panel
    covariate_names: tuple[str, ...]
    L0: pd.DataFrame
    L1: pd.DataFrame
    treatment_start: pd.Series
    flim: FlimFit | None = None

    @property
    def treated_ids(self) -> np.ndarray:
        return self.L0[ID_COL].unique()

    @property
    def is_empty(self) -> bool:
        return self.L0.empty

    def to_frame(self) -> pd.DataFrame:
        """长表：id, t, S, variable, value, provenance"""
        parts = []
        for arm, label in ((self.L1, OBSERVED), (self.L0, COUNTERFACTUAL)):
            long = arm.melt(
                id_vars=[ID_COL, TIME_COL], var_name="variable", value_name="value"
            )
            long.insert(2, "S", long[ID_COL].map(self.treatment_start).astype(np.int64))
            long["provenance"] = label
            parts.append(long)
        columns = [ID_COL, TIME_COL, "S", "variable", "value", "provenance"]
        if not parts or all(p.empty for p in parts):
            return pd.DataFrame(columns=columns)
        return pd.concat(parts, ignore_index=True)[columns]


@dataclass(frozen=True, eq=False)
class TreatedAverages:
    """受治风险集上的平均协变量路径

    a_hat / b_hat 形状为 (网格长度, 协变量数)，r(t)=0 的行为 NaN。
    """

    covariate_names: tuple[str, ...]
    times: np.ndarray
    a_hat: np.ndarray
    b_hat: np.ndarray
    r: np.ndarray

    def difference(self) -> np.ndarray:
        """â − b̂，r(t)=0 的区间取 0"""
        diff = self.a_hat - self.b_hat
        diff[self.r == 0] = 0.0
        return diff

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t": self.times, "r": self.r})
        for j, name in enumerate(self.covariate_names):
            frame[f"a_{name}"] = self.a_hat[:, j]
            frame[f"b_{name}"] = self.b_hat[:, j]
        return frame[frame["r"] > 0].reset_index(drop=True)


def impute_counterfactual(
    panel: Panel,
    responses: list[str] | tuple[str, ...] | None = None,
    adjustments: list[str] | tuple[str, ...] = (),
    include_constant: bool = True,
    restrict_measured: bool = False,
) -> CfPanel:
    """构造受治个体的无治疗协变量轨迹

    线性增量模型只用两端都未治疗的增量拟合。第 S 行的协变量在治疗决定之前测得，
    是最后的未治疗状态：受治个体以 L(S) 为起点（L0(S) = L1(S)），向前迭代至退出区间。

    Args:
        panel: LOCF 展开后的面板
        responses: 需要反事实化的协变量，默认全部时变协变量
        adjustments: 进入增量模型的基线变量
        include_constant: 增量模型是否含常数项
        restrict_measured: 只用实测到实测的增量拟合

    Returns:
        CfPanel；没有受治个体时返回空的 CfPanel

    Raises:
        InsufficientUntreatedData: 需要的区间之前都无法估计增量模型
    """
    names = tuple(responses) if responses is not None else panel.covariate_names
    df = panel.frame
    starts = panel.treatment_start()
    treated = starts[np.isfinite(starts)]

    empty = pd.DataFrame(columns=[ID_COL, TIME_COL, *names])
    if treated.empty:
        logger.warning("面板中没有受治个体，反事实面板为空")
        return CfPanel(panel, names, empty, empty.copy(), starts)

    untreated = (df[TREAT_COL] == 0).to_numpy()
    flim = fit_flim(
        panel,
        names,
        adjustments,
        include_constant=include_constant,
        restrict_measured=restrict_measured,
        observed=untreated,
    )
    if not flim.estimable.any():
        logger.error("未治疗人时不足，任何区间都无法估计增量模型")
        raise InsufficientUntreatedData("no interval has enough untreated increments")

    row_start = panel.row_treatment_start()
    times = df[TIME_COL].to_numpy()
    branch = np.isfinite(row_start) & (times >= row_start)
    sub = panel.with_frame(df.loc[branch])
    sub_times = sub.frame[TIME_COL].to_numpy()
    sub_seed = sub.row_treatment_start()

    try:
        imputed = impute_hypothetical(
            dataclasses.replace(flim, restrict_measured=False),
            sub,
            observed=sub_times == sub_seed,
        )
    except NonEstimableGap as exc:
        logger.error(f"反事实迭代所需的增量模型不可估计: {exc}")
        raise InsufficientUntreatedData(str(exc)) from exc

    L0 = imputed.values.reset_index(drop=True)
    L1 = sub.frame[[ID_COL, TIME_COL, *names]].reset_index(drop=True)

    logger.info(
        f"反事实插补完成: {len(treated)} 个受治个体, {len(L0)} 个受治人-区间"
    )
    return CfPanel(panel, names, L0, L1, starts, flim)


def treated_averages(cf: CfPanel) -> TreatedAverages:
    """受治风险集 R(t) = {i: S_i < t, 仍在观察} 上的 â(t) 与 b̂(t)

    Args:
        cf: 反事实面板

    Returns:
        TreatedAverages，网格与基础面板一致
    """
    grid = cf.base.grid
    k = len(cf.covariate_names)
    a_hat = np.full((len(grid), k), np.nan)
    b_hat = np.full((len(grid), k), np.nan)
    r = np.zeros(len(grid), dtype=np.int64)

    if not cf.is_empty:
        starts = cf.L1[ID_COL].map(cf.treatment_start).to_numpy(dtype=float)
        in_risk = starts < cf.L1[TIME_COL].to_numpy()
        names = list(cf.covariate_names)
        observed = cf.L1.loc[in_risk].groupby(TIME_COL)[names].mean()
        counterfactual = cf.L0.loc[in_risk].groupby(TIME_COL)[names].mean()
        sizes = cf.L1.loc[in_risk].groupby(TIME_COL)[ID_COL].nunique()
        pos = observed.index.to_numpy(dtype=np.int64) - int(grid[0])
        a_hat[pos] = observed.to_numpy(float)
        b_hat[pos] = counterfactual.to_numpy(float)
        r[sizes.index.to_numpy(dtype=np.int64) - int(grid[0])] = sizes.to_numpy()

    return TreatedAverages(cf.covariate_names, grid, a_hat, b_hat, r)


def build_manipulated_panel(cf: CfPanel) -> Panel:
    """受治人-区间的协变量替换为反事实值 L0 的面板副本

    治疗、事件、删失与基线变量保持不变。
    """
    frame = cf.base.frame.copy()
    if cf.is_empty:
        return cf.base.with_frame(frame)
    key = pd.MultiIndex.from_frame(frame[[ID_COL, TIME_COL]])
    l0 = cf.L0.set_index([ID_COL, TIME_COL])
    hit = key.isin(l0.index)
    for name in cf.covariate_names:
        frame.loc[hit, name] = l0[name].reindex(key[hit]).to_numpy(dtype=float)
    logger.debug(f"操纵面板: 替换了 {int(hit.sum())} 个受治人-区间的协变量")
    return cf.base.with_frame(frame)


def counterfactual_summary(cf: CfPanel) -> dict[str, Any]:
    """受治人时上观测与反事实协变量的均值，用于日志与报告"""
    summary: dict[str, Any] = {"treated_subjects": int(len(cf.treated_ids))}
    for name in cf.covariate_names:
        summary[f"mean_L1_{name}"] = float(cf.L1[name].mean()) if not cf.is_empty else np.nan
        summary[f"mean_L0_{name}"] = float(cf.L0[name].mean()) if not cf.is_empty else np.nan
    return summary

"""
线性增量模型（FLIM）模块

逐区间用最小二乘估计协变量增量的动态：
    ΔK(t) = U(t−1) β(t) + ε(t)，U = (常数, 上期响应, 基线调整变量)
并据此迭代重建假想的完整轨迹：
    观测到的单元格取观测值，未观测的单元格由上期状态加模型增量推进。
"""

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from scipy import linalg

from .constants import ID_COL, INTERCEPT_NAME, TIME_COL
from .error_handler import CausalAttError
from .panel import Panel, observed_col

logger = logging.getLogger(__name__)

OBSERVED = "observed"
IMPUTED = "imputed"


# 自定义异常类
class FlimError(CausalAttError):
    """线性增量模型相关基础异常类"""

    pass


class MissingBaseline(FlimError):
    """个体第一行的响应未观测，无法确定初始状态 k0"""

    pass


class NonEstimableGap(FlimError):
    """需要推进状态的区间之前没有任何可估计的 β(t)"""

    pass


@dataclass(frozen=True, eq=False)
class FlimFit:
    """线性增量模型拟合结果

    betas[k] 为区间 times[k] 的系数矩阵，形状 (回归变量数, 响应数)；
    不可估计的区间 estimable 为 False，reused_from 记录其沿用的区间。
    """

    variable_names: tuple[str, ...]
    adjustment_names: tuple[str, ...]
    include_constant: bool
    restrict_measured: bool
    times: np.ndarray
    betas: np.ndarray
    fitted_counts: np.ndarray
    estimable: np.ndarray
    reused_from: dict[int, int] = field(default_factory=dict)

    @property
    def regressor_names(self) -> tuple[str, ...]:
        head = (INTERCEPT_NAME,) if self.include_constant else ()
        return head + self.variable_names + self.adjustment_names

    @property
    def non_estimable(self) -> list[int]:
        return [int(t) for t, ok in zip(self.times, self.estimable) if not ok]

    def beta(self, t: int) -> np.ndarray:
        """区间 t 实际使用的系数矩阵（不可估计时沿用最近的较早区间）

        Raises:
            NonEstimableGap: t 及之前都没有可估计的区间
        """
        usable = np.flatnonzero(self.estimable & (self.times <= t))
        if len(usable) == 0:
            raise NonEstimableGap(f"no estimable increment model at or before t={t}")
        return self.betas[usable[-1]]

    def design(self, state: np.ndarray, adjustments: np.ndarray) -> np.ndarray:
        parts = [state, adjustments]
        if self.include_constant:
            parts.insert(0, np.ones((state.shape[0], 1)))
        return np.hstack(parts)

    def to_frame(self) -> pd.DataFrame:
        """导出为长表：t, response, regressor, coefficient, estimated_at"""
        records = []
        for k, t in enumerate(self.times):
            source = int(t) if self.estimable[k] else self.reused_from.get(int(t))
            if source is None:
                continue
            beta = self.betas[np.flatnonzero(self.times == source)[0]]
            for i, reg in enumerate(self.regressor_names):
                for j, resp in enumerate(self.variable_names):
                    records.append(
                        {
                            "t": int(t),
                            "response": resp,
                            "regressor": reg,
                            "coefficient": float(beta[i, j]),
                            "estimated_at": source,
                        }
                    )
        return pd.DataFrame(
            records,
            columns=["t", "response", "regressor", "coefficient", "estimated_at"],
        )


@dataclass(frozen=True, eq=False)
class ImputedPanel:
    """假想完整轨迹

    values 与 base.frame 行对齐，含 id, t 与各响应列；
    provenance 同形，单元格取 observed / imputed。
    """

    base: Panel
    values: pd.DataFrame
    provenance: pd.DataFrame

    @property
    def variable_names(self) -> tuple[str, ...]:
        return tuple(c for c in self.values.columns if c not in (ID_COL, TIME_COL))

    def to_panel(self) -> Panel:
        """以估计值替换响应列后的面板"""
        frame = self.base.frame.copy()
        for name in self.variable_names:
            frame[name] = self.values[name].to_numpy()
        return self.base.with_frame(frame)

    def to_frame(self) -> pd.DataFrame:
        value_long = self.values.melt(
            id_vars=[ID_COL, TIME_COL], var_name="variable", value_name="value"
        )
        prov_long = self.provenance.melt(
            id_vars=[ID_COL, TIME_COL], var_name="variable", value_name="provenance"
        )
        return value_long.assign(provenance=prov_long["provenance"].to_numpy())


def observation_mask(
    panel: Panel,
    names: tuple[str, ...],
    observed: Any = None,
    restrict_measured: bool = False,
) -> np.ndarray:
    """逐单元格的观测指示 Q0，形状 (行数, 响应数)

    Args:
        panel: 面板
        names: 响应列
        observed: 与行对齐的布尔掩码，False 的行整体视为未观测（可选）
        restrict_measured: 为 True 时 LOCF 沿用的单元格也视为未观测
    """
    df = panel.frame
    mask = df[list(names)].notna().to_numpy()
    if restrict_measured:
        flags = [
            df[observed_col(n)].to_numpy() == 1
            if observed_col(n) in df.columns
            else np.ones(len(df), dtype=bool)
            for n in names
        ]
        mask &= np.column_stack(flags) if flags else mask
    if observed is not None:
        rows = np.asarray(observed, dtype=bool)
        if rows.shape != (len(df),):
            raise ValueError(f"observed mask must align with the {len(df)} panel rows")
        mask &= rows[:, None]
    return mask


def fit_flim(
    panel: Panel,
    responses: list[str] | tuple[str, ...],
    adjustments: list[str] | tuple[str, ...] = (),
    include_constant: bool = True,
    restrict_measured: bool = False,
    observed: Any = None,
) -> FlimFit:
    """逐区间最小二乘估计增量动态

    只使用两端都观测到的增量；某区间观测增量不足以张成设计时标记为不可估计，
    插补时沿用最近的较早可估计区间。

    Args:
        panel: 面板
        responses: 响应（时变协变量）列
        adjustments: 进入动态的基线调整变量
        include_constant: 设计中是否包含常数项
        restrict_measured: 只用实测到实测的增量
        observed: 额外的行掩码，例如只取未治疗人时

    Returns:
        FlimFit
    """
    responses = tuple(responses)
    adjustments = tuple(adjustments)
    df = panel.frame
    q0 = observation_mask(panel, responses, observed, restrict_measured).all(axis=1)

    K = df[list(responses)].to_numpy(float)
    adj = df[list(adjustments)].to_numpy(float).reshape(len(df), len(adjustments))
    times = df[TIME_COL].to_numpy()
    ids = df[ID_COL].to_numpy()

    # 上一行必须属于同一个体且恰为 t−1
    prev = np.arange(len(df)) - 1
    has_prev = np.zeros(len(df), dtype=bool)
    if len(df) > 1:
        has_prev[1:] = (ids[1:] == ids[:-1]) & (times[1:] == times[:-1] + 1)
    valid = has_prev & q0 & np.roll(q0, 1)

    grid = np.arange(1, max(panel.t_max, 1) + 1)
    n_reg = int(include_constant) + len(responses) + len(adjustments)
    betas = np.zeros((len(grid), n_reg, len(responses)))
    counts = np.zeros(len(grid), dtype=np.int64)
    estimable = np.zeros(len(grid), dtype=bool)

    shell = FlimFit(
        variable_names=responses,
        adjustment_names=adjustments,
        include_constant=include_constant,
        restrict_measured=restrict_measured,
        times=grid,
        betas=betas,
        fitted_counts=counts,
        estimable=estimable,
    )

    for k, t in enumerate(grid):
        rows = np.flatnonzero(valid & (times == t))
        counts[k] = len(rows)
        if len(rows) < n_reg:
            continue
        U = shell.design(K[prev[rows]], adj[rows])
        dK = K[rows] - K[prev[rows]]
        beta, _, rank, _ = linalg.lstsq(U, dK)
        if rank < n_reg:
            logger.debug(f"区间 {t} 的增量设计秩亏 (rank={rank})")
            continue
        betas[k] = beta
        estimable[k] = True

    reused_from: dict[int, int] = {}
    last_ok: int | None = None
    for t, ok in zip(grid, estimable):
        if ok:
            last_ok = int(t)
        elif last_ok is not None:
            reused_from[int(t)] = last_ok

    result = FlimFit(
        variable_names=responses,
        adjustment_names=adjustments,
        include_constant=include_constant,
        restrict_measured=restrict_measured,
        times=grid,
        betas=betas,
        fitted_counts=counts,
        estimable=estimable,
        reused_from=reused_from,
    )
    if result.non_estimable:
        logger.warning(
            f"线性增量模型有 {len(result.non_estimable)} 个区间不可估计: "
            f"{result.non_estimable}，将沿用较早区间的系数"
        )
    logger.info(
        f"线性增量模型拟合完成: 响应 {list(responses)}, 调整 {list(adjustments)}, "
        f"使用增量 {int(counts.sum())} 个"
    )
    return result


def impute_hypothetical(
    fit: FlimFit, panel: Panel, observed: Any = None
) -> ImputedPanel:
    """迭代重建假想完整轨迹

    K_est(t) = K(t)                         若 Q0(t) = 1
    K_est(t) = K_est(t−1) + U(t−1) β(t)     否则
    每个个体的第一行作为 k0，必须观测到。

    Args:
        fit: 线性增量模型
        panel: 面板，每个个体的行在时间上连续，止于事件或删失
        observed: 与行对齐的布尔掩码，False 的行强制插补（可选）

    Returns:
        ImputedPanel

    Raises:
        MissingBaseline: 某个体第一行未观测
        NonEstimableGap: 需要推进时没有可用的 β
    """
    df = panel.frame
    names = fit.variable_names
    q0 = observation_mask(panel, names, observed, fit.restrict_measured)
    K = df[list(names)].to_numpy(float)
    adj = df[list(fit.adjustment_names)].to_numpy(float).reshape(
        len(df), len(fit.adjustment_names)
    )
    codes, uniques = pd.factorize(df[ID_COL])
    times = df[TIME_COL].to_numpy()
    first = (df.groupby(ID_COL, sort=False).cumcount() == 0).to_numpy()

    lacking = first & ~q0.all(axis=1)
    if lacking.any():
        sids = sorted(set(df.loc[lacking, ID_COL]))
        logger.error(f"{len(sids)} 个个体的初始状态未观测")
        raise MissingBaseline(f"subjects without observed first row: {sids[:5]}")

    est = K.copy()
    state = np.full((len(uniques), len(names)), np.nan)
    for t in np.unique(times):
        rows = np.flatnonzero(times == t)
        c = codes[rows]
        advance = ~first[rows] & ~q0[rows].all(axis=1)
        vals = K[rows].copy()
        if advance.any():
            beta = fit.beta(int(t))
            r = rows[advance]
            prev_state = state[c[advance]]
            pred = prev_state + fit.design(prev_state, adj[r]) @ beta
            vals[advance] = np.where(q0[r], K[r], pred)
        est[rows] = vals
        state[c] = vals

    values = pd.DataFrame(est, columns=list(names), index=df.index)
    values.insert(0, TIME_COL, df[TIME_COL].to_numpy())
    values.insert(0, ID_COL, df[ID_COL].to_numpy())
    provenance = pd.DataFrame(
        np.where(q0, OBSERVED, IMPUTED), columns=list(names), index=df.index
    )
    provenance.insert(0, TIME_COL, df[TIME_COL].to_numpy())
    provenance.insert(0, ID_COL, df[ID_COL].to_numpy())

    n_imputed = int((~q0).sum())
    logger.debug(f"插补完成: {n_imputed} 个单元格由模型推进")
    return ImputedPanel(base=panel, values=values, provenance=provenance)

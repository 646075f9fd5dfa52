"""
纵向面板数据模块

离散时间队列的规范数据模型，负责：
- 长格式 CSV 的读取、列映射与校验
- 末次观测结转（LOCF）展开
- 风险集查询，供所有估计器使用

面板构造完成后不可变，可被多个估计任务并发读取。
"""

import io
import logging
import os
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np
import pandas as pd

from .constants import (
    CENSOR_COL,
    EVENT_COL,
    ID_COL,
    OBSERVED_PREFIX,
    TIME_COL,
    TREAT_COL,
)
from .error_handler import CausalAttError

logger = logging.getLogger(__name__)

FLAG_COLS = (TREAT_COL, EVENT_COL, CENSOR_COL)
RISK_MODES = ("all_at_risk", "treated_att")


# 自定义异常类
class PanelError(CausalAttError):
    """面板数据相关基础异常类"""

    pass


class MissingColumn(PanelError):
    """映射的列在 CSV 中不存在"""

    pass


class NonMonotoneTreatment(PanelError):
    """治疗指示在个体内出现由 1 回到 0"""

    pass


class DuplicateRow(PanelError):
    """同一 (id, t) 出现多行"""

    pass


class PostExitRow(PanelError):
    """事件或删失之后仍有记录"""

    pass


class NoBaselineRow(PanelError):
    """个体缺少 t=0 的完整测量"""

    pass


class PanelValidationError(PanelError):
    """其他不满足面板不变量的情况"""

    def __init__(self, message: str, report: "ValidationReport | None" = None):
        super().__init__(message)
        self.report = report


# 规则名 -> 异常类型，load_panel 按此顺序抛出首个违规
RULE_EXCEPTIONS: dict[str, type[PanelError]] = {
    "missing_column": MissingColumn,
    "duplicate_row": DuplicateRow,
    "non_monotone_treatment": NonMonotoneTreatment,
    "post_exit_row": PostExitRow,
}


def observed_col(name: str) -> str:
    """协变量对应的观测标记列名"""
    return f"{OBSERVED_PREFIX}{name}"


@dataclass(frozen=True)
class ColumnSchema:
    """列映射配置：角色 -> CSV 表头"""

    id: str = ID_COL
    t: str = TIME_COL
    treat: str = TREAT_COL
    event: str = EVENT_COL
    censor: str = CENSOR_COL
    covariates: tuple[str, ...] = ()
    baselines: tuple[str, ...] = ()
    # 协变量名 -> 测量标记列表头；为空时按单元格是否为空推断
    observed: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, mapping: dict[str, Any]) -> "ColumnSchema":
        """从配置字典构造列映射

        Args:
            mapping: ConfigLoader.load_column_schema 返回的字典

        Returns:
            ColumnSchema 实例
        """
        return cls(
            id=mapping.get("id", ID_COL),
            t=mapping.get("t", TIME_COL),
            treat=mapping.get("treat", TREAT_COL),
            event=mapping.get("event", EVENT_COL),
            censor=mapping.get("censor", CENSOR_COL),
            covariates=tuple(mapping.get("covariates", ())),
            baselines=tuple(mapping.get("baselines", ())),
            observed=dict(mapping.get("observed", {}) or {}),
        )

    @classmethod
    def canonical(cls, panel: "Panel") -> "ColumnSchema":
        """与 write_panel 输出相对应的列映射"""
        return cls(
            covariates=panel.covariate_names,
            baselines=panel.baseline_names,
            observed={c: observed_col(c) for c in panel.covariate_names},
        )

    def role_map(self) -> dict[str, str]:
        """CSV 表头 -> 标准列名"""
        mapping = {
            self.id: ID_COL,
            self.t: TIME_COL,
            self.treat: TREAT_COL,
            self.event: EVENT_COL,
            self.censor: CENSOR_COL,
        }
        for cov, header in self.observed.items():
            mapping[header] = observed_col(cov)
        return mapping


@dataclass(frozen=True)
class ValidationReport:
    """面板校验结果"""

    errors: list[tuple[Any, str]]
    warnings: list[str]
    counts: dict[str, int]

    @property
    def ok(self) -> bool:
        return not self.errors


class RiskSet(NamedTuple):
    ids: frozenset
    size: int


@dataclass(frozen=True, eq=False)
class Panel:
    """长格式离散时间队列

    frame 按 (id, t) 排序，列顺序为：
    id, t, treat, event, censor, 协变量..., obs_协变量..., 基线变量...
    """

    frame: pd.DataFrame
    covariate_names: tuple[str, ...]
    baseline_names: tuple[str, ...] = ()

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        covariate_names: list[str] | tuple[str, ...],
        baseline_names: list[str] | tuple[str, ...] = (),
    ) -> "Panel":
        """由标准列名的 DataFrame 构造面板，规范化类型与列顺序

        Args:
            frame: 含标准列名的长格式数据
            covariate_names: 时变协变量列名
            baseline_names: 基线变量列名

        Returns:
            Panel 实例
        """
        covariate_names = tuple(covariate_names)
        baseline_names = tuple(baseline_names)
        df = frame.copy()
        df[ID_COL] = df[ID_COL].astype(str)
        df[TIME_COL] = df[TIME_COL].astype(np.int64)
        for col in FLAG_COLS:
            df[col] = df[col].fillna(0).astype(np.int64)
        for cov in covariate_names:
            df[cov] = df[cov].astype(float)
            obs = observed_col(cov)
            if obs not in df.columns:
                df[obs] = df[cov].notna().astype(np.int64)
            else:
                df[obs] = df[obs].fillna(0).astype(np.int64)
        for base in baseline_names:
            df[base] = df[base].astype(float)

        ordered = (
            [ID_COL, TIME_COL, *FLAG_COLS]
            + list(covariate_names)
            + [observed_col(c) for c in covariate_names]
            + list(baseline_names)
        )
        df = df[ordered].sort_values([ID_COL, TIME_COL], kind="mergesort")
        return cls(df.reset_index(drop=True), covariate_names, baseline_names)

    def with_frame(self, frame: pd.DataFrame) -> "Panel":
        """复制面板结构，替换数据"""
        return Panel.from_frame(frame, self.covariate_names, self.baseline_names)

    @property
    def t_max(self) -> int:
        return int(self.frame[TIME_COL].max()) if len(self.frame) else 0

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.t_max + 1)

    @property
    def ids(self) -> np.ndarray:
        return self.frame[ID_COL].unique()

    @property
    def n_subjects(self) -> int:
        return int(self.frame[ID_COL].nunique())

    def treatment_start(self) -> pd.Series:
        """每个个体的治疗开始区间 S（从未治疗为 inf）"""
        treated = self.frame[self.frame[TREAT_COL] == 1]
        first = treated.groupby(ID_COL, sort=True)[TIME_COL].min().astype(float)
        return first.reindex(self.ids, fill_value=np.inf)

    def row_treatment_start(self) -> np.ndarray:
        """与 frame 行对齐的 S 值"""
        return self.frame[ID_COL].map(self.treatment_start()).to_numpy(dtype=float)

    def exit_times(self) -> pd.Series:
        """每个个体的最后区间（事件、删失或数据结束）"""
        return self.frame.groupby(ID_COL, sort=True)[TIME_COL].max()

    def counts(self) -> dict[str, int]:
        df = self.frame
        return {
            "subjects": self.n_subjects,
            "person_intervals": int(len(df)),
            "events": int(df[EVENT_COL].sum()),
            "censorings": int(df[CENSOR_COL].sum()),
            "treated": int(np.isfinite(self.treatment_start()).sum()),
        }


def validate_panel(panel: Panel) -> ValidationReport:
    """检查面板不变量，不抛出异常

    Args:
        panel: 待检查的面板

    Returns:
        ValidationReport；errors 为空当且仅当所有不变量成立
    """
    return _validate_frame(panel.frame, panel.covariate_names, require_contiguous=True)


def _validate_frame(
    df: pd.DataFrame, covariates: tuple[str, ...], require_contiguous: bool
) -> ValidationReport:
    errors: list[tuple[Any, str]] = []
    warnings: list[str] = []
    # 组内差分与首末行规则都按时间顺序判断
    df = df.sort_values([ID_COL, TIME_COL], kind="mergesort")

    for col in (TIME_COL, *FLAG_COLS):
        bad = df[col].isna() | (df[col] < 0)
        if col != TIME_COL:
            bad |= ~df[col].isin([0, 1])
        for sid in df.loc[bad, ID_COL].unique():
            errors.append((sid, f"invalid_{col}"))

    dup = df.duplicated([ID_COL, TIME_COL], keep=False)
    for sid in df.loc[dup, ID_COL].unique():
        errors.append((sid, "duplicate_row"))

    grouped = df.groupby(ID_COL, sort=True)
    # 治疗单调：组内差分不得为负
    diffs = grouped[TREAT_COL].diff().fillna(0)
    for sid in df.loc[diffs < 0, ID_COL].unique():
        errors.append((sid, "non_monotone_treatment"))

    # 事件/删失只能出现在最后一行，且至多一个
    exit_flag = (df[EVENT_COL] + df[CENSOR_COL]) > 0
    both = (df[EVENT_COL] == 1) & (df[CENSOR_COL] == 1)
    for sid in df.loc[both, ID_COL].unique():
        errors.append((sid, "event_and_censor"))
    last_t = grouped[TIME_COL].transform("max")
    post_exit = exit_flag & (df[TIME_COL] < last_t)
    for sid in df.loc[post_exit, ID_COL].unique():
        errors.append((sid, "post_exit_row"))

    if require_contiguous:
        first_t = grouped[TIME_COL].transform("min")
        size = grouped[TIME_COL].transform("size")
        gap = (first_t != 0) | (last_t - first_t + 1 != size)
        for sid in df.loc[gap, ID_COL].unique():
            errors.append((sid, "non_contiguous_rows"))
        for cov in covariates:
            for sid in df.loc[df[cov].isna(), ID_COL].unique():
                errors.append((sid, f"missing_{cov}"))
            obs = observed_col(cov)
            if obs in df.columns:
                flag_mismatch = (df[obs] == 1) & df[cov].isna()
                for sid in df.loc[flag_mismatch, ID_COL].unique():
                    errors.append((sid, f"observed_flag_{cov}"))

    n_open = int((~exit_flag.groupby(df[ID_COL]).any()).sum())
    if n_open:
        warnings.append(f"{n_open} 个个体没有事件或删失记录，按数据结束处理")

    counts = {
        "subjects": int(df[ID_COL].nunique()),
        "person_intervals": int(len(df)),
        "events": int(df[EVENT_COL].sum()),
        "censorings": int(df[CENSOR_COL].sum()),
        "treated": int(df.loc[df[TREAT_COL] == 1, ID_COL].nunique()),
    }
    return ValidationReport(errors=errors, warnings=warnings, counts=counts)


def load_panel(source: Any, schema: ColumnSchema | dict[str, Any]) -> Panel:
    """读取长格式 CSV 为面板

    Args:
        source: 文件路径、字节串或文本/字节流
        schema: 列映射（ColumnSchema 或配置字典）

    Returns:
        按 (id, t) 排序的 Panel

    Raises:
        MissingColumn: 映射的列不存在
        DuplicateRow: 同一 (id, t) 重复
        NonMonotoneTreatment: 治疗由 1 回到 0
        PostExitRow: 退出后仍有记录
        PanelValidationError: 时间列非法等其他问题
    """
    if isinstance(schema, dict):
        schema = ColumnSchema.from_mapping(schema)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)

    raw = pd.read_csv(source, dtype={schema.id: str}, keep_default_na=True)

    required = [schema.id, schema.t, schema.treat, schema.event, schema.censor]
    required += list(schema.covariates) + list(schema.baselines)
    required += list(schema.observed.values())
    missing = [col for col in required if col not in raw.columns]
    if missing:
        logger.error(f"CSV 缺少映射的列: {missing}")
        raise MissingColumn(f"missing columns: {', '.join(missing)}")

    df = raw.rename(columns=schema.role_map())
    keep = [ID_COL, TIME_COL, *FLAG_COLS, *schema.covariates, *schema.baselines]
    keep += [observed_col(c) for c in schema.observed]
    df = df[keep]

    t_numeric = pd.to_numeric(df[TIME_COL], errors="coerce")
    if t_numeric.isna().any() or (t_numeric < 0).any() or (t_numeric % 1 != 0).any():
        raise PanelValidationError("time column must hold integers >= 0")
    df = df.assign(**{TIME_COL: t_numeric.astype(int)})

    report = _validate_frame(df, tuple(schema.covariates), require_contiguous=False)
    if not report.ok:
        _raise_first(report)

    panel = Panel.from_frame(df, schema.covariates, schema.baselines)
    logger.info(
        f"面板读取完成: {panel.n_subjects} 个个体, {len(panel.frame)} 个人-区间, "
        f"T_max={panel.t_max}"
    )
    return panel


def _raise_first(report: ValidationReport) -> None:
    rules = [rule for _, rule in report.errors]
    for rule, exc_type in RULE_EXCEPTIONS.items():
        if rule in rules:
            sid = next(s for s, r in report.errors if r == rule)
            logger.error(f"面板校验失败: 个体 {sid} 违反规则 {rule}")
            raise exc_type(f"subject {sid}: {rule}")
    sid, rule = report.errors[0]
    logger.error(f"面板校验失败: 个体 {sid} 违反规则 {rule}")
    raise PanelValidationError(f"subject {sid}: {rule}", report)


def write_panel(panel: Panel, dest: Any) -> None:
    """以标准列名写出面板（包含观测标记列），可被 load_panel 读回

    Args:
        panel: 面板
        dest: 文件路径或可写文本流
    """
    if isinstance(dest, (str, os.PathLike)):
        os.makedirs(os.path.dirname(os.path.abspath(dest)), exist_ok=True)
    panel.frame.to_csv(dest, index=False, float_format="%.17g")


def locf_expand(panel: Panel) -> Panel:
    """末次观测结转展开

    每个个体补齐 t=0..退出区间的所有行，未测量的协变量取最近一次测量值，
    并将其观测标记置 0；已测量的值保持不变。

    Args:
        panel: 可能含缺行或空单元格的面板

    Returns:
        展开后的面板

    Raises:
        NoBaselineRow: 个体在 t=0 没有完整测量
    """
    df = panel.frame
    covs = list(panel.covariate_names)

    t0 = df[df[TIME_COL] == 0].set_index(ID_COL)
    lacking = [sid for sid in panel.ids if sid not in t0.index]
    if covs:
        lacking += list(t0.index[t0[covs].isna().any(axis=1)])
    if lacking:
        logger.error(f"{len(lacking)} 个个体缺少 t=0 的完整测量")
        raise NoBaselineRow(f"subjects without t=0 measurements: {sorted(lacking)[:5]}")

    exits = panel.exit_times()
    full_index = pd.MultiIndex.from_tuples(
        [(sid, t) for sid, last in exits.items() for t in range(int(last) + 1)],
        names=[ID_COL, TIME_COL],
    )
    expanded = df.set_index([ID_COL, TIME_COL]).reindex(full_index)
    added = int(expanded[TREAT_COL].isna().sum())

    for cov in covs:
        obs = observed_col(cov)
        measured = expanded[cov].notna() & (expanded[obs].fillna(1) == 1)
        expanded[obs] = measured.astype(np.int64)
        expanded[cov] = expanded.groupby(level=ID_COL)[cov].ffill()
    for col in (EVENT_COL, CENSOR_COL):
        expanded[col] = expanded[col].fillna(0)
    fill_cols = [TREAT_COL, *panel.baseline_names]
    expanded[fill_cols] = expanded.groupby(level=ID_COL)[fill_cols].ffill()

    if added:
        logger.info(f"LOCF 展开补齐了 {added} 个缺失区间")
    return panel.with_frame(expanded.reset_index())


def risk_set(panel: Panel, t: int, mode: str = "all_at_risk") -> RiskSet:
    """区间 t 的风险集

    all_at_risk: 在 t 之前未发生事件或删失的个体；
    treated_att: 另外要求 S_i < t。

    Args:
        panel: 面板
        t: 区间编号
        mode: all_at_risk 或 treated_att

    Returns:
        RiskSet(ids, size)；空集合法
    """
    if mode not in RISK_MODES:
        raise ValueError(f"unknown risk-set mode: {mode}")
    df = panel.frame
    at_t = df[TIME_COL].to_numpy() == t
    if mode == "treated_att":
        at_t &= panel.row_treatment_start() < t
    ids = frozenset(df.loc[at_t, ID_COL])
    return RiskSet(ids=ids, size=len(ids))


def risk_set_sizes(panel: Panel, mode: str = "all_at_risk") -> pd.Series:
    """整个网格上的风险集大小 r(t)"""
    if mode not in RISK_MODES:
        raise ValueError(f"unknown risk-set mode: {mode}")
    df = panel.frame
    mask = np.ones(len(df), dtype=bool)
    if mode == "treated_att":
        mask = panel.row_treatment_start() < df[TIME_COL].to_numpy()
    sizes = df.loc[mask].groupby(TIME_COL)[ID_COL].nunique()
    return sizes.reindex(panel.grid, fill_value=0).astype(np.int64)

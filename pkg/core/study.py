"""
模拟研究模块

对每个方案和每次重复生成队列并运行全部分析：
- 累积曲线：ATT（直接公式与捷径）、MSM、两个朴素模型、模拟参考、真实值
- Cox 平均风险比表（六行：模拟参考、捷径、MSM、两个朴素模型、随机化）

重复之间相互独立，随机子流由 (主种子, 重复序号, 方案编号) 决定，
因此结果与并行度无关，且前缀稳定。
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .aalen import fit_additive
from .att import att_direct, att_shortcut
from .constants import BENCHMARK_ROWS, COX_SHORTCUT_NOTE, TREAT_COL
from .counterfactual import (
    NoTreatedPersonTime,
    build_manipulated_panel,
    impute_counterfactual,
    treated_averages,
)
from .coxph import fit_cox
from .error_handler import CausalAttError
from .simulate import COVARIATE, RegimeConfig, build_full_counterfactual, generate_cohort
from .utils import PipelineUtils
from .weights_msm import DEFAULT_TRUNCATION, compute_weights, msm_additive

logger = logging.getLogger(__name__)

CURVES = (
    "att_direct",
    "att_shortcut",
    "msm",
    "naive_treat_L",
    "naive_treat",
    "simulated",
    "truth",
)
COX_ANALYSES = (
    "cox_simulated",
    "cox_shortcut",
    "cox_msm",
    "cox_naive_treat_L",
    "cox_naive_treat",
    "cox_randomized",
)
RANDOMIZED = "randomized"


class StudyError(CausalAttError):
    """模拟研究没有任何成功的重复"""

    pass


@dataclass(frozen=True)
class StudySettings:
    """模拟研究的分析设置"""

    time_basis: Any = "quarters"
    truncation: tuple[float, float] | None = DEFAULT_TRUNCATION
    n_jobs: int = 1
    memory_threshold: float = 80.0
    chunk_size: int = 16


@dataclass(frozen=True, eq=False)
class StudyResult:
    """模拟研究结果

    curves: 每次重复每条曲线一行（replicate, regime, analysis, t_0..t_T）
    hazard_ratios: replicate, regime, analysis, hazard_ratio
    failures: replicate, regime, analysis, error
    """

    regimes: tuple[str, ...]
    reps: int
    grid: np.ndarray
    curves: pd.DataFrame
    hazard_ratios: pd.DataFrame
    failures: pd.DataFrame
    meta: dict[str, Any] = field(default_factory=dict)

    def mean_curves(self, regime: str) -> pd.DataFrame:
        """某方案各曲线的逐点平均（只对成功的重复求平均）"""
        sub = self.curves[self.curves["regime"] == regime]
        out = pd.DataFrame({"t": self.grid})
        for name in CURVES + (RANDOMIZED,):
            rows = sub[sub["analysis"] == name]
            if rows.empty:
                continue
            values = rows[[f"t_{t}" for t in self.grid]].to_numpy(dtype=float)
            out[name] = values.mean(axis=0)
        return out

    def failure_counts(self) -> pd.DataFrame:
        if self.failures.empty:
            return pd.DataFrame(columns=["regime", "analysis", "failures"])
        return (
            self.failures.groupby(["regime", "analysis"]).size().rename("failures").reset_index()
        )


def _attempt(
    label: str,
    func: Callable[[], Any],
    failures: list[tuple[str, str]],
) -> Any:
    try:
        return func()
    except (CausalAttError, ValueError, np.linalg.LinAlgError) as exc:
        failures.append((label, f"{type(exc).__name__}: {exc}"))
        return None


def analyse_cohort(cohort, settings: StudySettings) -> tuple[dict, dict, list]:
    """对一个模拟队列运行全部分析

    Returns:
        (curves, hazard_ratios, failures)，失败的分析不出现在前两项中
    """
    panel = cohort.observed
    grid = np.arange(cohort.config.t_max + 1)
    formula_l = [TREAT_COL, COVARIATE]
    failures: list[tuple[str, str]] = []
    curves: dict[str, np.ndarray] = {}
    hrs: dict[str, float] = {}

    def curve_of(fit) -> np.ndarray:
        j = fit.index(TREAT_COL)
        values = fit.cumulative[:, j]
        return np.array([values[min(t, len(values) - 1)] for t in grid])

    def counterfactual():
        cf = impute_counterfactual(panel, (COVARIATE,))
        if cf.is_empty:
            raise NoTreatedPersonTime()
        return cf

    cf = _attempt("counterfactual", counterfactual, failures)
    fit_obs = _attempt("naive_treat_L", lambda: fit_additive(panel, formula_l), failures)
    if fit_obs is not None:
        curves["naive_treat_L"] = curve_of(fit_obs)
    manipulated = None
    if cf is not None:
        manipulated = build_manipulated_panel(cf)
        if fit_obs is not None:
            direct = _attempt(
                "att_direct", lambda: att_direct(fit_obs, treated_averages(cf)), failures
            )
            if direct is not None:
                curves["att_direct"] = direct.on_grid(grid)
        shortcut = _attempt(
            "att_shortcut", lambda: att_shortcut(manipulated, formula_l), failures
        )
        if shortcut is not None:
            curves["att_shortcut"] = shortcut.on_grid(grid)

    weights = _attempt(
        "weights",
        lambda: compute_weights(
            panel,
            baselines=(),
            covariates=(COVARIATE,),
            time_basis=settings.time_basis,
            truncation=settings.truncation,
            censoring=cohort.config.dropout_prob > 0,
        ),
        failures,
    )
    if weights is not None:
        msm = _attempt("msm", lambda: msm_additive(panel, weights, [TREAT_COL]), failures)
        if msm is not None:
            curves["msm"] = curve_of(msm)

    naive = _attempt("naive_treat", lambda: fit_additive(panel, [TREAT_COL]), failures)
    if naive is not None:
        curves["naive_treat"] = curve_of(naive)
    full = _attempt("full_counterfactual", lambda: build_full_counterfactual(cohort), failures)
    if full is not None:
        simulated = _attempt("simulated", lambda: fit_additive(full, [TREAT_COL]), failures)
        if simulated is not None:
            curves["simulated"] = curve_of(simulated)
    curves["truth"] = cohort.truth["true_att"].to_numpy(dtype=float)

    cox_jobs: dict[str, Callable[[], Any]] = {
        "cox_naive_treat_L": lambda: fit_cox(panel, formula_l),
        "cox_naive_treat": lambda: fit_cox(panel, [TREAT_COL]),
    }
    if full is not None:
        cox_jobs["cox_simulated"] = lambda: fit_cox(full, [TREAT_COL])
    if manipulated is not None:
        cox_jobs["cox_shortcut"] = lambda: fit_cox(manipulated, formula_l)
    if weights is not None:
        cox_jobs["cox_msm"] = lambda: fit_cox(panel, [TREAT_COL], weights.combined)
    for label, job in cox_jobs.items():
        fit = _attempt(label, job, failures)
        if fit is not None:
            hrs[label] = fit.hazard_ratio(TREAT_COL)
    return curves, hrs, failures


def analyse_randomized(cohort) -> tuple[dict, dict, list]:
    """随机化方案：只做治疗单变量的加性模型与 Cox 模型"""
    panel = cohort.observed
    grid = np.arange(cohort.config.t_max + 1)
    failures: list[tuple[str, str]] = []
    curves: dict[str, np.ndarray] = {}
    hrs: dict[str, float] = {}
    fit = _attempt(RANDOMIZED, lambda: fit_additive(panel, [TREAT_COL]), failures)
    if fit is not None:
        values = fit.cumulative[:, fit.index(TREAT_COL)]
        curves[RANDOMIZED] = np.array([values[min(t, len(values) - 1)] for t in grid])
    cox = _attempt("cox_randomized", lambda: fit_cox(panel, [TREAT_COL]), failures)
    if cox is not None:
        hrs["cox_randomized"] = cox.hazard_ratio(TREAT_COL)
    curves["truth"] = cohort.truth["true_att"].to_numpy(dtype=float)
    return curves, hrs, failures


def _run_one(
    rep: int, regime: str, base: RegimeConfig, settings: StudySettings
) -> tuple[int, str, dict, dict, list, dict]:
    config = replace(base, regime=regime, replicate=rep)
    try:
        cohort = generate_cohort(config)
    except CausalAttError as exc:
        return rep, regime, {}, {}, [("generate", f"{type(exc).__name__}: {exc}")], {}
    if regime == RANDOMIZED:
        curves, hrs, failures = analyse_randomized(cohort)
    else:
        curves, hrs, failures = analyse_cohort(cohort, settings)
    return rep, regime, curves, hrs, failures, cohort.diagnostics


def replicate_study(
    regimes: list[str] | tuple[str, ...],
    reps: int,
    base: RegimeConfig,
    settings: StudySettings | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> StudyResult:
    """多方案多次重复的模拟研究

    Args:
        regimes: 方案列表，可包含 randomized
        reps: 每个方案的重复次数
        base: 生成参数（其中 seed 为主种子）
        settings: 分析设置
        progress: 进度回调 (已完成, 总数)

    Returns:
        StudyResult

    Raises:
        StudyError: 没有任何成功的分析
    """
    if reps < 1:
        raise StudyError("reps must be >= 1")
    settings = settings or StudySettings()
    regimes = tuple(str(r) for r in regimes)
    grid = np.arange(base.t_max + 1)
    tasks = [(rep, regime) for regime in regimes for rep in range(reps)]
    n_jobs = PipelineUtils.clamp_workers(settings.n_jobs)

    results = []
    chunk = max(1, settings.chunk_size * n_jobs)
    for start in range(0, len(tasks), chunk):
        batch = tasks[start : start + chunk]
        results.extend(
            Parallel(n_jobs=n_jobs)(
                delayed(_run_one)(rep, regime, base, settings) for rep, regime in batch
            )
        )
        PipelineUtils.check_memory_usage(settings.memory_threshold)
        if progress is not None:
            progress(len(results), len(tasks))
        logger.info(f"模拟研究进度: {len(results)}/{len(tasks)}")

    order = {regime: k for k, regime in enumerate(regimes)}
    results.sort(key=lambda item: (order[item[1]], item[0]))

    curve_rows, hr_rows, failure_rows, diag_rows = [], [], [], []
    for rep, regime, curves, hrs, failures, diagnostics in results:
        for name, values in curves.items():
            row = {"replicate": rep, "regime": regime, "analysis": name}
            row.update({f"t_{t}": float(v) for t, v in zip(grid, values)})
            curve_rows.append(row)
        for name, hr in hrs.items():
            hr_rows.append(
                {"replicate": rep, "regime": regime, "analysis": name, "hazard_ratio": hr}
            )
        for name, message in failures:
            failure_rows.append(
                {"replicate": rep, "regime": regime, "analysis": name, "error": message}
            )
        if diagnostics:
            diag_rows.append({"replicate": rep, "regime": regime, **diagnostics})

    if not hr_rows and not any(r["analysis"] != "truth" for r in curve_rows):
        raise StudyError("every replicate failed")

    failures_df = pd.DataFrame(
        failure_rows, columns=["replicate", "regime", "analysis", "error"]
    )
    if not failures_df.empty:
        logger.warning(f"模拟研究中共有 {len(failures_df)} 个分析失败，已按成功的重复汇总")
    logger.info(f"模拟研究完成: 方案 {list(regimes)}, 每个方案 {reps} 次重复")
    return StudyResult(
        regimes=regimes,
        reps=reps,
        grid=grid,
        curves=pd.DataFrame(curve_rows),
        hazard_ratios=pd.DataFrame(
            hr_rows, columns=["replicate", "regime", "analysis", "hazard_ratio"]
        ),
        failures=failures_df,
        meta={"diagnostics": pd.DataFrame(diag_rows)},
    )


def benchmark_table(result: StudyResult) -> pd.DataFrame:
    """把风险比整理成基准表：六行 × 各方案列，值为 exp(b) 的重复平均"""
    regimes = [r for r in result.regimes if r != RANDOMIZED]
    hr = result.hazard_ratios
    table = pd.DataFrame(index=list(BENCHMARK_ROWS), columns=[f"Regime {r}" for r in regimes])
    randomized = hr.loc[hr["analysis"] == "cox_randomized", "hazard_ratio"]
    for row, analysis in zip(BENCHMARK_ROWS, COX_ANALYSES):
        for regime in regimes:
            if analysis == "cox_randomized":
                value = randomized.mean() if len(randomized) else np.nan
            else:
                mask = (hr["regime"] == regime) & (hr["analysis"] == analysis)
                value = hr.loc[mask, "hazard_ratio"].mean() if mask.any() else np.nan
            table.loc[row, f"Regime {regime}"] = value
    table.index.name = "analysis"
    return table.astype(float)


def cox_benchmark(
    base: RegimeConfig,
    reps: int,
    regimes: list[str] | tuple[str, ...] = ("1", "2", "3"),
    settings: StudySettings | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> tuple[pd.DataFrame, StudyResult]:
    """Cox 平均风险比基准表

    随机化方案每次重复运行一次，其平均值在各方案列中重复出现。

    Returns:
        (基准表, 模拟研究结果)
    """
    all_regimes = tuple(str(r) for r in regimes)
    if RANDOMIZED not in all_regimes:
        all_regimes += (RANDOMIZED,)
    result = replicate_study(all_regimes, reps, base, settings, progress)
    table = benchmark_table(result)
    logger.info(COX_SHORTCUT_NOTE)
    return table, result


def calibration_summary(
    base: RegimeConfig,
    reps: int = 5,
    regimes: list[str] | tuple[str, ...] = ("1", "2", "3", RANDOMIZED),
) -> pd.DataFrame:
    """生成参数的校准摘要：受治比例、事件比例、截断率与随机化方案的 Cox 风险比"""
    rows = []
    for regime in regimes:
        for rep in range(reps):
            cohort = generate_cohort(replace(base, regime=str(regime), replicate=rep))
            row = {"regime": str(regime), "replicate": rep, **cohort.diagnostics}
            if str(regime) == RANDOMIZED:
                try:
                    row["cox_hr"] = fit_cox(cohort.observed, [TREAT_COL]).hazard_ratio(TREAT_COL)
                except CausalAttError as exc:
                    logger.warning(f"校准中随机化方案的 Cox 拟合失败: {exc}")
                    row["cox_hr"] = np.nan
            rows.append(row)
    frame = pd.DataFrame(rows)
    summary = frame.drop(columns=["replicate"]).groupby("regime", sort=False).mean()
    logger.info(f"校准摘要完成: {reps} 次重复 × {len(regimes)} 个方案")
    return summary.reset_index()

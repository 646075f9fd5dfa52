"""
命令处理器模块

使用 CommandMixin 模式，提供所有子命令的处理方法。
这些方法将作为混入类被主程序类继承，保持对 self 的完整访问
（配置项以实例属性的形式存在，输出由 self.formatter 负责）。
"""

import logging
import os

import numpy as np
import pandas as pd

from .aalen import fit_additive, slope_test
from .att import AttSettings, CumulativeCurve, bootstrap_band, estimate_att, mediation_decompose
from .config_loader import MissingFile
from .constants import COX_SHORTCUT_NOTE, TREAT_COL
from .counterfactual import (
    NoTreatedPersonTime,
    build_manipulated_panel,
    counterfactual_summary,
    impute_counterfactual,
    treated_averages,
)
from .coxph import fit_cox
from .panel import Panel, load_panel, locf_expand, write_panel
from .simulate import RegimeConfig, generate_cohort
from .study import StudySettings, calibration_summary, cox_benchmark
from .utils import PipelineUtils
from .weights_msm import compute_weights, msm_additive

logger = logging.getLogger(__name__)


class CommandMixin:
    """子命令处理器混入类

    每个 handle_<子命令> 方法完成一次运行并返回摘要文本；
    异常直接向上传递，由主程序统一转换为错误行与退出码。
    """

    def handle_simulate(self) -> str:
        """生成一个方案下的模拟队列，写出观测面板、未治疗臂面板与真实 ATT"""
        cohort = generate_cohort(self._regime_config(self.regime))
        panel_path = self.output or self.formatter.path("panel.csv")
        write_panel(cohort.observed, panel_path)
        self.formatter.written.append(panel_path)
        write_panel(cohort.counterfactual_untreated, self.formatter.path("counterfactual_untreated.csv"))
        self.formatter.written.append(self.formatter.path("counterfactual_untreated.csv"))
        self.formatter.write_csv(cohort.truth, "truth.csv")

        logger.info(f"模拟完成: 方案 {self.regime}, {self.n} 个个体")
        return self._summary("模拟队列", {**cohort.diagnostics, "panel": panel_path})

    def handle_impute(self) -> str:
        """反事实插补：写出受治者的两条协变量轨迹、增量模型系数与受治平均路径"""
        panel = self._load_input()
        cf = impute_counterfactual(
            panel,
            self._covariates(panel),
            self.flim_adjustments,
            include_constant=self.flim_constant,
            restrict_measured=self.restrict_measured,
        )
        if cf.is_empty:
            raise NoTreatedPersonTime()

        self.formatter.write_csv(cf.to_frame(), "counterfactual.csv")
        if cf.flim is not None:
            self.formatter.write_csv(cf.flim.to_frame(), "flim_coefficients.csv")
        self.formatter.write_csv(treated_averages(cf).to_frame(), "treated_averages.csv")
        manipulated_path = self.formatter.path("manipulated_panel.csv")
        write_panel(build_manipulated_panel(cf), manipulated_path)
        self.formatter.written.append(manipulated_path)

        summary = counterfactual_summary(cf)
        if cf.flim is not None:
            summary["non_estimable_intervals"] = cf.flim.non_estimable or "none"
        return self._summary("反事实插补", summary)

    def handle_att(self) -> str:
        """估计累积 ATT 曲线，附带效应分解、斜率检验与可选的自助法区间"""
        panel = self._load_input()
        settings = self._att_settings(panel)
        weights = None
        if self.ipcw:
            weight_set = compute_weights(
                panel,
                settings.baselines,
                settings.covariates,
                self.time_basis,
                self.truncation,
                censoring=True,
            )
            weights = weight_set.frame["w_cens"]
            self.formatter.write_csv(weight_set.to_frame(), "ipcw_weights.csv")

        curve = estimate_att(panel, settings, self.estimator, weights)
        self.formatter.write_curve(curve, f"att_{self.estimator}.csv")

        fit = fit_additive(panel, settings.formula, weights)
        cf = impute_counterfactual(
            panel,
            settings.covariates,
            settings.adjustments,
            include_constant=settings.include_constant,
            restrict_measured=settings.restrict_measured,
        )
        direct, indirect = mediation_decompose(fit, treated_averages(cf), settings.treatment)
        mediation = pd.DataFrame(
            {
                "t": direct.times,
                "direct": direct.values,
                "indirect": indirect.values,
                "total": direct.values + indirect.values,
            }
        )
        self.formatter.write_csv(mediation, "mediation.csv")
        self.formatter.plot_curves(
            "mediation.svg",
            direct.times,
            {"direct": direct.values, "indirect": indirect.values, "total": mediation["total"]},
            title="Direct and indirect effect on the treated",
        )

        summary = {
            "estimator": self.estimator,
            "subjects": panel.n_subjects,
            "final_att": float(curve.values[-1]),
        }
        bands = None
        if self.bootstrap > 0:
            if weights is not None:
                logger.warning("自助法重复样本不重新估计删失权重，区间按未加权拟合计算")
            band = bootstrap_band(
                self.estimator,
                panel,
                self.bootstrap,
                self.level,
                settings,
                seed=self.seed,
                n_jobs=self.threads,
            )
            self.formatter.write_curve(band, f"att_{self.estimator}_bootstrap.csv")
            bands = {f"att_{self.estimator}": (band.lower, band.upper)}
            summary.update({f"bootstrap_{k}": v for k, v in band.meta.items()})

        if curve.fit is not None and self.estimator == "shortcut":
            test = slope_test(curve.fit, settings.treatment, self.slope_weighting)
            summary.update({"slope_statistic": test.statistic, "slope_p_value": test.p_value})
        self.formatter.plot_curves(
            "att.svg",
            curve.times,
            {f"att_{self.estimator}": curve.values},
            title="Cumulative treatment effect on the treated",
            bands=bands,
        )
        return self._summary("ATT 估计", summary)

    def handle_msm(self) -> str:
        """边际结构加性模型：写出权重、累积治疗系数与斜率检验"""
        panel = self._load_input()
        weight_set = compute_weights(
            panel,
            self.baselines,
            self._covariates(panel),
            self.time_basis,
            self.truncation,
            censoring=self.censoring_model,
        )
        fit = msm_additive(panel, weight_set, [TREAT_COL, *self.baselines])
        curve = _treatment_curve(fit, "msm")

        self.formatter.write_csv(weight_set.to_frame(), "weights.csv")
        self.formatter.write_csv(fit.to_frame(), "msm_coefficients.csv")
        self.formatter.write_curve(curve, "msm.csv")
        self.formatter.plot_curves(
            "msm.svg", curve.times, {"msm": curve.values}, title="Marginal structural model",
            bands={"msm": (curve.values - 1.96 * curve.se, curve.values + 1.96 * curve.se)},
        )

        test = slope_test(fit, TREAT_COL, self.slope_weighting)
        summary = {
            **{f"weight_{k}": v for k, v in weight_set.summary().items()},
            "final_msm": float(curve.values[-1]),
            "slope_statistic": test.statistic,
            "slope_p_value": test.p_value,
        }
        return self._summary("边际结构模型", summary)

    def handle_cox(self) -> str:
        """Cox 模型：treat + 所选变量，可选用边际结构权重或反事实操纵面板"""
        panel = self._load_input()
        covariates = self._covariates(panel)
        formula = [TREAT_COL, *self.baselines, *covariates]
        weights = None
        target = panel
        if self.cox_mode == "msm":
            weights = compute_weights(
                panel,
                self.baselines,
                covariates,
                self.time_basis,
                self.truncation,
                censoring=self.censoring_model,
            ).combined
            formula = [TREAT_COL, *self.baselines]
        elif self.cox_mode == "shortcut":
            cf = impute_counterfactual(
                panel,
                covariates,
                self.flim_adjustments,
                include_constant=self.flim_constant,
                restrict_measured=self.restrict_measured,
            )
            if cf.is_empty:
                raise NoTreatedPersonTime()
            target = build_manipulated_panel(cf)
            logger.info(COX_SHORTCUT_NOTE)

        fit = fit_cox(target, formula, weights)
        self.formatter.write_csv(fit.summary_frame(), f"cox_{self.cox_mode}.csv")
        summary = {
            "mode": self.cox_mode,
            "hazard_ratio_treat": fit.hazard_ratio(TREAT_COL),
            "events": fit.n_events,
            "iterations": fit.iterations,
        }
        if fit.dropped:
            summary["dropped"] = ", ".join(fit.dropped)
        return self._summary("Cox 模型", summary)

    def handle_benchmark(self) -> str:
        """六种分析的模拟基准：Cox 平均风险比表与各方案的平均累积曲线"""
        table, result = cox_benchmark(
            self._regime_config(self.regimes[0]),
            self.reps,
            [r for r in self.regimes if r != "randomized"] or ["1", "2", "3"],
            self._study_settings(),
            progress=self._progress,
        )
        self.formatter.write_csv(table, "benchmark_table.csv", index=True)
        self.formatter.write_csv(result.hazard_ratios, "hazard_ratios.csv")
        self.formatter.write_csv(result.failure_counts(), "failures.csv")
        diagnostics = result.meta.get("diagnostics")
        if diagnostics is not None and not diagnostics.empty:
            self.formatter.write_csv(diagnostics, "diagnostics.csv")

        for regime in result.regimes:
            if regime == "randomized":
                continue
            means = result.mean_curves(regime)
            self.formatter.write_csv(means, f"mean_curves_regime_{regime}.csv")
            curves = {c: means[c].to_numpy() for c in means.columns if c != "t"}
            self.formatter.plot_curves(
                f"mean_curves_regime_{regime}.svg",
                means["t"].to_numpy(),
                curves,
                title=f"Regime {regime}: mean cumulative coefficients",
            )

        items = {"reps": self.reps, "seed": self.seed, "note": COX_SHORTCUT_NOTE}
        for row, values in table.iterrows():
            items[row] = ", ".join(f"{v:.3f}" for v in values.to_numpy())
        return self._summary("Cox 平均风险比", items)

    def handle_report(self) -> str:
        """ATT 与 MSM 的双面板比较图，可选受治者反事实轨迹图"""
        panel = self._load_input()
        settings = self._att_settings(panel)
        cf = impute_counterfactual(
            panel,
            settings.covariates,
            settings.adjustments,
            include_constant=settings.include_constant,
            restrict_measured=settings.restrict_measured,
        )
        if cf.is_empty:
            raise NoTreatedPersonTime()
        shortcut = estimate_att(panel, settings, "shortcut")
        weight_set = compute_weights(
            panel,
            settings.baselines,
            settings.covariates,
            self.time_basis,
            self.truncation,
            censoring=self.censoring_model,
        )
        msm = _treatment_curve(msm_additive(panel, weight_set, [TREAT_COL, *settings.baselines]), "msm")

        grid = panel.grid
        att_values = shortcut.on_grid(grid)
        msm_values = msm.on_grid(grid)
        bands = {"msm": _normal_band(msm, grid)}
        if self.bootstrap > 0:
            band = bootstrap_band(
                "shortcut", panel, self.bootstrap, self.level, settings,
                seed=self.seed, n_jobs=self.threads,
            )
            bands["att_shortcut"] = (band.lower, band.upper)
        else:
            bands["att_shortcut"] = _normal_band(shortcut, grid)

        self.formatter.write_csv(
            pd.DataFrame({"t": grid, "att_shortcut": att_values, "msm": msm_values}),
            "report_curves.csv",
        )
        self.formatter.plot_comparison(
            "att_vs_msm.svg",
            grid,
            [
                ("Treatment effect on the treated", {"att_shortcut": att_values}),
                ("Marginal structural model", {"msm": msm_values}),
            ],
            bands=bands,
        )
        if self.trajectories:
            frame = cf.to_frame()
            for name in settings.covariates:
                self.formatter.plot_trajectories(f"trajectories_{name}.svg", frame, name)

        att_test = slope_test(shortcut.fit, settings.treatment, self.slope_weighting)
        msm_test = slope_test(msm.fit, TREAT_COL, self.slope_weighting)
        return self._summary(
            "ATT 与 MSM 对比",
            {
                "final_att_shortcut": float(att_values[-1]),
                "final_msm": float(msm_values[-1]),
                "att_slope_p_value": att_test.p_value,
                "msm_slope_p_value": msm_test.p_value,
            },
        )

    def handle_calibrate(self) -> str:
        """生成参数校准摘要"""
        regimes = list(dict.fromkeys([*self.regimes, "randomized"]))
        summary = calibration_summary(self._regime_config(regimes[0]), self.reps, regimes)
        self.formatter.write_csv(summary, "calibration.csv")
        items = {}
        for _, row in summary.iterrows():
            text = (
                f"treated {row['treated_share']:.3f}, events {row['event_share']:.3f}, "
                f"clamp {row['clamp_rate']:.4f}"
            )
            if "cox_hr" in row and pd.notna(row["cox_hr"]):
                text += f", cox_hr {row['cox_hr']:.3f}"
            items[f"regime {row['regime']}"] = text
        return self._summary("生成参数校准", items)

    def _load_input(self) -> Panel:
        """读取输入面板并做 LOCF 展开"""
        if not self.input or not os.path.exists(self.input):
            logger.error(f"输入文件不存在: {self.input}")
            raise MissingFile(f"input panel not found: {self.input}")
        panel = load_panel(self.input, self.columns)
        return locf_expand(panel)

    def _covariates(self, panel: Panel) -> tuple[str, ...]:
        return tuple(self.covariates) or panel.covariate_names

    def _att_settings(self, panel: Panel) -> AttSettings:
        return AttSettings(
            covariates=self._covariates(panel),
            baselines=tuple(self.baselines),
            adjustments=tuple(self.flim_adjustments),
            include_constant=self.flim_constant,
            restrict_measured=self.restrict_measured,
        )

    def _regime_config(self, regime: str) -> RegimeConfig:
        return RegimeConfig(
            regime=str(regime),
            n=self.n,
            t_max=self.t_max,
            seed=self.seed,
            a0=self.a0,
            aB=self.aB,
            aL=self.aL,
            L_ref=self.L_ref,
            drift_untreated=self.drift_untreated,
            drift_treated=self.drift_treated,
            noise_sd=self.noise_sd,
            base_prob=self.base_prob,
            slope=self.slope,
            dropout_prob=self.dropout_prob,
            dropout_slope=self.dropout_slope,
            common_random_numbers=self.common_random_numbers,
        )

    def _study_settings(self) -> StudySettings:
        return StudySettings(
            time_basis=self.time_basis,
            truncation=self.truncation,
            n_jobs=self.threads,
            memory_threshold=self.memory_threshold,
        )

    def _progress(self, done: int, total: int) -> None:
        logger.debug(f"[{PipelineUtils.get_current_time()}] 已完成 {done}/{total}")

    def _summary(self, title: str, items: dict) -> str:
        """摘要文本，附上本次写出的文件列表"""
        text = self.formatter.format_summary(title, items)
        if self.formatter.written:
            files = "\n".join(f"  {path}" for path in self.formatter.written)
            text += f"\n- 输出文件:\n{files}"
        return text


def _treatment_curve(fit, label: str) -> CumulativeCurve:
    j = fit.index(TREAT_COL)
    return CumulativeCurve(
        label=label,
        times=fit.times,
        values=fit.cumulative[:, j].copy(),
        variance=fit.robust_cov[:, j, j].copy(),
        fit=fit,
    )


def _normal_band(curve: CumulativeCurve, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """逐点 ±1.96·稳健标准误"""
    values = curve.on_grid(grid)
    se = CumulativeCurve(curve.label, curve.times, curve.se).on_grid(grid)
    return values - 1.96 * se, values + 1.96 * se

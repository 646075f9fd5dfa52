"""
结果格式化模块

负责把估计结果写成 CSV（完整双精度）与静态 SVG 阶梯图，
以及生成命令行输出的摘要文本。同样的输入总是写出字节相同的文件。
"""

import logging
import os
from typing import Any

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib import rcParams  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .utils import PipelineUtils  # noqa: E402

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
# SVG 中的元素 id 由该盐值决定，固定后输出可重复
rcParams["svg.hashsalt"] = "causal-att"
SVG_METADATA = {"Date": None}

CURVE_STYLES = {
    "att_direct": {"color": "#1f77b4", "label": "ATT (direct)"},
    "att_shortcut": {"color": "#2ca02c", "label": "ATT (shortcut)"},
    "msm": {"color": "#d62728", "label": "MSM"},
    "naive_treat_L": {"color": "#9467bd", "label": "Naive: treatment + L"},
    "naive_treat": {"color": "#8c564b", "label": "Naive: treatment"},
    "simulated": {"color": "#000000", "label": "ATT: simulated"},
    "truth": {"color": "#7f7f7f", "label": "True ATT", "linestyle": "--"},
    "randomized": {"color": "#ff7f0e", "label": "Randomised"},
}


class ResultFormatter:
    """结果格式化器类"""

    def __init__(self, output_dir: str, enable_plots: bool = True):
        """初始化结果格式化器

        Args:
            output_dir: 输出目录
            enable_plots: 是否输出 SVG 图
        """
        self.output_dir = output_dir
        self.enable_plots = enable_plots
        self.written: list[str] = []

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def write_csv(self, frame: pd.DataFrame, name: str, index: bool = False) -> str:
        """写出 CSV，浮点数使用完整双精度

        Returns:
            写出的文件路径
        """
        path = self.path(name)
        PipelineUtils.ensure_parent_dir(path)
        frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.written.append(path)
        logger.debug(f"写出 {path} ({len(frame)} 行)")
        return path

    def write_curve(self, curve: Any, name: str) -> str:
        """累积曲线 CSV：t, estimate, se, lower, upper"""
        return self.write_csv(curve.to_frame(), name)

    def plot_curves(
        self,
        name: str,
        times: np.ndarray,
        curves: dict[str, np.ndarray],
        title: str = "",
        bands: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
        ylabel: str = "Cumulative coefficient",
    ) -> str | None:
        """多条累积曲线叠加的阶梯图

        Args:
            name: 输出文件名
            times: 网格
            curves: 曲线名 -> 取值
            title: 标题
            bands: 曲线名 -> (下界, 上界)，绘制为阴影
            ylabel: 纵轴标签

        Returns:
            写出的文件路径；关闭绘图时返回 None
        """
        if not self.enable_plots:
            return None
        fig = Figure(figsize=(6.4, 4.8))
        ax = fig.add_subplot(1, 1, 1)
        self._draw_curves(ax, times, curves, bands)
        ax.set_title(title)
        ax.set_xlabel("Time (intervals)")
        ax.set_ylabel(ylabel)
        return self._save(fig, name)

    def plot_comparison(
        self,
        name: str,
        times: np.ndarray,
        panels: list[tuple[str, dict[str, np.ndarray]]],
        bands: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
    ) -> str | None:
        """并排多面板比较图（例如 ATT 与 MSM）"""
        if not self.enable_plots:
            return None
        fig = Figure(figsize=(5.0 * len(panels), 4.5))
        shared = None
        for k, (title, curves) in enumerate(panels):
            ax = fig.add_subplot(1, len(panels), k + 1, sharey=shared)
            shared = shared or ax
            self._draw_curves(ax, times, curves, bands)
            ax.set_title(title)
            ax.set_xlabel("Time (intervals)")
        shared.set_ylabel("Cumulative coefficient")
        return self._save(fig, name)

    def plot_trajectories(
        self,
        name: str,
        frame: pd.DataFrame,
        variable: str,
        max_subjects: int = 30,
    ) -> str | None:
        """受治个体的观测与反事实轨迹（治疗后时间尺度），并叠加两臂均值

        Args:
            name: 输出文件名
            frame: CfPanel.to_frame() 的输出
            variable: 协变量名
            max_subjects: 最多绘制的个体数（按编号排序取前若干个）
        """
        if not self.enable_plots or frame.empty:
            return None
        data = frame[frame["variable"] == variable].copy()
        data["since"] = data["t"] - data["S"]
        fig = Figure(figsize=(6.4, 4.8))
        ax = fig.add_subplot(1, 1, 1)
        shown = sorted(data["id"].unique())[:max_subjects]
        colors = {"observed": "#d62728", "counterfactual": "#1f77b4"}
        for sid in shown:
            rows = data[data["id"] == sid]
            for prov, color in colors.items():
                arm = rows[rows["provenance"] == prov]
                ax.plot(arm["since"], arm["value"], color=color, alpha=0.25, linewidth=0.8)
        means = data.groupby(["provenance", "since"])["value"].mean()
        for prov, color in colors.items():
            if prov in means.index.get_level_values(0):
                arm = means.loc[prov]
                ax.plot(arm.index, arm.to_numpy(), color=color, linewidth=2.5, label=f"{prov} mean")
        ax.set_xlabel("Time since treatment start")
        ax.set_ylabel(variable)
        ax.legend(loc="best")
        return self._save(fig, name)

    def _draw_curves(self, ax, times, curves, bands) -> None:
        for key, values in curves.items():
            style = dict(CURVE_STYLES.get(key, {"label": key}))
            label = style.pop("label")
            ax.step(times, values, where="post", label=label, **style)
            if bands and key in bands:
                lower, upper = bands[key]
                ax.fill_between(
                    times, lower, upper, step="post", alpha=0.2, color=style.get("color")
                )
        ax.axhline(0.0, color="#bbbbbb", linewidth=0.8)
        ax.legend(loc="best", fontsize="small")

    def _save(self, fig: Figure, name: str) -> str:
        path = self.path(name)
        PipelineUtils.ensure_parent_dir(path)
        fig.savefig(path, format="svg", metadata=SVG_METADATA)
        self.written.append(path)
        logger.debug(f"写出 {path}")
        return path

    @staticmethod
    def format_summary(title: str, items: dict[str, Any]) -> str:
        """命令行摘要：标题行加 key: value 行"""
        lines = [f"【{title}】"]
        for key, value in items.items():
            if isinstance(value, float):
                value = f"{value:.6g}"
            lines.append(f"- {key}: {value}")
        return "\n".join(lines)

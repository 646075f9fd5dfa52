"""
生存数据受治者平均处理效应（ATT）估计工具 - 命令行入口

在存在时变混杂的离散时间队列上，用加性风险回归与线性增量模型的反事实插补
估计累积 ATT，并提供边际结构模型、Cox 模型与模拟研究作为对照。

用法示例：
    python main.py simulate --regime 1 --n 1000 --seed 1
    python main.py att --input output/panel.csv --covariates L --bootstrap 200 --seed 3
    python main.py benchmark --reps 250 --n 1000 --seed 1
"""

import argparse
import logging
import sys
from typing import Any

from core.command_handlers import CommandMixin
from core.config_loader import ConfigLoader
from core.constants import ERROR_MESSAGES
from core.error_handler import ErrorHandler
from core.result_formatter import ResultFormatter

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

SUBCOMMANDS = ("simulate", "impute", "att", "msm", "cox", "benchmark", "report", "calibrate")
# 只在命令行出现、不进入配置文件的参数
RUN_ONLY_KEYS = ("subcommand", "config", "log_level", "input", "output", "ipcw", "cox_mode", "trajectories")


class CausalAttApp(CommandMixin):
    """命令行程序主类，负责持有配置并调度子命令"""

    def __init__(self, config_dict: dict[str, Any], run_args: dict[str, Any]):
        """初始化方法，把配置项和运行参数设置为实例属性

        Args:
            config_dict: ConfigLoader.load_all_config 的输出
            run_args: 只属于本次运行的参数（输入输出路径、开关）
        """
        for key, value in config_dict.items():
            setattr(self, key, value)
        for key, value in run_args.items():
            setattr(self, key, value)

        self.formatter = ResultFormatter(self.output_dir, enable_plots=self.plots)
        logger.debug(f"程序配置初始化完成: 输出目录 {self.output_dir}, 进程数 {self.threads}")

    def dispatch(self, subcommand: str) -> str:
        """执行子命令，返回摘要文本"""
        handler = getattr(self, f"handle_{subcommand}")
        logger.info(f"开始执行子命令: {subcommand}")
        return handler()


def _time_basis(text: str) -> Any:
    """时间分段：quarters、none（不分段）或分段数"""
    if text.lower() == "quarters":
        return "quarters"
    if text.lower() == "none":
        return 1
    try:
        pieces = int(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid time basis: {text}") from e
    if pieces < 1:
        raise argparse.ArgumentTypeError("time basis needs at least one piece")
    return pieces


def _exit_code_epilog() -> str:
    """--help 中的退出码说明，与 ERROR_MESSAGES 保持一致"""
    lines = ["exit codes:", "  0  success"]
    seen: dict[int, list[str]] = {}
    for error_type, info in ERROR_MESSAGES.items():
        seen.setdefault(int(info["exit_code"]), []).append(error_type)
    for code in sorted(seen):
        lines.append(f"  {code:<2} {', '.join(seen[code])}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    """构建命令行解析器

    默认值统一为 None，未给出的参数不会覆盖配置文件与内置默认值。
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; its values override flags")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--threads", type=int, help="worker cap; results do not depend on it")
    common.add_argument("--seed", type=int)
    common.add_argument("--no-plots", dest="plots", action="store_const", const=False)
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
    )

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--input", help="long-format panel CSV")
    data.add_argument("--covariates", help="comma separated time-varying covariates")
    data.add_argument("--baselines", help="comma separated baseline covariates")
    data.add_argument("--adjustments", dest="flim_adjustments", help="baselines in the increment model")
    data.add_argument("--no-flim-constant", dest="flim_constant", action="store_const", const=False)
    data.add_argument("--restrict-measured", action="store_const", const=True)
    data.add_argument("--slope-weighting", choices=("at_risk", "unit"))
    data.add_argument("--time-basis", type=_time_basis, help="quarters, none or a number of pieces")
    data.add_argument("--truncation", help="percentile pair such as 1,99; none disables truncation")
    data.add_argument(
        "--no-censoring-model", dest="censoring_model", action="store_const", const=False
    )

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--n", type=int)
    sim.add_argument("--t-max", dest="t_max", type=int)
    sim.add_argument("--dropout-prob", dest="dropout_prob", type=float)
    sim.add_argument(
        "--no-common-random-numbers",
        dest="common_random_numbers",
        action="store_const",
        const=False,
    )

    band = argparse.ArgumentParser(add_help=False)
    band.add_argument("--bootstrap", type=int, help="number of subject bootstrap replicates")
    band.add_argument("--level", type=float)

    parser = argparse.ArgumentParser(
        prog="causal-att",
        description="Treatment effect on the treated for survival data under time-dependent confounding",
        epilog=_exit_code_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", parents=[common, sim], help="generate one simulated cohort")
    p.add_argument("--regime", choices=("1", "2", "3", "randomized"))
    p.add_argument("--output", help="path of the generated panel CSV")

    sub.add_parser("impute", parents=[common, data], help="counterfactual covariate imputation")

    p = sub.add_parser("att", parents=[common, data, band], help="cumulative ATT curve")
    p.add_argument("--estimator", choices=("direct", "shortcut"))
    p.add_argument("--ipcw", action="store_true", help="weight the outcome fit by censoring weights")

    sub.add_parser("msm", parents=[common, data], help="marginal structural additive model")

    p = sub.add_parser("cox", parents=[common, data], help="Cox proportional hazards fit")
    p.add_argument(
        "--mode",
        dest="cox_mode",
        choices=("plain", "msm", "shortcut"),
        default="plain",
    )

    for name, text in (("benchmark", "six-analysis simulation study"), ("calibrate", "generator calibration")):
        p = sub.add_parser(name, parents=[common, sim], help=text)
        p.add_argument("--reps", type=int)
        p.add_argument("--regimes", help="comma separated regimes, e.g. 1,2,3")

    p = sub.add_parser("report", parents=[common, data, band], help="ATT versus MSM comparison")
    p.add_argument("--trajectories", action="store_true")
    return parser


def _split_args(args: argparse.Namespace) -> tuple[dict[str, Any], dict[str, Any]]:
    """命令行参数拆分为配置覆盖项与运行参数"""
    values = vars(args)
    run_args = {key: values.get(key) for key in RUN_ONLY_KEYS}
    run_args["ipcw"] = bool(run_args["ipcw"])
    run_args["trajectories"] = bool(run_args["trajectories"])
    run_args["cox_mode"] = run_args["cox_mode"] or "plain"
    overrides = {k: v for k, v in values.items() if k not in RUN_ONLY_KEYS and v is not None}
    return overrides, run_args


def run(argv: list[str] | None = None) -> int:
    """执行一次命令行调用

    Args:
        argv: 参数列表，默认取 sys.argv[1:]

    Returns:
        进程退出码（0 表示成功）
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    overrides, run_args = _split_args(args)

    try:
        config_dict = ConfigLoader.load_all_config(args.config, overrides)
        ConfigLoader.validate_run_config(
            config_dict,
            args.subcommand,
            {
                "input": run_args["input"],
                "config": args.config,
                "output": run_args["output"],
            },
        )
        app = CausalAttApp(config_dict, run_args)
        summary = app.dispatch(args.subcommand)
    except Exception as e:
        error_type = ErrorHandler.get_error_type(e)
        line = ErrorHandler.handle_error(error_type, e, {"subcommand": args.subcommand})
        print(line, file=sys.stderr)
        return ErrorHandler.exit_code(error_type)

    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(run())

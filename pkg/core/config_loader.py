"""
配置加载模块

负责加载、验证和初始化所有配置项。
配置文件为 JSON，按中文分区组织；分区中的值覆盖命令行参数，
缺失的键取 constants.DEFAULT_SETTINGS 中的默认值。
"""

import copy
import json
import logging
import os
from typing import Any

from .constants import DEFAULT_SETTINGS, STOCHASTIC_COMMANDS
from .error_handler import CausalAttError
from .utils import PipelineUtils

logger = logging.getLogger(__name__)


class ConfigError(CausalAttError):
    """配置相关基础异常类"""

    pass


class ConfigInvalid(ConfigError):
    """配置文件结构无效或运行配置不满足约束"""

    pass


class MissingFile(ConfigError):
    """引用的文件不存在"""

    pass


class ConfigLoader:
    """配置加载器类"""

    # 配置分区 -> {文件中的键: 扁平键}
    NESTED_CONFIG_PATHS = {
        "数据列": {
            "id": "col_id",
            "t": "col_t",
            "treat": "col_treat",
            "event": "col_event",
            "censor": "col_censor",
            "observed": "col_observed",
            "covariates": "covariates",
            "baselines": "baselines",
        },
        "模型设置": {
            "flim_adjustments": "flim_adjustments",
            "flim_constant": "flim_constant",
            "restrict_measured": "restrict_measured",
            "slope_weighting": "slope_weighting",
            "estimator": "estimator",
        },
        "权重设置": {
            "time_basis": "time_basis",
            "truncation": "truncation",
            "censoring_model": "censoring_model",
        },
        "模拟设置": {
            "regime": "regime",
            "regimes": "regimes",
            "n": "n",
            "reps": "reps",
            "seed": "seed",
            "t_max": "t_max",
            "a0": "a0",
            "aB": "aB",
            "aL": "aL",
            "L_ref": "L_ref",
            "drift_untreated": "drift_untreated",
            "drift_treated": "drift_treated",
            "noise_sd": "noise_sd",
            "base_prob": "base_prob",
            "slope": "slope",
            "dropout_prob": "dropout_prob",
            "dropout_slope": "dropout_slope",
            "common_random_numbers": "common_random_numbers",
        },
        "自助法设置": {
            "replicates": "bootstrap",
            "level": "level",
        },
        "运行设置": {
            "threads": "threads",
            "memory_threshold": "memory_threshold",
            "output_dir": "output_dir",
            "plots": "plots",
        },
    }

    COLUMN_ROLES = ("id", "t", "treat", "event", "censor")
    VALID_CHOICES = {
        "slope_weighting": ("at_risk", "unit"),
        "estimator": ("direct", "shortcut"),
        "regime": ("1", "2", "3", "randomized"),
    }

    @staticmethod
    def load_all_config(path: str | None, cli_overrides: dict | None = None) -> dict:
        """加载所有配置项

        优先级：配置文件 > 命令行参数 > 默认值。

        Args:
            path: 配置文件路径（可选）
            cli_overrides: 命令行参数中显式给出的值（None 视为未给出）

        Returns:
            包含所有配置项的扁平字典

        Raises:
            MissingFile: 配置文件不存在
            ConfigInvalid: 配置文件不是合法的分区 JSON
        """
        config_dict = copy.deepcopy(DEFAULT_SETTINGS)
        for key, value in (cli_overrides or {}).items():
            if value is not None:
                config_dict[key] = value

        raw = ConfigLoader._read_config_file(path) if path else {}
        file_values = ConfigLoader._flatten_sections(raw)
        config_dict.update(file_values)
        config_dict["columns"] = ConfigLoader._collect_columns(config_dict)

        ConfigLoader._validate_values(config_dict)
        if path:
            logger.info(f"配置加载完成: {path}，覆盖了 {len(file_values)} 个配置项")
        return config_dict

    @staticmethod
    def load_column_schema(path: str | None) -> dict:
        """只读取“数据列”分区，返回 load_panel 使用的列映射字典"""
        raw = ConfigLoader._read_config_file(path) if path else {}
        section = raw.get("数据列", {})
        schema = {role: section[role] for role in ConfigLoader.COLUMN_ROLES if role in section}
        schema["covariates"] = PipelineUtils.parse_name_list(section.get("covariates"))
        schema["baselines"] = PipelineUtils.parse_name_list(section.get("baselines"))
        schema["observed"] = dict(section.get("observed") or {})
        return schema

    @staticmethod
    def validate_run_config(config: dict, subcommand: str, paths: dict[str, str | None]) -> None:
        """检查运行配置的约束

        Args:
            config: load_all_config 的输出
            subcommand: 子命令名
            paths: 角色 -> 路径（输入、配置、输出文件等）

        Raises:
            ConfigInvalid: 路径重复或随机子命令缺少种子
        """
        given = {role: os.path.abspath(p) for role, p in paths.items() if p}
        seen: dict[str, str] = {}
        for role, p in given.items():
            if p in seen:
                raise ConfigInvalid(f"paths for {seen[p]} and {role} must differ: {p}")
            seen[p] = role

        stochastic = subcommand in STOCHASTIC_COMMANDS or (
            subcommand in ("att", "report") and int(config.get("bootstrap") or 0) > 0
        )
        if stochastic and config.get("seed") is None:
            raise ConfigInvalid(f"subcommand {subcommand} needs a seed (--seed)")

    @staticmethod
    def _read_config_file(path: str) -> dict:
        if not os.path.exists(path):
            logger.error(f"配置文件不存在: {path}")
            raise MissingFile(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            logger.error(f"配置文件不是合法的 JSON: {e}")
            raise ConfigInvalid(f"config is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigInvalid("config must be a JSON object of sections")
        unknown = [k for k in raw if k not in ConfigLoader.NESTED_CONFIG_PATHS]
        if unknown:
            raise ConfigInvalid(f"unknown config sections: {unknown}")
        for name, section in raw.items():
            if not isinstance(section, dict):
                raise ConfigInvalid(f"config section {name} must be an object")
        return raw

    @staticmethod
    def _flatten_sections(raw: dict) -> dict:
        flat = {}
        for section, keys in ConfigLoader.NESTED_CONFIG_PATHS.items():
            values = raw.get(section, {})
            for key, value in values.items():
                if key not in keys:
                    logger.warning(f"忽略未知配置项: {section}.{key}")
                    continue
                flat[keys[key]] = value
        return flat

    @staticmethod
    def _collect_columns(config_dict: dict) -> dict:
        """把 col_* 扁平键与协变量列表合成列映射"""
        columns = dict(config_dict.get("columns") or {})
        for role in ConfigLoader.COLUMN_ROLES:
            value = config_dict.pop(f"col_{role}", None)
            if value:
                columns[role] = value
        observed = config_dict.pop("col_observed", None)
        if observed:
            columns["observed"] = dict(observed)
        config_dict["covariates"] = PipelineUtils.parse_name_list(config_dict.get("covariates"))
        config_dict["baselines"] = PipelineUtils.parse_name_list(config_dict.get("baselines"))
        columns["covariates"] = config_dict["covariates"]
        columns["baselines"] = config_dict["baselines"]
        return columns

    @staticmethod
    def _validate_values(config_dict: dict) -> None:
        """无效值记录警告并恢复默认值"""
        for key, choices in ConfigLoader.VALID_CHOICES.items():
            value = str(config_dict[key])
            if value not in choices:
                logger.warning(f"无效的 {key}: {value}，将使用默认值 {DEFAULT_SETTINGS[key]}")
                value = DEFAULT_SETTINGS[key]
            config_dict[key] = value

        config_dict["regimes"] = [str(r) for r in PipelineUtils.parse_name_list(
            config_dict["regimes"] if isinstance(config_dict["regimes"], (list, tuple))
            else str(config_dict["regimes"])
        )]
        bad = [r for r in config_dict["regimes"] if r not in ConfigLoader.VALID_CHOICES["regime"]]
        if bad or not config_dict["regimes"]:
            logger.warning(f"无效的方案列表: {config_dict['regimes']}，将使用默认值")
            config_dict["regimes"] = list(DEFAULT_SETTINGS["regimes"])
        config_dict["flim_adjustments"] = PipelineUtils.parse_name_list(
            config_dict["flim_adjustments"]
        )

        try:
            config_dict["truncation"] = PipelineUtils.parse_percentile_pair(
                config_dict["truncation"]
            )
        except (TypeError, ValueError):
            logger.warning(f"无效的截断百分位: {config_dict['truncation']}，将使用默认值")
            config_dict["truncation"] = tuple(DEFAULT_SETTINGS["truncation"])

        basis = config_dict["time_basis"]
        if basis not in (None, "quarters") and not (
            isinstance(basis, int) and basis >= 1
        ) and not isinstance(basis, list):
            logger.warning(f"无效的时间分段: {basis}，将使用默认值 'quarters'")
            config_dict["time_basis"] = "quarters"

        int_rules = {"n": 1, "reps": 1, "t_max": 1, "bootstrap": 0, "threads": 0}
        for key, minimum in int_rules.items():
            try:
                value = int(config_dict[key])
                if value < minimum:
                    raise ValueError
                config_dict[key] = value
            except (TypeError, ValueError):
                logger.warning(f"无效的 {key}: {config_dict[key]}，将使用默认值 {DEFAULT_SETTINGS[key]}")
                config_dict[key] = DEFAULT_SETTINGS[key]
        config_dict["threads"] = PipelineUtils.clamp_workers(config_dict["threads"])

        if config_dict["seed"] is not None:
            try:
                config_dict["seed"] = int(config_dict["seed"])
            except (TypeError, ValueError):
                logger.warning(f"无效的随机种子: {config_dict['seed']}，视为未设置")
                config_dict["seed"] = None

        level = config_dict["level"]
        if not isinstance(level, (int, float)) or not 0.0 < float(level) < 1.0:
            logger.warning(f"无效的区间水平: {level}，将使用默认值 0.95")
            config_dict["level"] = DEFAULT_SETTINGS["level"]

        threshold = config_dict["memory_threshold"]
        if not isinstance(threshold, (int, float)) or not 0 < threshold <= 100:
            logger.warning(f"无效的内存阈值: {threshold}，将使用默认值 80")
            config_dict["memory_threshold"] = DEFAULT_SETTINGS["memory_threshold"]

"""
常量定义模块

定义项目中使用的所有常量、枚举和配置字典。
"""

from typing import Any

# 面板标准列名
ID_COL = "id"
TIME_COL = "t"
TREAT_COL = "treat"
EVENT_COL = "event"
CENSOR_COL = "censor"
# 观测标记列前缀：obs_<协变量名>，1 表示该期实际测量，0 表示沿用上次观测
OBSERVED_PREFIX = "obs_"

# 回归系数名
INTERCEPT_NAME = "const"
TREATMENT_NAME = TREAT_COL

# 模拟研究默认网格（0..11 共 12 个月）
DEFAULT_T_MAX = 11

# 数值容差
NEWTON_GRADIENT_TOL = 1e-8
NEWTON_MAX_ITER = 100
MONOTONE_BETA_LIMIT = 10.0


class ErrorType:
    """错误类型枚举"""

    # 配置相关
    CONFIG_ERROR = "config_error"
    CONFIG_INVALID = "config_invalid"
    MISSING_FILE = "missing_file"

    # 数据面板相关
    PANEL_ERROR = "panel_error"

    # 估计相关
    NO_TREATED = "no_treated_person_time"
    ESTIMABILITY = "estimability_error"
    WEIGHT_MODEL = "weight_model_error"
    COX_FIT = "cox_fit_error"
    BOOTSTRAP = "bootstrap_error"
    GRID_MISMATCH = "grid_mismatch"
    SIMULATION = "simulation_error"

    # 其他错误
    UNKNOWN_ERROR = "unknown_error"
    INTERNAL_ERROR = "internal_error"


class ErrorSeverity:
    """错误严重程度枚举"""

    INFO = "info"
    WARNING = "warning"
    ERROR = "error"
    CRITICAL = "critical"


# 错误处理配置（exit_code 与 --help 中的说明保持一致）
ERROR_MESSAGES: dict[str, dict[str, Any]] = {
    "config_error": {
        "message": "配置错误",
        "solution": "请检查配置文件与命令行参数是否正确",
        "severity": ErrorSeverity.ERROR,
        "exit_code": 2,
    },
    "config_invalid": {
        "message": "配置无效",
        "solution": "配置文件格式无效，请检查 JSON 结构与分区名称",
        "severity": ErrorSeverity.ERROR,
        "exit_code": 2,
    },
    "missing_file": {
        "message": "文件不存在",
        "solution": "请确认输入文件路径正确且可读",
        "severity": ErrorSeverity.ERROR,
        "exit_code": 3,
    },
    "panel_error": {
        "message": "面板数据校验失败",
        "solution": "请检查列映射、治疗单调性、重复行以及退出后的多余记录",
        "severity": ErrorSeverity.ERROR,
        "exit_code": 4,
    },
    "no_treated_person_time": {
        "message": "no treated person-time",
        "solution": "数据中没有任何个体开始治疗，无法估计受治者平均处理效应",
        "severity": ErrorSeverity.ERROR,
        "exit_code": 5,
    },
    "estimability_error": {
        "message": "反事实轨迹无法估计",
        "solution": "未治疗人时不足以拟合线性增量模型，请检查数据或减少调整变量",
        "severity": ErrorSeverity.ERROR,
        "exit_code": 6,
    },
    "weight_model_error": {
        "message": "权重模型拟合失败",
        "solution": "逻辑回归未收敛或出现完全分离，请减少协变量或调整时间分段",
        "severity": ErrorSeverity.ERROR,
        "exit_code": 7,
    },
    "cox_fit_error": {
        "message": "Cox 模型拟合失败",
        "solution": "偏似然无有限极大值或牛顿迭代未收敛，请检查协变量",
        "severity": ErrorSeverity.ERROR,
        "exit_code": 8,
    },
    "bootstrap_error": {
        "message": "重复抽样失败",
        "solution": "失败的重复次数过多，请查看日志中的单次失败原因",
        "severity": ErrorSeverity.ERROR,
        "exit_code": 9,
    },
    "grid_mismatch": {
        "message": "时间网格不一致",
        "solution": "回归拟合与受治者平均值必须来自同一面板",
        "severity": ErrorSeverity.ERROR,
        "exit_code": 10,
    },
    "simulation_error": {
        "message": "模拟参数无效",
        "solution": "请检查模拟设置中的概率与漂移参数",
        "severity": ErrorSeverity.ERROR,
        "exit_code": 2,
    },
    "unknown_error": {
        "message": "未知错误",
        "solution": "请检查日志获取详细信息",
        "severity": ErrorSeverity.CRITICAL,
        "exit_code": 1,
    },
    "internal_error": {
        "message": "内部错误",
        "solution": "程序内部发生错误，请检查日志或联系开发者",
        "severity": ErrorSeverity.CRITICAL,
        "exit_code": 1,
    },
}


# 基准表行名（六种分析，顺序与 study.COX_ANALYSES 对应）
BENCHMARK_ROWS = (
    "Treatment effect on the treated: simulated",
    "Treatment effect on the treated: shortcut",
    "Marginal structural model",
    "Naive: treatment + time dependent covariate",
    "Naive: treatment",
    "Randomised treatment",
)

COX_SHORTCUT_NOTE = (
    "Cox shortcut: with time-varying effects the hazard ratio is some kind of "
    "average over follow-up; interpret as a summary, not a constant effect."
)


# 运行配置默认值（扁平键 -> 默认值），ConfigLoader 按配置文件分区覆盖
DEFAULT_SETTINGS: dict[str, Any] = {
    # 数据列
    "columns": {},
    "covariates": [],
    "baselines": [],
    # 模型设置
    "flim_adjustments": [],
    "flim_constant": True,
    "restrict_measured": False,
    "slope_weighting": "at_risk",
    "estimator": "shortcut",
    # 权重设置
    "time_basis": "quarters",
    "truncation": [1.0, 99.0],
    "censoring_model": True,
    # 模拟设置
    "regime": "1",
    "regimes": ["1", "2", "3"],
    "n": 1000,
    "reps": 250,
    "seed": None,
    "t_max": DEFAULT_T_MAX,
    "a0": 0.005,
    "aB": -0.005,
    "aL": 0.001,
    "L_ref": 50.0,
    "drift_untreated": -1.0,
    "drift_treated": 0.5,
    "noise_sd": 1.0,
    "base_prob": 0.07,
    "slope": None,
    "dropout_prob": 0.0,
    "dropout_slope": 0.0,
    "common_random_numbers": True,
    # 自助法设置
    "bootstrap": 0,
    "level": 0.95,
    # 运行设置
    "threads": 1,
    "memory_threshold": 80.0,
    "output_dir": "output",
    "plots": True,
}

# 需要随机种子的子命令
STOCHASTIC_COMMANDS = ("simulate", "benchmark", "calibrate")

"""
错误处理模块

提供统一的错误处理、日志记录和机器可读的错误信息生成。
"""

import logging

from .constants import ERROR_MESSAGES, ErrorSeverity, ErrorType

logger = logging.getLogger(__name__)


class CausalAttError(Exception):
    """项目内所有领域异常的基类"""

    pass


class ErrorHandler:
    """错误处理器类"""

    @staticmethod
    def handle_error(
        error_type: str,
        original_error: Exception,
        context: dict | None = None,
    ) -> str:
        """统一错误处理方法

        Args:
            error_type: 错误类型
            original_error: 原始异常对象
            context: 额外上下文信息（可选）

        Returns:
            单行机器可读错误信息
        """
        error_config = ERROR_MESSAGES.get(error_type, ERROR_MESSAGES["unknown_error"])
        error_message = error_config["message"]
        severity = error_config["severity"]

        context_str = ErrorHandler._build_context_str(context)
        ErrorHandler._log_error(error_message, original_error, context_str, severity)
        return ErrorHandler._build_error_line(error_type, original_error)

    @staticmethod
    def exit_code(error_type: str) -> int:
        """错误类型对应的进程退出码"""
        error_config = ERROR_MESSAGES.get(error_type, ERROR_MESSAGES["unknown_error"])
        return int(error_config["exit_code"])

    @staticmethod
    def _build_context_str(context: dict | None) -> str:
        """构建上下文信息字符串"""
        if not context:
            return ""
        return " | ".join(f"{key}: {value}" for key, value in context.items())

    @staticmethod
    def _log_error(
        error_message: str,
        original_error: Exception,
        context_str: str,
        severity: str,
    ) -> None:
        """记录错误日志"""
        log_message = f"{error_message}: {str(original_error)}"
        if context_str:
            log_message += f" ({context_str})"

        log_levels = {
            ErrorSeverity.INFO: logger.info,
            ErrorSeverity.WARNING: logger.warning,
            ErrorSeverity.ERROR: logger.error,
            ErrorSeverity.CRITICAL: logger.critical,
        }
        # 严重错误附带堆栈，其余只记录摘要
        log_levels[severity](
            log_message, exc_info=severity == ErrorSeverity.CRITICAL
        )

    @staticmethod
    def _build_error_line(error_type: str, original_error: Exception) -> str:
        """构建机器可读的单行错误信息"""
        error_config = ERROR_MESSAGES.get(error_type, ERROR_MESSAGES["unknown_error"])
        detail = str(original_error).replace('"', "'").replace("\n", " ")
        if len(detail) > 200:
            detail = detail[:200] + "..."
        return (
            f"error={error_type} exit_code={error_config['exit_code']} "
            f'message="{error_config["message"]}" detail="{detail}" '
            f'solution="{error_config["solution"]}"'
        )

    @staticmethod
    def get_error_type(exception: Exception) -> str:
        """根据异常类型获取对应的错误类型

        Args:
            exception: 异常对象

        Returns:
            错误类型字符串
        """
        exception_msg = str(exception).lower()
        exception_type_lower = type(exception).__name__.lower()

        # 按优先级检查各类错误
        error_type = (
            ErrorHandler._check_config_errors(exception)
            or ErrorHandler._check_panel_errors(exception)
            or ErrorHandler._check_estimation_errors(exception)
            or ErrorHandler._check_fit_errors(exception)
            or ErrorHandler._check_other_errors(exception_type_lower, exception_msg)
            or ErrorType.UNKNOWN_ERROR
        )
        return error_type

    @staticmethod
    def _check_config_errors(exception: Exception) -> str | None:
        """检查配置与文件相关错误"""
        from .config_loader import ConfigError, ConfigInvalid, MissingFile

        if isinstance(exception, (MissingFile, FileNotFoundError)):
            return ErrorType.MISSING_FILE
        if isinstance(exception, ConfigInvalid):
            return ErrorType.CONFIG_INVALID
        if isinstance(exception, ConfigError):
            return ErrorType.CONFIG_ERROR
        return None

    @staticmethod
    def _check_panel_errors(exception: Exception) -> str | None:
        """检查面板数据相关错误"""
        from .panel import PanelError

        if isinstance(exception, PanelError):
            return ErrorType.PANEL_ERROR
        return None

    @staticmethod
    def _check_estimation_errors(exception: Exception) -> str | None:
        """检查反事实与 ATT 估计相关错误"""
        from .att import BootstrapFailure, GridMismatch
        from .counterfactual import CounterfactualError, NoTreatedPersonTime
        from .flim import FlimError

        if isinstance(exception, NoTreatedPersonTime):
            return ErrorType.NO_TREATED
        if isinstance(exception, (FlimError, CounterfactualError)):
            return ErrorType.ESTIMABILITY
        if isinstance(exception, GridMismatch):
            return ErrorType.GRID_MISMATCH
        if isinstance(exception, BootstrapFailure):
            return ErrorType.BOOTSTRAP
        return None

    @staticmethod
    def _check_fit_errors(exception: Exception) -> str | None:
        """检查回归拟合相关错误"""
        from .coxph import CoxFitError
        from .simulate import SimulationError
        from .study import StudyError
        from .weights_msm import WeightModelError

        if isinstance(exception, WeightModelError):
            return ErrorType.WEIGHT_MODEL
        if isinstance(exception, CoxFitError):
            return ErrorType.COX_FIT
        if isinstance(exception, StudyError):
            return ErrorType.BOOTSTRAP
        if isinstance(exception, SimulationError):
            return ErrorType.SIMULATION
        return None

    @staticmethod
    def _check_other_errors(
        exception_type_lower: str, exception_msg: str
    ) -> str | None:
        """检查其他错误"""
        if "internal" in exception_type_lower or "internal" in exception_msg:
            return ErrorType.INTERNAL_ERROR
        if "no treated person-time" in exception_msg:
            return ErrorType.NO_TREATED
        return None

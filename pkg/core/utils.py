"""
流程工具类

包含配置解析、收敛判据、并行度与内存监控等通用辅助方法。
"""

import gc
import logging
import os
from datetime import datetime

import psutil

from .constants import NEWTON_GRADIENT_TOL

logger = logging.getLogger(__name__)

MAX_WORKERS = 20


class PipelineUtils:
    """估计流程工具类"""

    @staticmethod
    def get_current_time() -> str:
        """获取当前时间的格式化字符串

        Returns:
            格式化的时间字符串
        """
        return datetime.now().strftime("%Y-%m-%d %H:%M:%S")

    @staticmethod
    def parse_name_list(text: str | list[str] | tuple[str, ...] | None) -> list[str]:
        """将列名文本转换为 Python 列表

        支持：
        - 逗号或换行分隔的字符串
        - 已经是列表/元组的输入
        - 自动去除空项和首尾空白

        Args:
            text: 列名文本或序列

        Returns:
            解析后的列名列表

        Example:
            >>> PipelineUtils.parse_name_list("L, age\\nsex")
            ['L', 'age', 'sex']
        """
        if not text:
            return []
        if isinstance(text, (list, tuple)):
            return [str(item).strip() for item in text if str(item).strip()]
        parts = text.replace("\n", ",").split(",")
        return [part.strip() for part in parts if part.strip()]

    @staticmethod
    def parse_percentile_pair(text: str | list | tuple | None) -> tuple[float, float] | None:
        """解析截断百分位对，"none" 或空值表示不截断

        Raises:
            ValueError: 格式不正确或不满足 0 ≤ 下界 < 上界 ≤ 100
        """
        if text is None:
            return None
        if isinstance(text, str):
            if text.strip().lower() in ("", "none", "off"):
                return None
            items = [float(x) for x in text.replace("/", ",").split(",")]
        else:
            items = [float(x) for x in text]
        if len(items) != 2 or not 0.0 <= items[0] < items[1] <= 100.0:
            raise ValueError(f"invalid truncation percentiles: {text}")
        return items[0], items[1]

    @staticmethod
    def clamp_workers(requested: int | None) -> int:
        """并行进程数限制在 1..20，None 表示使用 CPU 核数"""
        if requested is None or requested <= 0:
            requested = os.cpu_count() or 1
        return max(1, min(MAX_WORKERS, int(requested)))

    @staticmethod
    def newton_converged(grad_norm: float, loglik: float) -> bool:
        """牛顿类求解的收敛判据：梯度最大分量小于 1e-8，或小于 1e-8·|对数似然|

        Example:
            >>> PipelineUtils.newton_converged(5e-9, -3.0)
            True
            >>> PipelineUtils.newton_converged(1e-6, -1.0)
            False
        """
        return bool(grad_norm < NEWTON_GRADIENT_TOL * max(1.0, abs(loglik)))

    @staticmethod
    def check_memory_usage(threshold: float = 80.0) -> bool:
        """检查内存使用情况，超过阈值时执行垃圾回收

        Args:
            threshold: 内存使用阈值百分比

        Returns:
            bool: 如果执行了回收，返回 True，否则返回 False
        """
        try:
            memory_usage = psutil.virtual_memory().percent
            logger.debug(f"当前内存使用情况: {memory_usage:.1f}%")
            if memory_usage > threshold:
                logger.warning(f"内存使用超过阈值 ({threshold}%), 执行垃圾回收")
                collected = gc.collect()
                logger.info(f"垃圾回收完成，回收了 {collected} 个对象")
                return True
        except Exception as e:
            logger.error(f"检查内存使用情况失败: {e}")
        return False

    @staticmethod
    def ensure_parent_dir(path: str) -> None:
        """确保输出文件所在目录存在"""
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)

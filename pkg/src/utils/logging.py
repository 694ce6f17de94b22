"""结构化日志配置

日志只写 stdout，不进入实验产物。
"""
import sys
import logging
from typing import Any, Dict, MutableMapping

import numpy as np
import structlog
from structlog import get_logger

from src.config.settings import settings


def numpy_values(_logger: Any, _method: str, event_dict: MutableMapping[str, Any]) -> MutableMapping[str, Any]:
    """把 numpy 标量和小数组转成 Python 值，便于 JSON 输出"""
    for key, value in event_dict.items():
        if isinstance(value, np.generic):
            event_dict[key] = value.item()
        elif isinstance(value, np.ndarray):
            event_dict[key] = value.tolist() if value.size <= 16 else f"ndarray{value.shape}"
    return event_dict


def setup_logging(level: str | None = None, fmt: str | None = None) -> None:
    """设置结构化日志；参数为空时读取 LOG_LEVEL / LOG_FORMAT"""
    level_value = getattr(logging, (level or settings.logging.level).upper())
    renderer = (
        structlog.processors.JSONRenderer()
        if (fmt or settings.logging.format) == "json"
        else structlog.dev.ConsoleRenderer(colors=sys.stdout.isatty())
    )

    logging.basicConfig(format="%(message)s", stream=sys.stdout, level=level_value)

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="ISO"),
            structlog.processors.CallsiteParameterAdder(
                {
                    structlog.processors.CallsiteParameter.FILENAME,
                    structlog.processors.CallsiteParameter.FUNC_NAME,
                    structlog.processors.CallsiteParameter.LINENO,
                }
            ),
            numpy_values,
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level_value),
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )


def bind_run_context(**context: Any) -> Dict[str, Any]:
    """给本次调用之后的所有日志附加运行上下文（命令、配置哈希等）"""
    structlog.contextvars.bind_contextvars(**context)
    return context


def clear_run_context() -> None:
    structlog.contextvars.clear_contextvars()


def get_structured_logger(name: str = None) -> structlog.BoundLogger:
    """获取结构化日志记录器"""
    return get_logger(name)

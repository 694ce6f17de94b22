"""错误处理和重试机制"""
import traceback
from dataclasses import dataclass
from enum import Enum
from functools import wraps
from typing import Any, Callable, Dict, Optional

from pydantic import ValidationError
from tenacity import (
    RetryError,
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from src.utils.logging import get_structured_logger
from src.utils.metrics import metrics

logger = get_structured_logger(__name__)


class ErrorType(Enum):
    """错误类型枚举"""
    CONFIG_ERROR = "config_error"
    VALIDATION_ERROR = "validation_error"
    NUMERIC_ERROR = "numeric_error"
    DIVERGENCE_ERROR = "divergence_error"
    CHECKPOINT_ERROR = "checkpoint_error"
    IO_ERROR = "io_error"
    INTERNAL_ERROR = "internal_error"


@dataclass
class ErrorInfo:
    """错误信息"""
    error_type: ErrorType
    message: str
    details: Optional[Dict[str, Any]] = None
    traceback: Optional[str] = None
    component: str = "unknown"
    recoverable: bool = False


class LabException(Exception):
    """实验室自定义异常基类"""

    error_type: ErrorType = ErrorType.INTERNAL_ERROR

    def __init__(
        self,
        error_info: ErrorInfo | str,
        *,
        component: str = "unknown",
        details: Optional[Dict[str, Any]] = None,
    ):
        if isinstance(error_info, str):
            error_info = ErrorInfo(
                error_type=self.error_type,
                message=error_info,
                details=details,
                component=component,
            )
        self.error_info = error_info
        super().__init__(error_info.message)


class ConfigException(LabException, ValueError):
    """配置异常"""
    error_type = ErrorType.CONFIG_ERROR


class ValidationException(LabException, ValueError):
    """参数或形状校验异常"""
    error_type = ErrorType.VALIDATION_ERROR


class NumericException(LabException, ArithmeticError):
    """数值异常"""
    error_type = ErrorType.NUMERIC_ERROR


class TrainingDivergedException(NumericException):
    """训练发散（损失非有限）"""
    error_type = ErrorType.DIVERGENCE_ERROR

    def __init__(self, step: int, loss: float):
        super().__init__(
            f"non-finite loss {loss!r} at step {step}",
            component="trainer",
            details={"step": step, "loss": loss},
        )
        self.step = step


class CheckpointException(LabException):
    """检查点读写异常"""
    error_type = ErrorType.CHECKPOINT_ERROR


def create_retry_decorator(
    max_attempts: int = 3,
    min_wait: float = 0.05,
    max_wait: float = 1.0,
    component: str = "unknown"
):
    """创建重试装饰器"""

    def decorator(func: Callable):
        retrying = retry(
            stop=stop_after_attempt(max_attempts),
            wait=wait_exponential(multiplier=min_wait, min=min_wait, max=max_wait),
            retry=retry_if_exception_type((PermissionError, InterruptedError, BlockingIOError)),
        )(func)

        @wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return retrying(*args, **kwargs)
            except RetryError as e:
                original_error = e.last_attempt.exception()
                logger.error(
                    "重试失败",
                    component=component,
                    function=func.__name__,
                    attempts=max_attempts,
                    error=str(original_error)
                )
                metrics.record_error("retry_failed", component)
                raise original_error from e
        return wrapper
    return decorator


# 内置异常到错误类型的映射，按顺序匹配；(类型, 是否可恢复)
_BUILTIN_ERRORS = (
    (FileNotFoundError, ErrorType.IO_ERROR, False),
    (OSError, ErrorType.IO_ERROR, True),
    (FloatingPointError, ErrorType.NUMERIC_ERROR, False),
)


def _validation_fields(error: ValidationError) -> list[str]:
    return [f"{'.'.join(str(part) for part in item['loc'])}: {item['msg']}" for item in error.errors()]


def classify_error(error: Exception, component: str) -> ErrorInfo:
    """把任意异常归类为 ErrorInfo"""
    if isinstance(error, LabException):
        return error.error_info
    if isinstance(error, ValidationError):
        fields = _validation_fields(error)
        return ErrorInfo(ErrorType.CONFIG_ERROR, "; ".join(fields), {"fields": fields}, component=component)
    for exc_type, error_type, recoverable in _BUILTIN_ERRORS:
        if isinstance(error, exc_type):
            message = f"file not found: {error.filename}" if isinstance(error, FileNotFoundError) else str(error)
            return ErrorInfo(error_type, message, component=component, recoverable=recoverable)
    return ErrorInfo(ErrorType.INTERNAL_ERROR, str(error) or type(error).__name__, component=component)


def handle_error(
    error: Exception,
    component: str,
    context: Optional[Dict[str, Any]] = None,
) -> ErrorInfo:
    """统一错误处理：归类、记日志、计数"""
    error_info = classify_error(error, component)
    error_info.details = {**(error_info.details or {}), **(context or {})}
    error_info.traceback = traceback.format_exc()

    logger.error(
        "处理错误",
        error_type=error_info.error_type.value,
        component=component,
        message=error_info.message,
        recoverable=error_info.recoverable,
        context=context
    )
    metrics.record_error(error_info.error_type.value, component)
    return error_info


# 产物文件原子替换的重试
io_retry = create_retry_decorator(max_attempts=3, component="artifacts")

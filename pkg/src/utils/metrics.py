"""指标收集和监控"""
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

from prometheus_client import Counter, Gauge, Histogram, Info, start_http_server

from src.utils.logging import get_structured_logger

logger = get_structured_logger(__name__)


@dataclass
class MetricsCollector:
    """指标收集器"""

    # 训练指标
    train_steps_total: Counter = field(
        default_factory=lambda: Counter(
            'lab_train_steps_total',
            'Total optimizer steps',
            ['batch_kind']  # short / long
        )
    )

    train_tokens_total: Counter = field(
        default_factory=lambda: Counter(
            'lab_train_tokens_total',
            'Total training tokens consumed'
        )
    )

    train_loss: Gauge = field(
        default_factory=lambda: Gauge(
            'lab_train_loss',
            'Cross-entropy of the most recent step'
        )
    )

    learning_rate: Gauge = field(
        default_factory=lambda: Gauge(
            'lab_learning_rate',
            'Learning rate of the most recent step'
        )
    )

    # NIAH评测指标
    niah_cells_total: Counter = field(
        default_factory=lambda: Counter(
            'lab_niah_cells_total',
            'Evaluated needles grid cells',
            ['length', 'status']
        )
    )

    # 错误指标
    errors_total: Counter = field(
        default_factory=lambda: Counter(
            'lab_errors_total',
            'Total errors',
            ['error_type', 'component']
        )
    )

    stage_duration: Histogram = field(
        default_factory=lambda: Histogram(
            'lab_stage_duration_seconds',
            'Duration of pipeline stages',
            ['stage']
        )
    )

    # 应用信息
    app_info: Info = field(
        default_factory=lambda: Info(
            'lab_app_info',
            'Application information'
        )
    )

    def __post_init__(self):
        """初始化后设置应用信息"""
        from src import __version__

        self.app_info.info({
            'version': __version__,
            'name': 'rnope-lab',
            'description': 'Desk-scale hybrid attention laboratory'
        })

    @contextmanager
    def time_stage(self, stage: str):
        """计时流水线阶段"""
        start_time = time.perf_counter()
        try:
            yield
        finally:
            duration = time.perf_counter() - start_time
            self.stage_duration.labels(stage=stage).observe(duration)

    def record_train_step(self, batch_kind: str, tokens: int, loss: float, lr: float):
        """记录一次优化步"""
        self.train_steps_total.labels(batch_kind=batch_kind).inc()
        self.train_tokens_total.inc(tokens)
        self.train_loss.set(loss)
        self.learning_rate.set(lr)

    def record_niah_cell(self, length: int, passed: bool):
        """记录NIAH单元格结果"""
        self.niah_cells_total.labels(
            length=str(length),
            status='pass' if passed else 'fail'
        ).inc()

    def record_error(self, error_type: str, component: str):
        """记录错误"""
        self.errors_total.labels(error_type=error_type, component=component).inc()


def start_metrics_server(port: int) -> None:
    """启动Prometheus指标端点"""
    start_http_server(port)
    logger.info("指标端点已启动", port=port)


# 全局指标收集器实例
metrics = MetricsCollector()

"""桌面规模训练循环：长短批次交错、预热+余弦调度、AdamW"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike

from src.core.autograd import Tensor, cross_entropy_loss
from src.models.lab_models import AdamWConfig, PhaseConfig, TrainConfig
from src.services.model_service import TransformerModel
from src.utils.artifacts import write_csv
from src.utils.error_handling import TrainingDivergedException, ValidationException
from src.utils.logging import get_structured_logger
from src.utils.metrics import metrics
from src.utils.seeding import derive_rng

logger = get_structured_logger(__name__)

# (批次序号, 随机数生成器) -> 序列列表
BatchStream = Callable[[int, np.random.Generator], List[np.ndarray]]
# (序列长度, 每批序列数) -> BatchStream
StreamFactory = Callable[[int, int], BatchStream]

METRICS_COLUMNS = ("step", "lr", "loss", "tokens_seen", "batch_kind", "phase", "grad_norm")


# ---- 学习率 ----

def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """线性预热到 peak_lr，之后余弦（或线性）衰减到 end_lr"""
    if not 0 <= step <= cfg.total_steps:
        raise ValidationException(
            f"step {step} outside [0, {cfg.total_steps}]",
            component="trainer",
        )
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    if cfg.schedule == "linear":
        return cfg.peak_lr - (cfg.peak_lr - cfg.end_lr) * progress
    return cfg.end_lr + (cfg.peak_lr - cfg.end_lr) * (1.0 + math.cos(math.pi * progress)) / 2.0


def cross_entropy(logits, targets: ArrayLike) -> float:
    return cross_entropy_loss(logits, targets).item()


# ---- 批次交错 ----

@dataclass
class Batch:
    kind: str
    step_index: int
    sequences: List[np.ndarray]


def interleave_pattern(ratio: Tuple[int, int], count: int) -> List[str]:
    """``(3, 1)`` → S,S,S,L 循环"""
    short, long = ratio
    if short < 0 or long < 0:
        raise ValidationException("interleave ratio components must be >= 0", component="trainer")
    if short + long == 0:
        raise ValidationException("interleave ratio has a zero total", component="trainer")
    cycle = ["S"] * short + ["L"] * long
    return [cycle[i % len(cycle)] for i in range(count)]


def interleave_batches(
    short_stream: Optional[BatchStream],
    long_stream: Optional[BatchStream],
    ratio: Tuple[int, int],
    seed: int,
    count: int,
    start: int = 0,
) -> Iterator[Batch]:
    """按比例交错两个数据流；第 i 批只取决于 (ratio, seed, i)"""
    kinds = interleave_pattern(ratio, count)
    if ratio[0] > 0 and short_stream is None:
        raise ValidationException("short stream is required for a positive short ratio", component="trainer")
    if ratio[1] > 0 and long_stream is None:
        raise ValidationException("long stream is required for a positive long ratio", component="trainer")

    counters = {"S": 0, "L": 0}
    for offset, kind in enumerate(kinds):
        step_index = start + offset
        rng = derive_rng(seed, "batch", step_index)
        stream = short_stream if kind == "S" else long_stream
        sequences = stream(counters[kind], rng)
        counters[kind] += 1
        yield Batch(kind="short" if kind == "S" else "long", step_index=step_index, sequences=sequences)


# ---- 优化器 ----

def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """全局范数裁剪；返回裁剪前的范数"""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


class AdamW:
    """解耦权重衰减的 Adam；权重衰减只作用于矩阵参数"""

    def __init__(self, params: Sequence[Tuple[str, Tensor]], cfg: AdamWConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if p.ndim >= 2 and self.cfg.weight_decay > 0:
                p.data -= (lr * self.cfg.weight_decay) * p.data
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.cfg.eps)


# ---- 训练 ----

@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    tokens_seen: int
    batch_kind: str
    phase: str
    grad_norm: float

    def row(self) -> List:
        return [self.step, self.lr, self.loss, self.tokens_seen, self.batch_kind, self.phase, self.grad_norm]


@dataclass
class TrainResult:
    model: TransformerModel
    log: List[StepRecord] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.log[-1].loss if self.log else float("nan")


def _sequences_per_batch(batch_tokens: int, length: int) -> int:
    return max(1, batch_tokens // length)


def _phase_model(base: TransformerModel, phase: PhaseConfig) -> TransformerModel:
    if phase.rope_theta is None:
        return base
    return base.with_pattern(base.pattern.with_full_rope_theta(phase.rope_theta))


def train_step(model: TransformerModel, sequences: Sequence[np.ndarray], step: int) -> Tuple[float, int]:
    """对一批序列做前向+反向，梯度按序列数取平均；返回 (平均损失, token 数)"""
    n = len(sequences)
    total_loss = 0.0
    tokens = 0
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        logits, _ = model.forward(seq[:-1])
        loss = cross_entropy_loss(logits, seq[1:])
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedException(step, value)
        loss.backward(1.0 / n)
        total_loss += value / n
        tokens += int(seq.size)
    return total_loss, tokens


def train(model: TransformerModel, data: StreamFactory, cfg: TrainConfig) -> TrainResult:
    """运行 total_steps 次 AdamW 更新；给定种子时完全确定"""
    optimizer = AdamW(model.parameters(), cfg.optimizer)
    params = [p for _, p in model.parameters()]
    result = TrainResult(model=model)
    tokens_seen = 0
    step = 0

    logger.info(
        "开始训练",
        variant=model.pattern.variant,
        total_steps=cfg.total_steps,
        parameters=model.num_parameters(),
        phases=[p.name for p in cfg.resolved_phases()],
    )
    for phase in cfg.resolved_phases():
        phase_model = _phase_model(model, phase)
        short_stream = data(phase.short_len, _sequences_per_batch(cfg.batch_tokens, phase.short_len))
        long_stream = data(phase.long_len, _sequences_per_batch(cfg.batch_tokens, phase.long_len))
        logger.info("进入训练阶段", phase=phase.name, steps=phase.steps, theta=phase.rope_theta)

        for batch in interleave_batches(short_stream, long_stream, phase.interleave_ratio, cfg.seed,
                                        count=phase.steps, start=step):
            step += 1
            lr = lr_schedule(step, cfg)
            with metrics.time_stage("train_step"):
                model.zero_grad()
                loss, tokens = train_step(phase_model, batch.sequences, step)
                grad_norm = clip_grad_norm(params, cfg.grad_clip)
                optimizer.step(lr)
            tokens_seen += tokens
            result.log.append(StepRecord(step, lr, loss, tokens_seen, batch.kind, phase.name, grad_norm))
            metrics.record_train_step(batch.kind, tokens, loss, lr)
            if step % cfg.log_every == 0 or step == cfg.total_steps:
                logger.info("训练进度", step=step, loss=round(loss, 6), lr=lr, tokens_seen=tokens_seen,
                            batch_kind=batch.kind, phase=phase.name)
        model = phase_model
        result.model = model

    logger.info("训练完成", steps=step, final_loss=result.final_loss)
    return result


def write_metrics_csv(path: Path, log: Sequence[StepRecord], config_hash: Optional[str] = None) -> Path:
    return write_csv(path, METRICS_COLUMNS, (record.row() for record in log), config_hash)


# ---- 记忆任务数据 ----

def memorization_corpus(n_sequences: int, length: int, vocab_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    return [rng.integers(0, vocab_size, size=length, dtype=np.int64) for _ in range(n_sequences)]


def memorization_stream(corpus: Sequence[np.ndarray]) -> StreamFactory:
    """按固定顺序循环取语料；长度超过语料时使用整条序列"""

    def factory(length: int, count: int) -> BatchStream:
        def stream(index: int, rng: np.random.Generator) -> List[np.ndarray]:
            start = index * count
            return [np.asarray(corpus[(start + j) % len(corpus)][:length]) for j in range(count)]
        return stream

    return factory

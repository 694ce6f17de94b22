"""合成大海捞针（NIAH）评测：样本生成、网格评测与打分"""
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from src.models.lab_models import GridConfig, PatternConfig
from src.services.training_service import BatchStream, StreamFactory
from src.utils.error_handling import ValidationException
from src.utils.logging import get_structured_logger
from src.utils.metrics import metrics

logger = get_structured_logger(__name__)

# 特殊符号
PAD, BOS, NEEDLE_OPEN, MAPS_TO, NEEDLE_CLOSE, QUERY, SEP, RESERVED = range(8)
N_SPECIAL = 8
QUERY_LEN = 3
MIN_VOCAB = 16


@dataclass(frozen=True)
class TokenLayout:
    """词表划分：特殊符号、键、值、填充，互不相交"""
    vocab_size: int
    key_range: Tuple[int, int]
    value_range: Tuple[int, int]
    filler_range: Tuple[int, int]

    @classmethod
    def for_vocab(cls, vocab_size: int) -> "TokenLayout":
        if vocab_size < MIN_VOCAB:
            raise ValidationException(
                f"vocab_size must be at least {MIN_VOCAB} for the retrieval task",
                component="niah",
            )
        block = vocab_size // 8
        key_lo = N_SPECIAL
        value_lo = key_lo + block
        filler_lo = value_lo + block
        return cls(
            vocab_size=vocab_size,
            key_range=(key_lo, value_lo),
            value_range=(value_lo, filler_lo),
            filler_range=(filler_lo, vocab_size),
        )


def needle_length(value_len: int) -> int:
    return 4 + value_len


def needle_start(length: int, depth: float, value_len: int = 1) -> int:
    """round(depth·(L − needle_len − query_len))，0.5 向上取整"""
    room = length - needle_length(value_len) - QUERY_LEN
    return int(math.floor(depth * room + 0.5))


@dataclass(frozen=True)
class NIAHSample:
    tokens: np.ndarray
    needle_span: Tuple[int, int]
    query_span: Tuple[int, int]
    answer: Tuple[int, ...]
    key: int
    seed: int
    depth: float

    @property
    def length(self) -> int:
        return int(self.tokens.size)

    def metadata(self) -> Dict[str, Any]:
        """写入注意力轨迹的跨度信息"""
        return {
            "length": self.length,
            "needle_span": list(self.needle_span),
            "query_span": list(self.query_span),
            "answer": list(self.answer),
            "seed": self.seed,
            "depth": self.depth,
        }


def make_sample(L: int, depth: float, seed: int, vocab: int, value_len: int = 1) -> NIAHSample:
    """生成一条样本：随机填充 + 深度 depth 处的 “k 映射到 v” 针 + 末尾查询"""
    if not 0.0 <= depth <= 1.0:
        raise ValidationException(f"depth {depth} outside [0, 1]", component="niah")
    if value_len < 1:
        raise ValidationException("value_len must be at least 1", component="niah")
    minimum = needle_length(value_len) + QUERY_LEN
    if L < minimum:
        raise ValidationException(
            f"L={L} is too small to hold the needle and query (needs {minimum})",
            component="niah",
        )
    layout = TokenLayout.for_vocab(vocab)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(L), int(round(depth * 1e4))]))

    body_len = L - QUERY_LEN
    body = rng.integers(*layout.filler_range, size=body_len, dtype=np.int64)
    key = int(rng.integers(*layout.key_range))
    value = rng.integers(*layout.value_range, size=value_len, dtype=np.int64)

    needle = np.concatenate([[NEEDLE_OPEN, key, MAPS_TO], value, [NEEDLE_CLOSE]]).astype(np.int64)
    start = needle_start(L, depth, value_len)
    body[start:start + needle.size] = needle
    tokens = np.concatenate([body, np.array([QUERY, key, MAPS_TO], dtype=np.int64)])

    return NIAHSample(
        tokens=tokens,
        needle_span=(start, start + needle.size),
        query_span=(body_len, L),
        answer=tuple(int(v) for v in value),
        key=key,
        seed=int(seed),
        depth=float(depth),
    )


def contains_subsequence(haystack: Sequence[int], needle: Sequence[int]) -> bool:
    n = len(needle)
    return any(tuple(haystack[i:i + n]) == tuple(needle) for i in range(len(haystack) - n + 1))


# ---- 网格 ----

class Decoder(Protocol):
    def generate(self, tokens: Sequence[int], max_new_tokens: int) -> List[int]:
        ...


@dataclass
class CellResult:
    length: int
    depth: float
    seed: int
    passed: bool
    generated: Tuple[int, ...] = ()


@dataclass
class NeedlesGrid:
    """长度 × 深度 × 种子 的评测网格"""
    lengths: List[int]
    depths: List[float]
    seeds_per_cell: int = 16
    seed_offset: int = 0
    value_len: int = 1
    decode_slack: int = 0

    @classmethod
    def from_config(cls, cfg: GridConfig) -> "NeedlesGrid":
        return cls(
            lengths=list(cfg.lengths),
            depths=list(cfg.depths),
            seeds_per_cell=cfg.seeds_per_cell,
            seed_offset=cfg.seed_offset,
            value_len=cfg.value_len,
            decode_slack=cfg.decode_slack,
        )

    @property
    def seeds(self) -> List[int]:
        return [self.seed_offset + s for s in range(self.seeds_per_cell)]

    def cells(self) -> Iterator[Tuple[int, float, int]]:
        for length in self.lengths:
            for depth in self.depths:
                for seed in self.seeds:
                    yield length, depth, seed

    @property
    def n_cells(self) -> int:
        return len(self.lengths) * len(self.depths) * self.seeds_per_cell

    @property
    def decode_span(self) -> int:
        """最长提示加上除最后一个之外的生成 token"""
        return max(self.lengths, default=0) + self.value_len + self.decode_slack - 1


@dataclass
class GridResult:
    grid: NeedlesGrid
    cells: List[CellResult] = field(default_factory=list)

    def _check_complete(self) -> None:
        seen = {(c.length, c.depth, c.seed) for c in self.cells}
        if len(seen) != self.grid.n_cells or seen != set(self.grid.cells()):
            raise ValidationException(
                "every (length, depth, seed) cell must be evaluated before scoring",
                component="niah",
                details={"evaluated": len(seen), "expected": self.grid.n_cells},
            )

    @staticmethod
    def _score(cells: Sequence[CellResult]) -> float:
        return 10.0 * sum(c.passed for c in cells) / len(cells) if cells else 0.0

    @property
    def score(self) -> float:
        """10 × 平均通过率"""
        self._check_complete()
        return self._score(self.cells)

    def per_length_scores(self) -> Dict[int, float]:
        return {n: self._score([c for c in self.cells if c.length == n]) for n in self.grid.lengths}

    def per_depth_scores(self) -> Dict[float, float]:
        return {d: self._score([c for c in self.cells if c.depth == d]) for d in self.grid.depths}

    def score_up_to(self, max_length: int) -> float:
        """长度不超过 max_length 的单元格上的分数"""
        return self._score([c for c in self.cells if c.length <= max_length])

    def heatmap(self) -> List[List[float]]:
        """行为深度、列为长度的分数矩阵"""
        return [
            [self._score([c for c in self.cells if c.depth == d and c.length == n]) for n in self.grid.lengths]
            for d in self.grid.depths
        ]

    def rows(self) -> List[List[Any]]:
        return [[c.length, c.depth, c.seed, int(c.passed)] for c in self.cells]

    def heatmap_rows(self) -> List[List[Any]]:
        return [[d, *scores] for d, scores in zip(self.grid.depths, self.heatmap())]

    def summary(self) -> Dict[str, Any]:
        return {
            "score": self.score,
            "per_length": {str(n): s for n, s in self.per_length_scores().items()},
            "per_depth": {format(d, "g"): s for d, s in self.per_depth_scores().items()},
            "score_up_to": {str(n): self.score_up_to(n) for n in self.grid.lengths},
            "cells": len(self.cells),
            "seeds_per_cell": self.grid.seeds_per_cell,
            "template": "NEEDLE_OPEN key MAPS_TO value NEEDLE_CLOSE / QUERY key MAPS_TO",
            "scoring": "pass iff the greedy continuation contains the answer; score = 10 x pass rate",
        }


def evaluate_cell(model: Decoder, length: int, depth: float, seed: int, vocab: int,
                  value_len: int = 1, decode_slack: int = 0) -> CellResult:
    sample = make_sample(length, depth, seed, vocab, value_len)
    generated = model.generate(sample.tokens, len(sample.answer) + decode_slack)
    return CellResult(
        length=length,
        depth=depth,
        seed=seed,
        passed=contains_subsequence(generated, sample.answer),
        generated=tuple(int(t) for t in generated),
    )


def evaluate_grid(model: Decoder, grid: NeedlesGrid, vocab: int) -> GridResult:
    """逐单元格贪心解码并判定通过与否"""
    config = getattr(model, "config", None)
    # 解码越界须在评测任何单元格之前报错
    if config is not None and grid.decode_span > config.max_seq and not getattr(model, "allow_extrapolation", False):
        raise ValidationException(
            f"grid length {max(grid.lengths)} plus {grid.value_len + grid.decode_slack - 1} decoded tokens "
            f"exceeds model max_seq={config.max_seq}",
            component="niah",
            details={"decode_span": grid.decode_span},
        )
    result = GridResult(grid=grid)
    for length in grid.lengths:
        with metrics.time_stage("niah_length"):
            for depth in grid.depths:
                for seed in grid.seeds:
                    cell = evaluate_cell(model, length, depth, seed, vocab, grid.value_len, grid.decode_slack)
                    result.cells.append(cell)
                    metrics.record_niah_cell(length, cell.passed)
        passed = sum(c.passed for c in result.cells if c.length == length)
        logger.info("NIAH长度评测完成", length=length, passed=passed,
                    total=len(grid.depths) * grid.seeds_per_cell)
    return result


def score_grid(model: Decoder, grid: NeedlesGrid, vocab: int) -> float:
    return evaluate_grid(model, grid, vocab).score


def format_score_row(name: str, score: float) -> str:
    """形如 ``RNoPE-10k-swa 9.56``"""
    return f"{name} {score:.2f}"


def theta_label(theta: float) -> str:
    for suffix, unit in (("M", 1e6), ("k", 1e3)):
        if theta >= unit and theta % unit == 0:
            return f"{int(theta // unit)}{suffix}"
    return format(theta, "g")


def display_name(variant: str, pattern: Optional[PatternConfig] = None) -> str:
    """报告中使用的变体名"""
    theta = theta_label((pattern or PatternConfig()).theta)
    return {
        "rope-baseline": "RoPE",
        "qk-norm": "QK-Norm",
        "nope": "NoPE",
        "rnope": f"RNoPE-{theta}",
        "rnope-swa": f"RNoPE-{theta}-swa",
    }.get(variant, variant)


# ---- 训练数据流 ----

TRAIN_SEED_BASE = 1 << 32


def retrieval_stream(vocab: int, value_len: int = 1) -> StreamFactory:
    """检索课程：随机深度的样本后接答案；种子取自 [2³², 2³³)，与评测种子不相交"""

    def factory(length: int, count: int) -> BatchStream:
        sample_len = length - value_len

        def stream(index: int, rng: np.random.Generator) -> List[np.ndarray]:
            batch = []
            for _ in range(count):
                depth = float(rng.uniform(0.0, 1.0))
                seed = int(rng.integers(TRAIN_SEED_BASE, 2 * TRAIN_SEED_BASE))
                sample = make_sample(sample_len, depth, seed, vocab, value_len)
                batch.append(np.concatenate([sample.tokens, np.asarray(sample.answer, dtype=np.int64)]))
            return batch

        return stream

    return factory

"""注意力诊断：四段注意力质量、按层类型聚合、熵与分布预处理"""
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from src.core.attention import AttentionTrace
from src.core.autograd import no_grad
from src.services.niah_service import NIAHSample
from src.utils.error_handling import ValidationException
from src.utils.logging import get_structured_logger

logger = get_structured_logger(__name__)

SEGMENTS: Tuple[str, ...] = ("begin", "needle", "context", "end")
BEGIN_TOKENS = 10
TRIM_TAIL_PERCENT = 3
SMOOTHING_WINDOW = 100


# ---- 分段 ----

@dataclass(frozen=True)
class SegmentSpans:
    """Begin=[0,10)、Needle、End=查询跨度，Context 为其余位置"""
    length: int
    needle: Tuple[int, int]
    end: Tuple[int, int]
    begin: Tuple[int, int] = (0, BEGIN_TOKENS)

    def __post_init__(self):
        spans = {"begin": self.begin, "needle": self.needle, "end": self.end}
        for name, (lo, hi) in spans.items():
            if not 0 <= lo < hi <= self.length:
                raise ValidationException(
                    f"{name} span [{lo}, {hi}) is not inside [0, {self.length})",
                    component="analysis",
                )
        ordered = sorted(spans.items(), key=lambda item: item[1])
        for (name_a, a), (name_b, b) in zip(ordered, ordered[1:]):
            if a[1] > b[0]:
                raise ValidationException(
                    f"segment spans do not partition the sequence: {name_a} overlaps {name_b}",
                    component="analysis",
                    details={name_a: list(a), name_b: list(b)},
                )

    @classmethod
    def for_sample(cls, sample: NIAHSample) -> "SegmentSpans":
        return cls(length=sample.length, needle=sample.needle_span, end=sample.query_span)

    @classmethod
    def from_metadata(cls, metadata: Dict[str, Any]) -> "SegmentSpans":
        try:
            return cls(
                length=int(metadata["length"]),
                needle=tuple(metadata["needle_span"]),
                end=tuple(metadata["query_span"]),
            )
        except KeyError as e:
            raise ValidationException(f"trace metadata lacks {e.args[0]!r}", component="analysis") from e

    def segment_ids(self) -> NDArray:
        """每个键位置所属的段编号（SEGMENTS 下标）"""
        ids = np.full(self.length, SEGMENTS.index("context"), dtype=np.int64)
        ids[slice(*self.begin)] = SEGMENTS.index("begin")
        ids[slice(*self.needle)] = SEGMENTS.index("needle")
        ids[slice(*self.end)] = SEGMENTS.index("end")
        return ids

    def segment_lengths(self) -> Dict[str, int]:
        counts = np.bincount(self.segment_ids(), minlength=len(SEGMENTS))
        return {name: int(c) for name, c in zip(SEGMENTS, counts)}


# ---- 注意力质量 ----

@dataclass
class SegmentMasses:
    """[layers, heads, 4] 段质量及每层类型"""
    masses: NDArray
    kinds: List[str]
    metadata: Dict[str, Any] = field(default_factory=dict)


def attention_mass(trace: AttentionTrace, spans: SegmentSpans, tol: float = 1e-6) -> SegmentMasses:
    """末段每个查询行在各段键上的权重和，对查询行取平均"""
    if trace.length != spans.length:
        raise ValidationException(
            f"trace length {trace.length} does not match spans length {spans.length}",
            component="analysis",
        )
    trace.check_row_stochastic(tol)
    onehot = np.eye(len(SEGMENTS))[spans.segment_ids()]  # [L, 4]
    lo, hi = spans.end
    masses = np.stack([(w[:, lo:hi, :] @ onehot).mean(axis=1) for w in trace.weights])
    return SegmentMasses(masses=masses, kinds=list(trace.kinds), metadata=dict(trace.metadata))


@dataclass
class MassReport:
    """按层类型分组的平均段质量"""
    groups: Dict[str, NDArray]
    counts: Dict[str, int]
    variant: Optional[str] = None
    length: Optional[int] = None

    def mass(self, kind: str, segment: str) -> float:
        return float(self.groups[kind][SEGMENTS.index(segment)])

    def rows(self) -> List[List[Any]]:
        return [
            [self.variant or "", self.length or "", kind, *[float(v) for v in values]]
            for kind, values in self.groups.items()
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variant": self.variant,
            "length": self.length,
            "groups": {
                kind: {segment: float(v) for segment, v in zip(SEGMENTS, values)}
                for kind, values in self.groups.items()
            },
            "counts": dict(self.counts),
        }


MASS_COLUMNS = ("variant", "length", "kind", *SEGMENTS)


def aggregate_mass(
    masses: Sequence[SegmentMasses],
    expected_kinds: Optional[Sequence[str]] = None,
    variant: Optional[str] = None,
    length: Optional[int] = None,
) -> MassReport:
    """同一层类型内跨头、层、样本取不加权平均"""
    collected: Dict[str, List[NDArray]] = {}
    for item in masses:
        for layer, kind in enumerate(item.kinds):
            collected.setdefault(kind, []).append(item.masses[layer])

    kinds = list(expected_kinds) if expected_kinds is not None else sorted(collected)
    groups: Dict[str, NDArray] = {}
    counts: Dict[str, int] = {}
    for kind in kinds:
        blocks = collected.get(kind)
        if not blocks:
            logger.warning("聚合组为空，已省略", kind=kind, variant=variant, length=length)
            continue
        stacked = np.concatenate(blocks, axis=0)  # [rows, 4]
        groups[kind] = stacked.mean(axis=0)
        counts[kind] = int(stacked.shape[0])
    return MassReport(groups=groups, counts=counts, variant=variant, length=length)


# ---- 熵 ----

def row_entropy(row: ArrayLike) -> float:
    """香农熵（nats），0·ln0 记为 0"""
    p = np.asarray(row, dtype=np.float64)
    positive = p[p > 0]
    return float(-np.sum(positive * np.log(positive)))


def preprocess_distribution(row: ArrayLike) -> NDArray:
    """去掉前 10 个与末尾 3% 的位置，再做窗口 min(100, 剩余长度) 的居中滑动平均"""
    row = np.asarray(row, dtype=np.float64)
    length = row.size
    tail = -(-TRIM_TAIL_PERCENT * length // 100)
    if length <= BEGIN_TOKENS + tail:
        raise ValidationException(
            f"row of length {length} is too short to trim {BEGIN_TOKENS} + {tail} positions",
            component="analysis",
        )
    kept = row[BEGIN_TOKENS:length - tail]
    window = min(SMOOTHING_WINDOW, kept.size)
    kernel = np.ones(window)
    # 边缘按实际覆盖的位置数归一化
    return np.convolve(kept, kernel, mode="same") / np.convolve(np.ones(kept.size), kernel, mode="same")


def retained_positions(length: int) -> NDArray:
    tail = -(-TRIM_TAIL_PERCENT * length // 100)
    return np.arange(BEGIN_TOKENS, length - tail)


def _normalized(row: NDArray) -> Optional[NDArray]:
    total = row.sum()
    if total <= 0:
        return None
    return row / total


def trace_entropies(trace: AttentionTrace, spans: SegmentSpans, mode: str = "raw") -> NDArray:
    """末段每个查询行的熵，展平到 (layer, head, row)"""
    if mode not in ("raw", "preprocessed"):
        raise ValidationException(f"unknown entropy mode {mode!r}", component="analysis")
    lo, hi = spans.end
    values: List[float] = []
    for w in trace.weights:
        for row in w[:, lo:hi, :].reshape(-1, trace.length):
            if mode == "preprocessed":
                smoothed = _normalized(preprocess_distribution(row))
                values.append(row_entropy(smoothed) if smoothed is not None else 0.0)
            else:
                values.append(row_entropy(row))
    return np.asarray(values)


@dataclass
class EntropyEntry:
    variant: str
    length: int
    mode: str
    entropy: float
    rows: int


@dataclass
class EntropyReport:
    entries: List[EntropyEntry] = field(default_factory=list)

    def value(self, length: int, mode: str = "raw") -> float:
        for entry in self.entries:
            if entry.length == length and entry.mode == mode:
                return entry.entropy
        raise KeyError((length, mode))

    def rows(self) -> List[List[Any]]:
        return [[e.variant, e.length, e.mode, e.entropy, e.rows] for e in self.entries]

    def to_dict(self) -> Dict[str, Any]:
        return {"entries": [asdict(e) for e in self.entries]}


ENTROPY_COLUMNS = ("variant", "length", "mode", "entropy", "rows")


def attention_entropy(
    traces: Sequence[AttentionTrace],
    spans: Sequence[SegmentSpans],
    mode: str = "raw",
    variant: str = "",
) -> EntropyReport:
    """按上下文长度分组，对末段查询行、头、层、样本取平均熵"""
    if len(traces) != len(spans):
        raise ValidationException("one SegmentSpans per trace is required", component="analysis")
    by_length: Dict[int, List[NDArray]] = {}
    for trace, span in zip(traces, spans):
        by_length.setdefault(trace.length, []).append(trace_entropies(trace, span, mode))
    report = EntropyReport()
    for length in sorted(by_length):
        values = np.concatenate(by_length[length])
        report.entries.append(EntropyEntry(variant, length, mode, float(values.mean()), int(values.size)))
    return report


def length_label(length: int) -> str:
    return f"{length // 1024}k" if length >= 1024 and length % 1024 == 0 else str(length)


def format_entropy_row(name: str, length: int, entropy: float) -> str:
    """形如 ``RoPE 8k: 6.02``"""
    return f"{name} {length_label(length)}: {entropy:.2f}"


# ---- 分布曲线 ----

@dataclass
class DistributionProfile:
    """预处理后按位置平均的注意力分布（每种层类型一条曲线）"""
    length: int
    positions: NDArray
    curves: Dict[str, NDArray]

    def rows(self) -> List[List[Any]]:
        kinds = sorted(self.curves)
        return [
            [int(pos), *[float(self.curves[k][i]) for k in kinds]]
            for i, pos in enumerate(self.positions)
        ]

    def columns(self) -> List[str]:
        return ["position", *sorted(self.curves)]


def distribution_profile(traces: Sequence[AttentionTrace], spans: Sequence[SegmentSpans]) -> DistributionProfile:
    """对末段查询行、头、层、样本平均预处理后的分布；所有轨迹须同长"""
    lengths = {t.length for t in traces}
    if len(lengths) != 1:
        raise ValidationException("distribution profiles need traces of a single length", component="analysis")
    length = lengths.pop()
    sums: Dict[str, NDArray] = {}
    counts: Dict[str, int] = {}
    for trace, span in zip(traces, spans):
        lo, hi = span.end
        for w, kind in zip(trace.weights, trace.kinds):
            rows = w[:, lo:hi, :].reshape(-1, length)
            smoothed = np.stack([preprocess_distribution(r) for r in rows])
            for key in (kind, "all"):
                sums[key] = sums.get(key, 0.0) + smoothed.sum(axis=0)
                counts[key] = counts.get(key, 0) + smoothed.shape[0]
    curves = {kind: sums[kind] / counts[kind] for kind in sums}
    return DistributionProfile(length=length, positions=retained_positions(length), curves=curves)


# ---- 采集 ----

def capture_traces(model, samples: Sequence[NIAHSample]) -> List[AttentionTrace]:
    """对每个样本运行带捕获的前向，并把跨度写入轨迹元数据"""
    traces = []
    with no_grad():
        for sample in samples:
            _, trace = model.forward(sample.tokens, capture=True)
            trace.metadata.update(sample.metadata())
            traces.append(trace)
    logger.info("采集注意力轨迹", samples=len(samples), variant=model.pattern.variant)
    return traces

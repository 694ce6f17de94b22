"""注意力成本解析模型：掩码对数、FLOPs 估计与 KV 缓存字节数"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence

from src.models.lab_models import LayerPattern, LayerSpec, ModelConfig
from src.utils.error_handling import ValidationException
from src.utils.logging import get_structured_logger

logger = get_structured_logger(__name__)

# QKᵀ 与 权重·V 各一次乘加
FLOPS_CONSTANT = 4

WALL_CLOCK_NOTE = (
    "ratios count attention pairs and cached keys/values only; "
    "end-to-end wall-clock latency depends on hardware and is not modeled"
)


def pair_count(L: int, spec: LayerSpec) -> int:
    """因果全注意力 L(L+1)/2；滑动窗口 L ≥ S 时 S(S+1)/2 + (L−S)·S"""
    if L < 1:
        raise ValidationException("L must be at least 1", component="cost")
    if spec.mask_kind == "causal-swa" and spec.window < L:
        s = spec.window
        return s * (s + 1) // 2 + (L - s) * s
    return L * (L + 1) // 2


def cached_positions(L: int, spec: LayerSpec) -> int:
    if spec.mask_kind == "causal-swa":
        return min(L, spec.window)
    return L


def attn_flops(L: int, spec: LayerSpec, config: ModelConfig) -> int:
    return FLOPS_CONSTANT * pair_count(L, spec) * config.head_dim * config.n_query_heads


def layer_kv_bytes(L: int, spec: LayerSpec, config: ModelConfig, bytes_per_elem: int = 2) -> int:
    """2 · n_kv_heads · head_dim · bytes_per_elem · 缓存位置数"""
    return 2 * config.n_kv_heads * config.head_dim * bytes_per_elem * cached_positions(L, spec)


@dataclass
class LayerCost:
    index: int
    kind: str
    pairs: int
    attn_flops: int
    kv_bytes: int


def layer_costs(pattern: LayerPattern, config: ModelConfig, L: int, bytes_per_elem: int = 2) -> List[LayerCost]:
    return [
        LayerCost(
            index=spec.index,
            kind=spec.kind,
            pairs=pair_count(L, spec),
            attn_flops=attn_flops(L, spec, config),
            kv_bytes=layer_kv_bytes(L, spec, config, bytes_per_elem),
        )
        for spec in pattern.layers
    ]


@dataclass
class KVCacheSize:
    length: int
    total_bytes: int
    baseline_bytes: int
    layers: List[LayerCost]

    @property
    def ratio(self) -> float:
        return self.total_bytes / self.baseline_bytes

    @property
    def reduction_percent(self) -> float:
        return 100.0 * (1.0 - self.ratio)


def kv_cache_size(pattern: LayerPattern, config: ModelConfig, L: int, bytes_per_elem: int = 2) -> KVCacheSize:
    """逐层 KV 缓存字节数之和，以及相对同深度全注意力基线的比例"""
    if len(pattern) == 0:
        raise ValidationException("kv_cache_size needs at least one layer", component="cost")
    layers = layer_costs(pattern, config, L, bytes_per_elem)
    per_full_layer = 2 * config.n_kv_heads * config.head_dim * bytes_per_elem * L
    return KVCacheSize(
        length=L,
        total_bytes=sum(layer.kv_bytes for layer in layers),
        baseline_bytes=per_full_layer * len(pattern),
        layers=layers,
    )


@dataclass
class CostRow:
    length: int
    baseline_pairs: int
    hybrid_pairs: int
    baseline_flops: int
    hybrid_flops: int
    baseline_kv_bytes: int
    hybrid_kv_bytes: int

    @property
    def pair_ratio(self) -> float:
        return self.hybrid_pairs / self.baseline_pairs

    @property
    def flops_ratio(self) -> float:
        return self.hybrid_flops / self.baseline_flops

    @property
    def kv_ratio(self) -> float:
        return self.hybrid_kv_bytes / self.baseline_kv_bytes

    @property
    def kv_reduction_percent(self) -> float:
        return 100.0 * (1.0 - self.kv_ratio)


COST_COLUMNS = (
    "length", "baseline_layout", "hybrid_layout",
    "baseline_pairs", "hybrid_pairs", "pair_ratio",
    "baseline_attn_flops", "hybrid_attn_flops", "flops_ratio",
    "baseline_kv_bytes", "hybrid_kv_bytes", "kv_ratio", "kv_reduction_percent",
)


@dataclass
class CostReport:
    """每个上下文长度一行的基线/混合成本对比"""
    baseline_layout: str
    hybrid_layout: str
    bytes_per_elem: int
    rows_by_length: List[CostRow] = field(default_factory=list)
    note: str = WALL_CLOCK_NOTE

    def row(self, length: int) -> CostRow:
        for row in self.rows_by_length:
            if row.length == length:
                return row
        raise KeyError(length)

    def rows(self) -> List[List[Any]]:
        return [
            [
                r.length, self.baseline_layout, self.hybrid_layout,
                r.baseline_pairs, r.hybrid_pairs, r.pair_ratio,
                r.baseline_flops, r.hybrid_flops, r.flops_ratio,
                r.baseline_kv_bytes, r.hybrid_kv_bytes, r.kv_ratio, r.kv_reduction_percent,
            ]
            for r in self.rows_by_length
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "baseline_layout": self.baseline_layout,
            "hybrid_layout": self.hybrid_layout,
            "bytes_per_elem": self.bytes_per_elem,
            "note": self.note,
            "rows": [dict(zip(COST_COLUMNS, row)) for row in self.rows()],
        }


def efficiency_report(
    baseline_pattern: LayerPattern,
    hybrid_pattern: LayerPattern,
    config: ModelConfig,
    L_list: Sequence[int],
    bytes_per_elem: int = 2,
) -> CostReport:
    if len(baseline_pattern) != len(hybrid_pattern):
        raise ValidationException("patterns must have the same depth", component="cost")
    report = CostReport(
        baseline_layout=baseline_pattern.to_text(),
        hybrid_layout=hybrid_pattern.to_text(),
        bytes_per_elem=bytes_per_elem,
    )
    for L in L_list:
        base = layer_costs(baseline_pattern, config, L, bytes_per_elem)
        hybrid = layer_costs(hybrid_pattern, config, L, bytes_per_elem)
        report.rows_by_length.append(CostRow(
            length=L,
            baseline_pairs=sum(c.pairs for c in base),
            hybrid_pairs=sum(c.pairs for c in hybrid),
            baseline_flops=sum(c.attn_flops for c in base),
            hybrid_flops=sum(c.attn_flops for c in hybrid),
            baseline_kv_bytes=sum(c.kv_bytes for c in base),
            hybrid_kv_bytes=sum(c.kv_bytes for c in hybrid),
        ))
        logger.debug("成本核算", length=L, pair_ratio=report.rows_by_length[-1].pair_ratio)
    return report

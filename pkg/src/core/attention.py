"""位置编码、掩码与分组查询注意力"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from src.core.autograd import (
    Tensor,
    as_tensor,
    layer_norm,
    matmul,
    repeat_axis,
    rotate_pairs,
    softmax_stable,
    transpose,
)
from src.core.container import decode_container, encode_container
from src.utils.error_handling import ValidationException

MaskKind = Literal["causal-full", "causal-swa"]
MASK_KINDS: Tuple[str, ...] = ("causal-full", "causal-swa")

TRACE_MAGIC = b"ATTNTRC1"


def layer_kind(positional: str, mask_kind: str, qk_norm: bool = False) -> str:
    """层类型标签：nope-full / nope-swa / rope-full / rope-swa / qk-norm"""
    if qk_norm:
        return "qk-norm"
    span = "full" if mask_kind == "causal-full" else "swa"
    return f"{positional}-{span}"


# ---- RoPE ----

@dataclass(frozen=True)
class RopeCache:
    """RoPE 的 cos/sin 表，形状 [max_pos, head_dim/2]"""
    theta: float
    head_dim: int
    max_pos: int
    cos: NDArray
    sin: NDArray

    @property
    def frequencies(self) -> NDArray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.theta ** (-2.0 * i / self.head_dim)


def build_rope_cache(theta: float, head_dim: int, max_pos: int) -> RopeCache:
    """构建 RoPE 表：第 i 对的频率为 θ^(−2i/d)"""
    if head_dim <= 0 or head_dim % 2 != 0:
        raise ValidationException(
            f"head_dim must be a positive even count, got {head_dim}",
            component="attention",
        )
    if max_pos < 1:
        raise ValidationException("max_pos must be at least 1", component="attention")
    if not theta > 0:
        raise ValidationException("theta must be positive", component="attention")

    i = np.arange(head_dim // 2, dtype=np.float64)
    frequencies = float(theta) ** (-2.0 * i / head_dim)
    angles = np.outer(np.arange(max_pos, dtype=np.float64), frequencies)
    return RopeCache(
        theta=float(theta),
        head_dim=head_dim,
        max_pos=max_pos,
        cos=np.cos(angles),
        sin=np.sin(angles),
    )


def apply_rope(x, positions: ArrayLike, cache: RopeCache) -> Tensor:
    """按位置旋转 [..., L, head_dim] 的相邻维度对"""
    x = as_tensor(x)
    pos = np.asarray(positions, dtype=np.int64).reshape(-1)
    if x.shape[-1] != cache.head_dim:
        raise ValidationException(
            f"head_dim mismatch: tensor has {x.shape[-1]}, cache has {cache.head_dim}",
            component="attention",
        )
    if pos.shape[0] != x.shape[-2]:
        raise ValidationException("one position per sequence row is required", component="attention")
    if pos.size and (pos.min() < 0 or pos.max() >= cache.max_pos):
        raise ValidationException(
            f"position out of cache range [0, {cache.max_pos})",
            component="attention",
            details={"max_position": int(pos.max())},
        )
    cos = cache.cos[pos].astype(x.dtype, copy=False)
    sin = cache.sin[pos].astype(x.dtype, copy=False)
    return rotate_pairs(x, cos, sin)


# ---- QK-Norm ----

@dataclass
class QKNormParams:
    """每层共享的 query/key 增益向量（长度 head_dim）"""
    q_gain: Tensor
    k_gain: Tensor
    epsilon: float = 1e-5

    @classmethod
    def identity(cls, head_dim: int, epsilon: float = 1e-5, dtype=np.float64) -> "QKNormParams":
        return cls(
            q_gain=Tensor(np.ones(head_dim, dtype=dtype), requires_grad=True),
            k_gain=Tensor(np.ones(head_dim, dtype=dtype), requires_grad=True),
            epsilon=epsilon,
        )


def apply_qk_norm(q, k, params: QKNormParams) -> Tuple[Tensor, Tensor]:
    """沿 head_dim 对每个 (head, position) 的 q 与 k 做层归一化；须在 RoPE 旋转之前调用"""
    q, k = as_tensor(q), as_tensor(k)
    if q.shape[-1] != params.q_gain.shape[-1] or k.shape[-1] != params.k_gain.shape[-1]:
        raise ValidationException("QK-Norm gain length must equal head_dim", component="attention")
    return (
        layer_norm(q, params.q_gain, params.epsilon),
        layer_norm(k, params.k_gain, params.epsilon),
    )


# ---- 掩码 ----

@dataclass(frozen=True)
class AttnMask:
    """因果掩码：全注意力允许 j ≤ i，滑动窗口允许 i−S < j ≤ i"""
    kind: str
    length: int
    window: Optional[int] = None

    @cached_property
    def allowed(self) -> NDArray:
        i = np.arange(self.length)[:, None]
        j = np.arange(self.length)[None, :]
        causal = j <= i
        if self.kind == "causal-swa":
            return causal & (j > i - self.window)
        return causal

    def allowed_at(self, i: int, j: int) -> bool:
        if self.kind == "causal-swa":
            return i - self.window < j <= i
        return j <= i

    def pair_count(self) -> int:
        return int(self.allowed.sum())


def build_mask(L: int, kind: str, S: Optional[int] = None) -> AttnMask:
    """构建因果全注意力或滑动窗口掩码"""
    if L < 1:
        raise ValidationException("mask length must be at least 1", component="attention")
    if kind not in MASK_KINDS:
        raise ValidationException(f"unknown mask kind {kind!r}", component="attention")
    if kind == "causal-swa":
        if S is None:
            raise ValidationException("sliding-window mask requires a window S", component="attention")
        if S < 1:
            raise ValidationException("window S must be at least 1", component="attention")
        return AttnMask(kind=kind, length=L, window=int(S))
    return AttnMask(kind=kind, length=L)


# ---- 注意力轨迹 ----

@dataclass
class AttentionTrace:
    """每层 [heads, L, L] 的 softmax 后权重（被掩码处为 0），以及层类型标签"""
    weights: List[NDArray]
    kinds: List[str]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.kinds):
            raise ValidationException("one kind tag per layer is required", component="attention")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_heads(self) -> int:
        return self.weights[0].shape[0] if self.weights else 0

    @property
    def length(self) -> int:
        return self.weights[0].shape[-1] if self.weights else 0

    @classmethod
    def concat(cls, traces: Sequence["AttentionTrace"], metadata: Optional[Dict[str, Any]] = None) -> "AttentionTrace":
        weights: List[NDArray] = []
        kinds: List[str] = []
        for trace in traces:
            weights.extend(trace.weights)
            kinds.extend(trace.kinds)
        return cls(weights=weights, kinds=kinds, metadata=dict(metadata or {}))

    def check_row_stochastic(self, tol: float = 1e-6) -> None:
        for index, w in enumerate(self.weights):
            sums = w.sum(axis=-1)
            if not np.allclose(sums, 1.0, atol=tol):
                raise ValidationException(
                    "attention rows must sum to 1",
                    component="attention",
                    details={"layer": index, "max_deviation": float(np.abs(sums - 1.0).max())},
                )

    # 序列化
    def header(self) -> Dict[str, Any]:
        return {
            "format": "attention-trace",
            "version": 1,
            "layers": self.n_layers,
            "heads": self.n_heads,
            "length": self.length,
            "kinds": list(self.kinds),
            "metadata": self.metadata,
        }

    def to_bytes(self) -> bytes:
        return encode_container(
            TRACE_MAGIC,
            self.header(),
            [(f"layer_{i}", w) for i, w in enumerate(self.weights)],
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AttentionTrace":
        header, arrays = decode_container(blob, TRACE_MAGIC)
        weights = [arrays[f"layer_{i}"] for i in range(header["layers"])]
        return cls(weights=weights, kinds=list(header["kinds"]), metadata=header.get("metadata", {}))

    def to_json_dict(self) -> Dict[str, Any]:
        payload = self.header()
        payload["weights"] = [w.tolist() for w in self.weights]
        return payload

    @classmethod
    def from_json_dict(cls, payload: Dict[str, Any]) -> "AttentionTrace":
        return cls(
            weights=[np.asarray(w, dtype=np.float64) for w in payload["weights"]],
            kinds=list(payload["kinds"]),
            metadata=payload.get("metadata", {}),
        )

    def save(self, path: str | Path) -> Path:
        from src.utils.artifacts import atomic_write_bytes

        return atomic_write_bytes(Path(path), self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "AttentionTrace":
        return cls.from_bytes(Path(path).read_bytes())


# ---- 缩放点积注意力 ----

def attend(
    q,
    k,
    v,
    mask: AttnMask,
    n_query_heads: int,
    n_kv_heads: int,
    capture: bool = False,
    kind: str = "unknown",
) -> Tuple[Tensor, Optional[AttentionTrace]]:
    """带掩码的分组查询缩放点积注意力

    q: [n_query_heads, L, d]，k/v: [n_kv_heads, L, d]。
    第 h 个查询头读取第 h // (n_query_heads / n_kv_heads) 个键值头。
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if n_kv_heads < 1 or n_query_heads % n_kv_heads != 0:
        raise ValidationException(
            f"n_query_heads={n_query_heads} is not divisible by n_kv_heads={n_kv_heads}",
            component="attention",
        )
    if q.shape[0] != n_query_heads or k.shape[0] != n_kv_heads or v.shape[0] != n_kv_heads:
        raise ValidationException(
            "head axis does not match the declared head counts",
            component="attention",
            details={"q": q.shape, "k": k.shape, "v": v.shape},
        )
    length = q.shape[-2]
    if mask.length != length or k.shape[-2] != length:
        raise ValidationException(
            f"mask length {mask.length} does not match sequence length {length}",
            component="attention",
        )

    group = n_query_heads // n_kv_heads
    if group > 1:
        k = repeat_axis(k, group, axis=0)
        v = repeat_axis(v, group, axis=0)

    head_dim = q.shape[-1]
    logits = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(head_dim))
    weights = softmax_stable(logits, mask.allowed)
    output = matmul(weights, v)

    trace = None
    if capture:
        trace = AttentionTrace(weights=[weights.data.astype(np.float64, copy=True)], kinds=[kind])
    return output, trace

"""实验数据模型：架构、层模式、训练与评测配置"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.core.attention import layer_kind
from src.utils.error_handling import ConfigException

Variant = Literal["rope-baseline", "qk-norm", "nope", "rnope", "rnope-swa"]
VARIANTS: Tuple[str, ...] = ("rope-baseline", "qk-norm", "nope", "rnope", "rnope-swa")


class ModelConfig(BaseModel):
    """解码器架构描述"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    emb_dim: int = Field(default=128, ge=1)
    ffn_dim: int = Field(default=384, ge=1)
    n_layers: int = Field(default=8, ge=0)
    n_query_heads: int = Field(default=4, ge=1)
    n_kv_heads: int = Field(default=2, ge=1)
    vocab_size: int = Field(default=512, ge=2)
    max_seq: int = Field(default=2048, ge=1)
    nonlinearity: Literal["swiglu"] = "swiglu"
    norm_eps: float = Field(default=1e-6, gt=0)
    qk_norm_eps: float = Field(default=1e-5, gt=0)
    init_scale: float = Field(default=0.02, gt=0)

    @model_validator(mode="after")
    def _check_divisibility(self) -> "ModelConfig":
        if self.emb_dim % self.n_query_heads != 0:
            raise ValueError("emb_dim must be divisible by n_query_heads")
        if self.n_query_heads % self.n_kv_heads != 0:
            raise ValueError("n_query_heads must be divisible by n_kv_heads")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary embeddings")
        return self

    @property
    def head_dim(self) -> int:
        return self.emb_dim // self.n_query_heads


# 全尺寸参考配置；桌面配置按约 1/32 缩放并保持整除结构
REFERENCE_MODEL_CONFIG = ModelConfig(
    emb_dim=4096, ffn_dim=28672, n_layers=32, n_query_heads=32, n_kv_heads=8,
    vocab_size=256000, max_seq=262144,
)
DESK_MODEL_CONFIG = ModelConfig()


class LayerSpec(BaseModel):
    """单层注意力设置"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    index: int = Field(ge=0)
    positional: Literal["rope", "nope"]
    qk_norm: bool = False
    mask_kind: Literal["causal-full", "causal-swa"] = "causal-full"
    theta: Optional[float] = None
    window: Optional[int] = None

    @model_validator(mode="after")
    def _check_fields(self) -> "LayerSpec":
        if self.positional == "nope" and self.theta is not None:
            raise ValueError("nope layers never carry theta")
        if self.positional == "rope" and (self.theta is None or self.theta <= 0):
            raise ValueError("rope layers need a positive theta")
        if self.mask_kind == "causal-swa" and (self.window is None or self.window < 1):
            raise ValueError("sliding-window layers need a window >= 1")
        if self.mask_kind == "causal-full" and self.window is not None:
            raise ValueError("full-attention layers carry no window")
        return self

    @property
    def kind(self) -> str:
        return layer_kind(self.positional, self.mask_kind, self.qk_norm)

    @property
    def is_full(self) -> bool:
        return self.mask_kind == "causal-full"

    def to_token(self) -> str:
        parts = [self.positional, "full" if self.is_full else "swa"]
        if not self.is_full:
            parts.append(str(self.window))
        if self.theta is not None:
            parts.append(format(self.theta, ".17g"))
        if self.qk_norm:
            parts.append("qk")
        return ":".join(parts)

    @classmethod
    def from_token(cls, index: int, token: str) -> "LayerSpec":
        parts = token.strip().split(":")
        qk_norm = parts[-1] == "qk"
        if qk_norm:
            parts = parts[:-1]
        try:
            positional, span, *rest = parts
            window = None
            if span == "swa":
                window, rest = int(rest[0]), rest[1:]
            elif span != "full":
                raise ValueError(span)
            theta = float(rest[0]) if rest else None
        except (ValueError, IndexError) as e:
            raise ConfigException(f"malformed layer token {token!r}", component="models") from e
        return cls(
            index=index,
            positional=positional,
            qk_norm=qk_norm,
            mask_kind="causal-full" if span == "full" else "causal-swa",
            theta=theta,
            window=window,
        )


class LayerPattern(BaseModel):
    """按深度排列的层设置与 full:swa 交错比例"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    layers: List[LayerSpec]
    ratio: Tuple[int, int] = (1, 0)
    variant: Optional[str] = None

    @model_validator(mode="after")
    def _check_indices(self) -> "LayerPattern":
        for position, spec in enumerate(self.layers):
            if spec.index != position:
                raise ValueError("layer indices must run 0..n-1 in order")
        return self

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def kinds(self) -> List[str]:
        return [spec.kind for spec in self.layers]

    @property
    def n_full(self) -> int:
        return sum(1 for spec in self.layers if spec.is_full)

    def to_text(self) -> str:
        return ",".join(spec.to_token() for spec in self.layers)

    @classmethod
    def from_text(cls, text: str, ratio: Tuple[int, int] = (1, 0), variant: Optional[str] = None) -> "LayerPattern":
        tokens = [t for t in text.split(",") if t.strip()]
        return cls(
            layers=[LayerSpec.from_token(i, t) for i, t in enumerate(tokens)],
            ratio=ratio,
            variant=variant,
        )

    def with_full_rope_theta(self, theta: float) -> "LayerPattern":
        """替换全注意力 RoPE 层的 θ；滑动窗口 RoPE 层保持不变"""
        layers = [
            spec.model_copy(update={"theta": float(theta)})
            if spec.positional == "rope" and spec.is_full else spec
            for spec in self.layers
        ]
        return self.model_copy(update={"layers": layers})


class AdamWConfig(BaseModel):
    """AdamW 超参数"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.95, ge=0, lt=1)
    weight_decay: float = Field(default=0.1, ge=0)
    eps: float = Field(default=1e-8, gt=0)


class PhaseConfig(BaseModel):
    """训练阶段：长度、交错比例与可选的 RoPE θ 覆盖"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    steps: int = Field(ge=1)
    short_len: int = Field(ge=2)
    long_len: int = Field(ge=2)
    interleave_ratio: Tuple[int, int] = (1, 0)
    rope_theta: Optional[float] = Field(default=None, gt=0)

    @field_validator("interleave_ratio")
    @classmethod
    def _check_ratio(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if min(value) < 0 or sum(value) == 0:
            raise ValueError("interleave ratio components must be >= 0 with a positive total")
        return value


class TrainConfig(BaseModel):
    """训练配置"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    peak_lr: float = Field(default=7e-3, gt=0)
    end_lr: float = Field(default=3.5e-4, ge=0)
    warmup_steps: int = Field(default=100, ge=0)
    total_steps: int = Field(default=2000, ge=1)
    schedule: Literal["cosine", "linear"] = "cosine"
    batch_tokens: int = Field(default=4096, ge=1)
    short_len: int = Field(default=256, ge=2)
    long_len: int = Field(default=1024, ge=2)
    interleave_ratio: Tuple[int, int] = (3, 1)
    seed: int = 0
    optimizer: AdamWConfig = Field(default_factory=AdamWConfig)
    grad_clip: float = Field(default=1.0, ge=0)
    dtype: Literal["float32", "float64"] = "float32"
    log_every: int = Field(default=10, ge=1)
    task: Literal["retrieval", "memorization"] = "retrieval"
    memorization_sequences: int = Field(default=32, ge=1)
    phases: List[PhaseConfig] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_schedule(self) -> "TrainConfig":
        if self.end_lr > self.peak_lr:
            raise ValueError("end_lr must not exceed peak_lr")
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be smaller than total_steps")
        if min(self.interleave_ratio) < 0:
            raise ValueError("interleave ratio components must be >= 0")
        if self.phases and sum(p.steps for p in self.phases) != self.total_steps:
            raise ValueError("phase steps must add up to total_steps")
        return self

    def resolved_phases(self) -> List[PhaseConfig]:
        if self.phases:
            return list(self.phases)
        return [PhaseConfig(
            name="main",
            steps=self.total_steps,
            short_len=self.short_len,
            long_len=self.long_len,
            interleave_ratio=self.interleave_ratio,
        )]


class PatternConfig(BaseModel):
    """层模式构建参数"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    ratio: Tuple[int, int] = (1, 3)
    window: int = Field(default=128, ge=1)
    theta: float = Field(default=10000.0, gt=0)


class GridConfig(BaseModel):
    """NIAH 评测网格"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    lengths: List[int] = Field(default_factory=lambda: [256, 512, 1024, 2048])
    depths: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    seeds_per_cell: int = Field(default=16, ge=1)
    seed_offset: int = Field(default=0, ge=0)
    value_len: int = Field(default=1, ge=1)
    decode_slack: int = Field(default=0, ge=0)

    @field_validator("depths")
    @classmethod
    def _check_depths(cls, value: List[float]) -> List[float]:
        if any(not 0.0 <= d <= 1.0 for d in value):
            raise ValueError("depths must lie in [0, 1]")
        return value

    @property
    def decode_span(self) -> int:
        """贪心解码最后一步送入模型的序列长度"""
        return max(self.lengths, default=0) + self.value_len + self.decode_slack - 1


class AnalysisConfig(BaseModel):
    """注意力分析开关"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    mass: bool = True
    entropy: bool = True
    distribution: bool = True
    entropy_modes: List[Literal["raw", "preprocessed"]] = Field(default_factory=lambda: ["raw"])
    lengths: List[int] = Field(default_factory=lambda: [256, 512, 1024])
    depth: float = Field(default=0.5, ge=0, le=1)
    samples: int = Field(default=4, ge=1)


class CostConfig(BaseModel):
    """效率核算参数"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    lengths: List[int] = Field(default_factory=lambda: [8192, 32768, 65536, 131072])
    bytes_per_elem: int = Field(default=2, ge=1)
    baseline_variant: Variant = "rope-baseline"
    use_reference_config: bool = False


class ExperimentConfig(BaseModel):
    """一次实验的完整配置（每个实验一个 JSON 文件）"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: Optional[str] = None
    variant: Variant = "rnope-swa"
    model: ModelConfig = Field(default_factory=ModelConfig)
    pattern: PatternConfig = Field(default_factory=PatternConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    niah: GridConfig = Field(default_factory=GridConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    cost: CostConfig = Field(default_factory=CostConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    allow_extrapolation: bool = False

    @model_validator(mode="after")
    def _check_lengths(self) -> "ExperimentConfig":
        if self.allow_extrapolation:
            return self
        limit = self.model.max_seq
        referenced = {
            "train.short_len": [self.train.short_len],
            "train.long_len": [self.train.long_len],
            "train.phases": [n for p in self.train.phases for n in (p.short_len, p.long_len)],
            "niah.lengths": [self.niah.decode_span],
            "analysis.lengths": list(self.analysis.lengths),
        }
        for name, lengths in referenced.items():
            if any(n > limit for n in lengths):
                raise ValueError(f"{name} exceeds model.max_seq={limit}; set allow_extrapolation to permit it")
        return self

    @property
    def display_name(self) -> str:
        return self.name or self.variant

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """读取并校验实验配置文件"""
    path = Path(path)
    try:
        payload: Dict[str, Any] = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigException(f"config file not found: {path}", component="config") from e
    except json.JSONDecodeError as e:
        raise ConfigException(f"config is not valid JSON: {e}", component="config") from e
    return ExperimentConfig.model_validate(payload)

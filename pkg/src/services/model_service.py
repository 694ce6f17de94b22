"""层模式构建与仅解码器 Transformer 前向"""
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike

from src.core.attention import (
    AttentionTrace,
    AttnMask,
    QKNormParams,
    RopeCache,
    apply_qk_norm,
    apply_rope,
    attend,
    build_mask,
    build_rope_cache,
)
from src.core.autograd import Tensor, no_grad, rms_norm, silu, take_rows
from src.core.container import decode_container, encode_container
from src.models.lab_models import VARIANTS, LayerPattern, LayerSpec, ModelConfig
from src.utils.error_handling import CheckpointException, ConfigException, ValidationException
from src.utils.logging import get_structured_logger

logger = get_structured_logger(__name__)

CHECKPOINT_MAGIC = b"RNLCKPT1"


def build_layer_pattern(
    n_layers: int,
    ratio: Tuple[int, int],
    window: int,
    theta: float,
    variant: str,
) -> LayerPattern:
    """按变体生成逐层设置

    - ``rope-baseline`` / ``qk-norm`` / ``nope``：各层一致的全注意力
    - ``rnope``：ratio 为 nope:rope，每组 [nope × a, rope × b]
    - ``rnope-swa``：ratio 为 full:swa，每组 [rope-swa × s, nope-full × f]，全注意力层在组末，不带 QK-Norm
    """
    if variant not in VARIANTS:
        raise ConfigException(f"unknown variant {variant!r}", component="model")
    if n_layers < 0:
        raise ConfigException("n_layers must be non-negative", component="model")

    def rope_full(i: int, qk_norm: bool = False) -> LayerSpec:
        return LayerSpec(index=i, positional="rope", qk_norm=qk_norm, theta=theta)

    def nope_full(i: int) -> LayerSpec:
        return LayerSpec(index=i, positional="nope")

    if variant == "rope-baseline":
        layers = [rope_full(i) for i in range(n_layers)]
    elif variant == "qk-norm":
        layers = [rope_full(i, qk_norm=True) for i in range(n_layers)]
    elif variant == "nope":
        layers = [nope_full(i) for i in range(n_layers)]
    else:
        first, second = ratio
        group = first + second
        if first < 0 or second < 0 or group == 0:
            raise ConfigException(f"invalid interleave ratio {ratio}", component="model")
        if n_layers % group != 0:
            raise ConfigException(
                f"n_layers={n_layers} is not divisible by the group size {group}",
                component="model",
                details={"ratio": list(ratio)},
            )
        layers = []
        for i in range(n_layers):
            slot = i % group
            if variant == "rnope":
                layers.append(nope_full(i) if slot < first else rope_full(i))
            else:
                if first == 0:
                    raise ConfigException("rnope-swa needs at least one full layer per group", component="model")
                if slot < second:
                    layers.append(LayerSpec(
                        index=i, positional="rope", mask_kind="causal-swa", theta=theta, window=window,
                    ))
                else:
                    layers.append(nope_full(i))

    pattern = LayerPattern(layers=layers, ratio=tuple(ratio), variant=variant)
    logger.debug("构建层模式", variant=variant, n_layers=n_layers, pattern=pattern.to_text())
    return pattern


def parameter_shapes(config: ModelConfig, pattern: LayerPattern) -> Dict[str, Tuple[int, ...]]:
    """参数名到形状，按名称排序"""
    e, f, d = config.emb_dim, config.ffn_dim, config.head_dim
    hq, hkv = config.n_query_heads, config.n_kv_heads
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.weight": (config.vocab_size, e),
        "final_norm.gain": (e,),
        "unembed.weight": (e, config.vocab_size),
    }
    for spec in pattern.layers:
        prefix = f"layers.{spec.index}"
        shapes[f"{prefix}.attn_norm.gain"] = (e,)
        shapes[f"{prefix}.attn.wq"] = (e, hq * d)
        shapes[f"{prefix}.attn.wk"] = (e, hkv * d)
        shapes[f"{prefix}.attn.wv"] = (e, hkv * d)
        shapes[f"{prefix}.attn.wo"] = (hq * d, e)
        if spec.qk_norm:
            shapes[f"{prefix}.attn.q_gain"] = (d,)
            shapes[f"{prefix}.attn.k_gain"] = (d,)
        shapes[f"{prefix}.ffn_norm.gain"] = (e,)
        shapes[f"{prefix}.ffn.w_gate"] = (e, f)
        shapes[f"{prefix}.ffn.w_up"] = (e, f)
        shapes[f"{prefix}.ffn.w_down"] = (f, e)
    return dict(sorted(shapes.items()))


def _is_gain(name: str) -> bool:
    return name.endswith("gain")


class TransformerModel:
    """预归一化解码器：每层注意力（按 LayerSpec）+ SwiGLU 前馈，最终 RMS 归一化后输出 logits"""

    def __init__(
        self,
        config: ModelConfig,
        pattern: LayerPattern,
        params: Dict[str, Tensor],
        allow_extrapolation: bool = False,
    ):
        if len(pattern) != config.n_layers:
            raise ConfigException(
                f"pattern has {len(pattern)} layers but config.n_layers={config.n_layers}",
                component="model",
            )
        expected = parameter_shapes(config, pattern)
        missing = sorted(set(expected) - set(params))
        if missing:
            raise ConfigException(f"missing parameters: {', '.join(missing[:5])}", component="model")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigException(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}",
                    component="model",
                )
        self.config = config
        self.pattern = pattern
        self.params = {name: params[name] for name in expected}
        self.allow_extrapolation = allow_extrapolation
        self._rope_caches: Dict[float, RopeCache] = {}
        self._masks: Dict[Tuple[str, int, Optional[int]], AttnMask] = {}

    @classmethod
    def initialize(
        cls,
        config: ModelConfig,
        pattern: LayerPattern,
        rng: np.random.Generator,
        dtype: str = "float64",
        init_scale: Optional[float] = None,
        allow_extrapolation: bool = False,
    ) -> "TransformerModel":
        """矩阵按 N(0, init_scale²) 初始化，增益向量初始化为 1"""
        scale = config.init_scale if init_scale is None else init_scale
        params: Dict[str, Tensor] = {}
        for name, shape in parameter_shapes(config, pattern).items():
            if _is_gain(name):
                data = np.ones(shape)
            else:
                data = rng.normal(0.0, scale, size=shape)
            params[name] = Tensor(data.astype(dtype), requires_grad=True)
        return cls(config, pattern, params, allow_extrapolation=allow_extrapolation)

    # ---- 属性 ----
    @property
    def dtype(self) -> np.dtype:
        return self.params["embed.weight"].dtype

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def with_pattern(self, pattern: LayerPattern) -> "TransformerModel":
        """共享参数、替换层模式（长度扩展阶段修改 θ 用）"""
        if [s.qk_norm for s in pattern.layers] != [s.qk_norm for s in self.pattern.layers]:
            raise ConfigException("a new pattern must keep the QK-Norm layout", component="model")
        return TransformerModel(self.config, pattern, self.params, self.allow_extrapolation)

    # ---- 前向 ----
    def _rope_cache(self, theta: float, length: int) -> RopeCache:
        cache = self._rope_caches.get(theta)
        if cache is None or cache.max_pos < length:
            cache = build_rope_cache(theta, self.config.head_dim, max(self.config.max_seq, length))
            self._rope_caches[theta] = cache
        return cache

    def _mask(self, spec: LayerSpec, length: int) -> AttnMask:
        key = (spec.mask_kind, length, spec.window)
        mask = self._masks.get(key)
        if mask is None:
            mask = build_mask(length, spec.mask_kind, spec.window)
            self._masks[key] = mask
        return mask

    def embed(self, tokens: ArrayLike) -> Tensor:
        return take_rows(self.params["embed.weight"], tokens)

    def unembed(self, hidden: Tensor) -> Tensor:
        normed = rms_norm(hidden, self.params["final_norm.gain"], self.config.norm_eps)
        return normed @ self.params["unembed.weight"]

    def _check_tokens(self, tokens: ArrayLike) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise ValidationException("empty token sequence", component="model")
        if ids.size > self.config.max_seq and not self.allow_extrapolation:
            raise ValidationException(
                f"sequence length {ids.size} exceeds max_seq={self.config.max_seq}",
                component="model",
            )
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValidationException("token id out of vocabulary", component="model")
        return ids

    def _attention_block(self, x: Tensor, spec: LayerSpec, positions: np.ndarray, capture: bool):
        p = self.params
        prefix = f"layers.{spec.index}"
        cfg = self.config
        length = x.shape[0]
        d, hq, hkv = cfg.head_dim, cfg.n_query_heads, cfg.n_kv_heads

        h = rms_norm(x, p[f"{prefix}.attn_norm.gain"], cfg.norm_eps)
        q = (h @ p[f"{prefix}.attn.wq"]).reshape(length, hq, d).transpose(1, 0, 2)
        k = (h @ p[f"{prefix}.attn.wk"]).reshape(length, hkv, d).transpose(1, 0, 2)
        v = (h @ p[f"{prefix}.attn.wv"]).reshape(length, hkv, d).transpose(1, 0, 2)

        # QK-Norm 必须在旋转之前
        if spec.qk_norm:
            q, k = apply_qk_norm(q, k, QKNormParams(
                q_gain=p[f"{prefix}.attn.q_gain"],
                k_gain=p[f"{prefix}.attn.k_gain"],
                epsilon=cfg.qk_norm_eps,
            ))
        if spec.positional == "rope":
            cache = self._rope_cache(spec.theta, length)
            q = apply_rope(q, positions, cache)
            k = apply_rope(k, positions, cache)

        out, trace = attend(q, k, v, self._mask(spec, length), hq, hkv, capture=capture, kind=spec.kind)
        out = out.transpose(1, 0, 2).reshape(length, hq * d) @ p[f"{prefix}.attn.wo"]
        return x + out, trace

    def _ffn_block(self, x: Tensor, spec: LayerSpec) -> Tensor:
        p = self.params
        prefix = f"layers.{spec.index}"
        h = rms_norm(x, p[f"{prefix}.ffn_norm.gain"], self.config.norm_eps)
        gated = silu(h @ p[f"{prefix}.ffn.w_gate"]) * (h @ p[f"{prefix}.ffn.w_up"])
        return x + gated @ p[f"{prefix}.ffn.w_down"]

    def forward(self, tokens: ArrayLike, capture: bool = False) -> Tuple[Tensor, Optional[AttentionTrace]]:
        """返回 [L, vocab] logits；capture 时附带每层一块 [heads, L, L] 的注意力轨迹"""
        ids = self._check_tokens(tokens)
        positions = np.arange(ids.size)
        x = self.embed(ids)
        traces: List[AttentionTrace] = []
        for spec in self.pattern.layers:
            x, trace = self._attention_block(x, spec, positions, capture)
            if trace is not None:
                traces.append(trace)
            x = self._ffn_block(x, spec)
        logits = self.unembed(x)

        full_trace = None
        if capture:
            full_trace = AttentionTrace.concat(traces, metadata={
                "variant": self.pattern.variant,
                "pattern": self.pattern.to_text(),
            })
        return logits, full_trace

    def generate(self, tokens: ArrayLike, max_new_tokens: int) -> List[int]:
        """贪心解码（无 KV 缓存，每步重算整段前缀）"""
        sequence = [int(t) for t in np.asarray(tokens, dtype=np.int64).reshape(-1)]
        produced: List[int] = []
        with no_grad():
            for _ in range(max_new_tokens):
                logits, _ = self.forward(sequence)
                next_token = int(np.argmax(logits.data[-1]))
                sequence.append(next_token)
                produced.append(next_token)
        return produced

    # ---- 检查点 ----
    def to_bytes(self, meta: Optional[Dict[str, Any]] = None) -> bytes:
        header = {
            "meta": dict(meta or {}),
            "format": "model-checkpoint",
            "version": 1,
            "config": self.config.model_dump(mode="json"),
            "pattern": self.pattern.to_text(),
            "ratio": list(self.pattern.ratio),
            "variant": self.pattern.variant,
            "dtype": str(self.dtype),
        }
        return encode_container(CHECKPOINT_MAGIC, header, [(n, t.data) for n, t in self.params.items()])

    @classmethod
    def from_bytes(cls, blob: bytes, allow_extrapolation: bool = False) -> "TransformerModel":
        header, arrays = decode_container(blob, CHECKPOINT_MAGIC)
        try:
            config = ModelConfig.model_validate(header["config"])
            pattern = LayerPattern.from_text(
                header["pattern"], ratio=tuple(header["ratio"]), variant=header.get("variant"),
            )
            params = {name: Tensor(array, requires_grad=True) for name, array in arrays.items()}
            return cls(config, pattern, params, allow_extrapolation=allow_extrapolation)
        except (KeyError, ValueError) as e:
            raise CheckpointException(f"invalid checkpoint: {e}", component="model") from e

    def save(self, path: str | Path, meta: Optional[Dict[str, Any]] = None) -> Path:
        from src.utils.artifacts import atomic_write_bytes

        path = atomic_write_bytes(Path(path), self.to_bytes(meta))
        logger.info("保存检查点", path=str(path), parameters=self.num_parameters())
        return path

    @classmethod
    def load(cls, path: str | Path, allow_extrapolation: bool = False) -> "TransformerModel":
        path = Path(path)
        if not path.is_file():
            raise CheckpointException(f"checkpoint not found: {path}", component="model")
        model = cls.from_bytes(path.read_bytes(), allow_extrapolation=allow_extrapolation)
        logger.info("加载检查点", path=str(path), variant=model.pattern.variant)
        return model


def forward(
    config: ModelConfig,
    pattern: LayerPattern,
    weights: Dict[str, Tensor],
    tokens: Sequence[int],
    capture: bool = False,
) -> Tuple[Tensor, Optional[AttentionTrace]]:
    """函数式入口：用给定权重运行一次前向"""
    return TransformerModel(config, pattern, weights).forward(tokens, capture=capture)

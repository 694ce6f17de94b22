"""测试公共夹具"""
import json
import os
from pathlib import Path
from typing import Any, Callable, Dict

import numpy as np
import pytest

from src.models.lab_models import ModelConfig
from src.services.model_service import TransformerModel, build_layer_pattern
from src.utils.logging import setup_logging

CONFIG_DIR = Path(__file__).parent / "configs"


def pytest_configure(config):
    setup_logging(level="WARNING", fmt="text")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="slow experiment; set RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """两层、emb 32 的双精度测试模型"""
    return ModelConfig(
        emb_dim=32, ffn_dim=48, n_layers=2, n_query_heads=4, n_kv_heads=2,
        vocab_size=16, max_seq=32,
    )


@pytest.fixture
def make_model(tiny_config) -> Callable[..., TransformerModel]:
    def factory(variant: str = "rnope-swa", ratio=(1, 1), window: int = 3, theta: float = 10000.0,
                config: ModelConfig = None, seed: int = 0, init_scale: float = 0.5) -> TransformerModel:
        cfg = config or tiny_config
        pattern = build_layer_pattern(cfg.n_layers, ratio, window, theta, variant)
        return TransformerModel.initialize(
            cfg, pattern, np.random.default_rng(seed), dtype="float64", init_scale=init_scale,
        )
    return factory


@pytest.fixture
def smoke_config_payload() -> Dict[str, Any]:
    return json.loads((CONFIG_DIR / "smoke_memorization.json").read_text(encoding="utf-8"))


@pytest.fixture
def write_config(tmp_path) -> Callable[[Dict[str, Any], str], Path]:
    def writer(payload: Dict[str, Any], name: str = "experiment.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(payload), encoding="utf-8")
        return path
    return writer

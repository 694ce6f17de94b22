"""模型测试：层模式构建、前向、梯度检验与检查点"""
import numpy as np
import pytest

from src.core.autograd import cross_entropy_loss, grad_check_params, rms_norm
from src.models.lab_models import LayerPattern, LayerSpec, ModelConfig
from src.services.model_service import (
    TransformerModel,
    build_layer_pattern,
    forward,
    parameter_shapes,
)
from src.utils.error_handling import CheckpointException, ConfigException, ValidationException


class TestLayerPattern:
    def test_rnope_swa_groups_end_with_full_layer(self):
        pattern = build_layer_pattern(8, (1, 3), 128, 10000.0, "rnope-swa")
        assert pattern.kinds == ["rope-swa", "rope-swa", "rope-swa", "nope-full"] * 2
        assert pattern.n_full == 2
        assert all(spec.window == 128 for spec in pattern.layers if not spec.is_full)
        assert not any(spec.qk_norm for spec in pattern.layers)

    def test_rnope_groups(self):
        pattern = build_layer_pattern(8, (1, 3), 128, 10000.0, "rnope")
        assert pattern.kinds == ["nope-full", "rope-full", "rope-full", "rope-full"] * 2

    @pytest.mark.parametrize("variant,kind", [
        ("rope-baseline", "rope-full"),
        ("qk-norm", "qk-norm"),
        ("nope", "nope-full"),
    ])
    def test_baselines_are_uniform(self, variant, kind):
        pattern = build_layer_pattern(6, (1, 3), 64, 10000.0, variant)
        assert pattern.kinds == [kind] * 6
        assert pattern.n_full == 6

    def test_indivisible_depth_rejected(self):
        with pytest.raises(ConfigException):
            build_layer_pattern(6, (1, 3), 128, 10000.0, "rnope-swa")

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigException):
            build_layer_pattern(4, (1, 1), 8, 10000.0, "alibi")

    def test_text_form(self):
        pattern = build_layer_pattern(4, (1, 1), 16, 1e6 / 3, "rnope-swa")
        text = pattern.to_text()
        assert text.split(",")[1] == "nope:full"
        restored = LayerPattern.from_text(text, ratio=(1, 1), variant="rnope-swa")
        assert restored == pattern

    def test_qk_token(self):
        spec = LayerSpec.from_token(0, "rope:full:10000:qk")
        assert spec.qk_norm and spec.theta == 10000.0 and spec.kind == "qk-norm"
        with pytest.raises(ConfigException):
            LayerSpec.from_token(0, "rope:ring:4")

    def test_spec_field_rules(self):
        with pytest.raises(ValueError):
            LayerSpec(index=0, positional="nope", theta=10000.0)
        with pytest.raises(ValueError):
            LayerSpec(index=0, positional="rope", mask_kind="causal-swa", theta=10000.0)

    def test_theta_override_keeps_window_layers(self):
        pattern = build_layer_pattern(4, (1, 1), 8, 10000.0, "rnope-swa")
        hybrid = pattern.with_full_rope_theta(1e6)
        assert hybrid == pattern
        baseline = build_layer_pattern(2, (1, 0), 8, 10000.0, "rope-baseline").with_full_rope_theta(1e6)
        assert [s.theta for s in baseline.layers] == [1e6, 1e6]


def test_parameter_shapes(tiny_config):
    shapes = parameter_shapes(tiny_config, build_layer_pattern(2, (1, 0), 4, 10000.0, "qk-norm"))
    assert list(shapes) == sorted(shapes)
    assert shapes["embed.weight"] == (16, 32)
    assert shapes["layers.0.attn.wk"] == (32, 16)
    assert shapes["layers.1.attn.q_gain"] == (8,)
    plain = parameter_shapes(tiny_config, build_layer_pattern(2, (1, 1), 4, 10000.0, "rnope-swa"))
    assert "layers.0.attn.q_gain" not in plain


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(emb_dim=30, n_query_heads=4, n_kv_heads=2)
    with pytest.raises(ValueError):
        ModelConfig(emb_dim=32, n_query_heads=4, n_kv_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(emb_dim=12, n_query_heads=4, n_kv_heads=2)


class TestForward:
    def test_logit_shape_and_trace(self, make_model, rng):
        model = make_model()
        tokens = rng.integers(0, 16, size=12)
        logits, trace = model.forward(tokens, capture=True)
        assert logits.shape == (12, 16)
        assert trace.kinds == model.pattern.kinds
        assert trace.n_heads == 4 and trace.length == 12
        assert trace.metadata["variant"] == "rnope-swa"
        trace.check_row_stochastic()

    def test_causality(self, make_model, rng):
        model = make_model(variant="rope-baseline", ratio=(1, 0))
        a = rng.integers(0, 16, size=10)
        b = a.copy()
        b[6] = (b[6] + 1) % 16
        la, _ = model.forward(a)
        lb, _ = model.forward(b)
        np.testing.assert_allclose(la.data[:6], lb.data[:6], atol=1e-12)
        assert not np.allclose(la.data[6:], lb.data[6:])

    def test_sliding_window_receptive_field(self, tiny_config, rng):
        pattern = LayerPattern.from_text("rope:swa:2:10000,rope:swa:2:10000")
        model = TransformerModel.initialize(tiny_config, pattern, rng, init_scale=0.5)
        a = rng.integers(0, 16, size=8)
        b = a.copy()
        b[0] = (b[0] + 3) % 16
        la, _ = model.forward(a)
        lb, _ = model.forward(b)
        # 两层窗口 2：位置 i 只看得到 i−2..i
        np.testing.assert_allclose(la.data[3:], lb.data[3:], atol=1e-12)
        assert not np.allclose(la.data[:3], lb.data[:3])

    def test_zero_layer_model(self, rng):
        config = ModelConfig(emb_dim=8, ffn_dim=8, n_layers=0, n_query_heads=2, n_kv_heads=1,
                             vocab_size=10, max_seq=8)
        pattern = build_layer_pattern(0, (1, 0), 4, 10000.0, "rope-baseline")
        model = TransformerModel.initialize(config, pattern, rng, init_scale=1.0)
        tokens = [1, 4, 9]
        logits, _ = model.forward(tokens)
        embedded = model.params["embed.weight"].data[tokens]
        expected = rms_norm(embedded, model.params["final_norm.gain"].data, config.norm_eps).data
        np.testing.assert_allclose(logits.data, expected @ model.params["unembed.weight"].data, atol=1e-12)

    def test_functional_forward_matches(self, make_model, rng):
        model = make_model()
        tokens = rng.integers(0, 16, size=7)
        logits, _ = forward(model.config, model.pattern, model.params, tokens)
        np.testing.assert_array_equal(logits.data, model.forward(tokens)[0].data)

    def test_length_and_vocab_checks(self, make_model):
        model = make_model()
        with pytest.raises(ValidationException):
            model.forward(np.zeros(33, dtype=int))
        with pytest.raises(ValidationException):
            model.forward([1, 16])
        with pytest.raises(ValidationException):
            model.forward([])

    def test_extrapolation_opt_in(self, make_model, tiny_config, rng):
        model = make_model()
        long_model = TransformerModel(tiny_config, model.pattern, model.params, allow_extrapolation=True)
        logits, _ = long_model.forward(rng.integers(0, 16, size=40))
        assert logits.shape == (40, 16)

    def test_theta_swap_changes_rope_logits(self, make_model, rng):
        model = make_model(variant="rope-baseline", ratio=(1, 0))
        tokens = rng.integers(0, 16, size=10)
        swapped = model.with_pattern(model.pattern.with_full_rope_theta(1e6))
        assert swapped.params["embed.weight"] is model.params["embed.weight"]
        assert not np.allclose(model.forward(tokens)[0].data, swapped.forward(tokens)[0].data)

    def test_qk_layout_must_survive_pattern_swap(self, make_model):
        model = make_model(variant="qk-norm", ratio=(1, 0))
        with pytest.raises(ConfigException):
            model.with_pattern(build_layer_pattern(2, (1, 0), 3, 10000.0, "rope-baseline"))

    def test_missing_parameter(self, make_model, tiny_config):
        model = make_model()
        params = dict(model.params)
        params.pop("layers.1.ffn.w_up")
        with pytest.raises(ConfigException):
            TransformerModel(tiny_config, model.pattern, params)

    def test_nope_attention_ignores_absolute_position(self, make_model, tiny_config):
        config = tiny_config.model_copy(update={"n_layers": 1})
        nope = make_model(variant="nope", ratio=(1, 0), config=config)
        rope = make_model(variant="rope-baseline", ratio=(1, 0), config=config)
        tokens = [3, 9, 5, 12, 7, 9, 1, 14, 9, 6]
        _, trace = nope.forward(tokens, capture=True)
        # 相同 token 在同一行得到相同的权重，与其所在位置无关
        row = trace.weights[0][:, -1]
        np.testing.assert_allclose(row[:, 1], row[:, 5], atol=1e-12)
        np.testing.assert_allclose(row[:, 1], row[:, 8], atol=1e-12)
        _, rope_trace = rope.forward(tokens, capture=True)
        assert not np.allclose(rope_trace.weights[0][:, -1, 1], rope_trace.weights[0][:, -1, 5])

        # 打乱前缀顺序不改变末位置的 logits
        shuffled = [1, 14, 9, 3, 9, 12, 9, 5, 7] + tokens[-1:]
        assert sorted(shuffled[:-1]) == sorted(tokens[:-1])
        np.testing.assert_allclose(nope.forward(shuffled)[0].data[-1], nope.forward(tokens)[0].data[-1], atol=1e-10)
        assert not np.allclose(rope.forward(shuffled)[0].data[-1], rope.forward(tokens)[0].data[-1])

    def test_generate_is_greedy_and_deterministic(self, make_model):
        model = make_model()
        first = model.generate([1, 5, 9], 4)
        assert len(first) == 4
        assert first == model.generate([1, 5, 9], 4)
        logits, _ = model.forward([1, 5, 9])
        assert first[0] == int(np.argmax(logits.data[-1]))


@pytest.mark.parametrize("variant,ratio", [("rnope-swa", (1, 1)), ("qk-norm", (1, 0))])
def test_model_gradients_match_finite_differences(make_model, variant, ratio):
    """整模型各参数张量的解析梯度与中心差分一致"""
    model = make_model(variant=variant, ratio=ratio)
    tokens = np.array([1, 7, 3, 3, 12, 0, 9, 4, 15, 2])

    def loss_fn():
        logits, _ = model.forward(tokens[:-1])
        return cross_entropy_loss(logits, tokens[1:])

    errors = grad_check_params(loss_fn, model.params, step=1e-4)
    assert set(errors) == set(model.params)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, worst


class TestCheckpoint:
    def test_save_and_load_reproduce_logits(self, make_model, tmp_path, rng):
        model = make_model(variant="qk-norm", ratio=(1, 0))
        path = model.save(tmp_path / "ckpt" / "model.bin", meta={"step": 5})
        loaded = TransformerModel.load(path)
        assert loaded.pattern == model.pattern
        assert loaded.config == model.config
        tokens = rng.integers(0, 16, size=9)
        np.testing.assert_array_equal(loaded.forward(tokens)[0].data, model.forward(tokens)[0].data)

    def test_bytes_are_deterministic(self, make_model):
        assert make_model(seed=4).to_bytes() == make_model(seed=4).to_bytes()
        assert make_model(seed=4).to_bytes() != make_model(seed=5).to_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointException):
            TransformerModel.load(tmp_path / "absent.bin")

    def test_corrupt_blob(self, make_model):
        blob = make_model().to_bytes()
        with pytest.raises(CheckpointException):
            TransformerModel.from_bytes(b"NOTACKPT" + blob[8:])

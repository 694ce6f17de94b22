"""命令行测试：退出码、产物文件与配置覆盖"""
import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from src.api.cli import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_ERROR, build_parser, main
from src.config.settings import settings
from src.models.lab_models import DESK_MODEL_CONFIG, ExperimentConfig, load_experiment_config
from src.utils.artifacts import read_csv_meta, read_csv_rows, read_json
from src.utils.error_handling import (
    ConfigException,
    ErrorType,
    TrainingDivergedException,
    classify_error,
    handle_error,
)
from src.utils.logging import numpy_values

CONFIG_DIR = Path(__file__).parent / "configs"


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["niah", "--config", "x.json", "--random-init"])
    assert args.command == "niah" and args.random_init and args.checkpoint is None


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    assert load_experiment_config(path).config_hash()


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("desk_*.json")), ids=lambda p: p.stem)
def test_desk_configs_share_the_desk_model(path):
    config = load_experiment_config(path)
    assert config.model == DESK_MODEL_CONFIG
    assert config.niah.decode_span <= DESK_MODEL_CONFIG.max_seq


def test_config_loading_errors(tmp_path):
    with pytest.raises(ConfigException):
        load_experiment_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigException):
        load_experiment_config(bad)


def test_config_hash_is_stable(smoke_config_payload, write_config):
    first = load_experiment_config(write_config(smoke_config_payload, "a.json")).config_hash()
    second = load_experiment_config(write_config(dict(smoke_config_payload), "b.json")).config_hash()
    smoke_config_payload["seed"] = 8
    third = load_experiment_config(write_config(smoke_config_payload, "c.json")).config_hash()
    assert first == second != third


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["cost", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
        assert code == EXIT_CONFIG_ERROR
        assert "config error" in capsys.readouterr().err

    def test_schema_violation(self, tmp_path, smoke_config_payload, write_config):
        smoke_config_payload["model"]["emb_dim"] = 30
        code = main(["cost", "--config", str(write_config(smoke_config_payload)), "--out", str(tmp_path)])
        assert code == EXIT_CONFIG_ERROR

    def test_unknown_field(self, tmp_path, smoke_config_payload, write_config):
        smoke_config_payload["learning_rate"] = 1.0
        assert main(["cost", "--config", str(write_config(smoke_config_payload)), "--out", str(tmp_path)]) == 1

    def test_length_beyond_max_seq(self, tmp_path, smoke_config_payload, write_config):
        smoke_config_payload["niah"]["lengths"] = [256]
        code = main(["niah", "--config", str(write_config(smoke_config_payload)), "--out", str(tmp_path),
                     "--random-init"])
        assert code == EXIT_CONFIG_ERROR

    def test_missing_checkpoint(self, tmp_path, smoke_config_payload, write_config, capsys):
        code = main(["niah", "--config", str(write_config(smoke_config_payload)), "--out", str(tmp_path / "run")])
        assert code == EXIT_RUNTIME_ERROR
        assert "checkpoint not found" in capsys.readouterr().err

    def test_compare_without_runs(self, tmp_path):
        assert main(["compare", "--runs", str(tmp_path / "absent"), "--out", str(tmp_path)]) == EXIT_RUNTIME_ERROR


class TestCost:
    def test_reference_scale_table(self, tmp_path):
        assert main(["cost", "--config", str(CONFIG_DIR / "cost_reference.json"), "--out", str(tmp_path)]) == EXIT_OK
        rows = {row["length"]: row for row in read_json(tmp_path / "cost.json")["rows"]}
        assert rows[131072]["kv_ratio"] == pytest.approx(0.2734375)
        assert rows[131072]["kv_reduction_percent"] == pytest.approx(72.65625)
        assert rows[10000000]["kv_ratio"] == pytest.approx(0.2503, abs=1e-4)
        csv_rows = read_csv_rows(tmp_path / "cost.csv")
        assert [row["length"] for row in csv_rows] == ["8192", "32768", "65536", "131072", "10000000"]
        meta = read_csv_meta(tmp_path / "cost.csv")
        assert meta["config_hash"] == load_experiment_config(CONFIG_DIR / "cost_reference.json").config_hash()
        assert "rnope-lab=" in meta["versions"]

    def test_csv_output_is_byte_stable(self, tmp_path, smoke_config_payload, write_config):
        path = write_config(smoke_config_payload)
        assert main(["cost", "--config", str(path), "--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(["cost", "--config", str(path), "--out", str(tmp_path / "b")]) == EXIT_OK
        assert (tmp_path / "a" / "cost.csv").read_bytes() == (tmp_path / "b" / "cost.csv").read_bytes()

    def test_output_dir_from_environment_settings(self, tmp_path, monkeypatch, smoke_config_payload, write_config):
        monkeypatch.setattr(settings.output, "output_dir", str(tmp_path / "from-env"))
        assert main(["cost", "--config", str(write_config(smoke_config_payload))]) == EXIT_OK
        assert (tmp_path / "from-env" / "cost.csv").is_file()


def test_seed_override_reaches_training(tmp_path, smoke_config_payload, write_config):
    smoke_config_payload["train"]["total_steps"] = 6
    smoke_config_payload["train"]["warmup_steps"] = 1
    out = tmp_path / "run"
    assert main(["train", "--config", str(write_config(smoke_config_payload)), "--out", str(out),
                 "--seed", "99"]) == EXIT_OK
    config = json.loads((out / "config.json").read_text(encoding="utf-8"))
    assert config["seed"] == 99 and config["train"]["seed"] == 99
    assert (out / "checkpoint.bin").is_file()
    rows = read_csv_rows(out / "metrics.csv")
    assert [row["step"] for row in rows] == [str(i) for i in range(1, 7)]
    summary = read_json(out / "train_summary.json")
    assert summary["steps"] == 6
    assert summary["_meta"]["config_hash"] == config["_meta"]["config_hash"]


class TestErrorClassification:
    def test_builtin_errors(self):
        missing = classify_error(FileNotFoundError(2, "No such file", "a.json"), "cli")
        assert missing.error_type is ErrorType.IO_ERROR
        assert missing.message == "file not found: a.json" and not missing.recoverable
        assert classify_error(PermissionError("locked"), "artifacts").recoverable
        internal = classify_error(RuntimeError(), "cli")
        assert internal.error_type is ErrorType.INTERNAL_ERROR and internal.message == "RuntimeError"

    def test_lab_exception_keeps_its_info(self):
        info = classify_error(TrainingDivergedException(3, float("nan")), "cli")
        assert info.error_type is ErrorType.DIVERGENCE_ERROR
        assert info.details["step"] == 3 and info.component == "trainer"

    def test_schema_errors_list_fields(self, smoke_config_payload):
        smoke_config_payload["model"]["emb_dim"] = 30
        with pytest.raises(ValidationError) as excinfo:
            ExperimentConfig.model_validate(smoke_config_payload)
        info = handle_error(excinfo.value, component="cli", context={"command": "cost"})
        assert info.error_type is ErrorType.CONFIG_ERROR
        assert info.details["command"] == "cost" and info.details["fields"]


def test_log_processor_converts_numpy_values():
    event = numpy_values(None, "info", {"loss": np.float32(1.5), "ids": np.arange(3), "big": np.zeros(100)})
    assert event == {"loss": 1.5, "ids": [0, 1, 2], "big": "ndarray(100,)"}

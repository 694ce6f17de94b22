"""实验产物写出：原子写入、CSV/JSON 渲染与配置哈希头"""
import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from src import __version__
from src.utils.error_handling import io_retry
from src.utils.logging import get_structured_logger

logger = get_structured_logger(__name__)

ARTIFACT_FORMAT_VERSION = 1


def artifact_versions() -> Dict[str, str]:
    """产物中记录的模块版本"""
    return {
        "artifact_format": str(ARTIFACT_FORMAT_VERSION),
        "numpy": np.__version__,
        "rnope-lab": __version__,
    }


def versions_text() -> str:
    return ";".join(f"{name}={version}" for name, version in sorted(artifact_versions().items()))


def format_value(value: Any) -> str:
    """CSV 单元格的确定性文本形式"""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".10g")
    if isinstance(value, np.integer):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


@io_retry
def _replace(source: str, target: Path) -> None:
    os.replace(source, target)


def atomic_write_bytes(path: Path, data: bytes) -> Path:
    """写临时文件后重命名，读者永远看不到半写的产物"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        _replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.debug("写出产物", path=str(path), nbytes=len(data))
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def render_csv(
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    config_hash: Optional[str] = None,
) -> str:
    """RFC-4180 引号规则；可选的 ``#`` 注释头记录配置哈希与版本"""
    buffer = io.StringIO()
    if config_hash is not None:
        buffer.write(f"# config_hash={config_hash}\n")
        buffer.write(f"# versions={versions_text()}\n")
    writer = csv.writer(buffer, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(list(columns))
    for row in rows:
        writer.writerow([format_value(value) for value in row])
    return buffer.getvalue()


def write_csv(
    path: Path,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    config_hash: Optional[str] = None,
) -> Path:
    return atomic_write_text(path, render_csv(columns, rows, config_hash))


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return value.as_posix()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def render_json(payload: Dict[str, Any], config_hash: Optional[str] = None) -> str:
    document = dict(payload)
    if config_hash is not None:
        document["_meta"] = {"config_hash": config_hash, "versions": artifact_versions()}
    return json.dumps(document, sort_keys=True, indent=2, ensure_ascii=False, default=_json_default) + "\n"


def write_json(path: Path, payload: Dict[str, Any], config_hash: Optional[str] = None) -> Path:
    return atomic_write_text(path, render_json(payload, config_hash))


def read_csv_rows(path: Path) -> List[Dict[str, str]]:
    """读取 CSV 产物，跳过 ``#`` 注释头"""
    with open(path, newline="", encoding="utf-8") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    return list(csv.DictReader(lines))


def read_csv_meta(path: Path) -> Dict[str, str]:
    meta: Dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
    return meta


def read_json(path: Path) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)

"""命名张量的二进制容器

布局：8 字节魔数，小端 u64 头部长度，UTF-8 JSON 头部（键排序、紧凑分隔符），
随后按头部 ``arrays`` 列表顺序拼接各数组的行主序小端字节。
同一输入总是得到逐字节相同的输出，便于复现性哈希。
"""
import json
import struct
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from src.utils.error_handling import CheckpointException

_LENGTH = struct.Struct("<Q")


def _canonical_dtype(array: NDArray) -> np.dtype:
    return array.dtype.newbyteorder("<")


def encode_container(magic: bytes, header: Dict[str, Any], arrays: Sequence[Tuple[str, NDArray]]) -> bytes:
    """把头部和命名数组编码为字节串"""
    if len(magic) != 8:
        raise ValueError("container magic must be 8 bytes")

    entries: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    for name, array in arrays:
        dtype = _canonical_dtype(np.asarray(array))
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes(order="C")
        entries.append({
            "name": name,
            "dtype": dtype.str,
            "shape": list(np.shape(array)),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)

    full_header = dict(header)
    full_header["arrays"] = entries
    header_bytes = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + _LENGTH.pack(len(header_bytes)) + header_bytes + b"".join(chunks)


def decode_container(blob: bytes, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, NDArray]]:
    """解码容器，返回头部与按名称索引的数组"""
    if blob[:8] != magic:
        raise CheckpointException(
            f"bad container magic {blob[:8]!r}, expected {magic!r}",
            component="container",
        )
    try:
        (header_len,) = _LENGTH.unpack_from(blob, 8)
        start = 8 + _LENGTH.size
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
        payload = memoryview(blob)[start + header_len:]

        arrays: Dict[str, NDArray] = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = entry["nbytes"] // dtype.itemsize
            array = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
            arrays[entry["name"]] = array.reshape(entry["shape"]).astype(dtype.newbyteorder("="), copy=True)
    except (KeyError, ValueError, struct.error) as e:
        raise CheckpointException(f"corrupt container: {e}", component="container") from e
    return header, arrays

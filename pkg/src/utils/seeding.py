"""按名称派生随机数生成器：每次调用一个根种子，各消费者各取一条独立子流"""
import hashlib
from typing import Sequence

import numpy as np


def name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def derive_seed_sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), name_key(name), *[int(e) for e in extra]])


def derive_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    """``derive_rng(seed, "init")``、``derive_rng(seed, "train", step)`` 等"""
    return np.random.default_rng(derive_seed_sequence(seed, name, *extra))


def spawn_seeds(seed: int, name: str, count: int) -> Sequence[int]:
    """为并列的实验单元生成互不相同的整数种子"""
    children = derive_seed_sequence(seed, name).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]

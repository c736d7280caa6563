"""Split one root seed into independent per-consumer seeds."""

from __future__ import annotations

import zlib

import numpy as np

CONSUMERS = ("init", "data", "attack", "eval", "landscape", "mixup")


def derive_seed(root: int, consumer: str, *extra: int) -> int:
    if consumer not in CONSUMERS:
        raise ValueError(f"unknown seed consumer {consumer!r}")
    key = [int(root), zlib.crc32(consumer.encode()), *map(int, extra)]
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint32)[0])

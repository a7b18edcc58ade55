"""Counter-based deterministic random streams.

Each stream is a Philox generator keyed by a hash of ``(seed, *names)``, so the
draws for a given tensor or dropout site never depend on how many other
streams were consumed before it.
"""
from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-blake2b"


def stream_key(seed: int, *names) -> np.ndarray:
    text = "/".join([str(int(seed))] + [str(n) for n in names]).encode()
    digest = hashlib.blake2b(text, digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8").copy()


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *names)))


def xavier_uniform(seed: int, name: str, shape: tuple, dtype=np.float64) -> np.ndarray:
    fan_in, fan_out = shape[-2], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return stream(seed, "init", name).uniform(-bound, bound, size=shape).astype(dtype)


def normal(seed: int, name: str, shape: tuple, std: float, dtype=np.float64) -> np.ndarray:
    return (stream(seed, "init", name).standard_normal(size=shape) * std).astype(dtype)

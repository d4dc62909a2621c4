from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor, default_dtype


def rng_stream(seed: int, *path: str | int) -> np.random.Generator:
    """Counter-based (Philox) generator for a named sub-stream of ``seed``.

    Streams with different paths are independent; the same (seed, path)
    always yields the same sequence.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for part in path:
        digest = hashlib.sha256(str(part).encode("utf-8")).digest()
        key.append(int.from_bytes(digest[:4], "little"))
    ss = np.random.SeedSequence(key)
    return np.random.Generator(np.random.Philox(ss))


def uniform_init(rng: np.random.Generator, shape, bound: float | None = None, dtype=None) -> np.ndarray:
    """U(-bound, bound); bound defaults to 1/sqrt(fan_in) with fan_in = shape[0]."""
    if bound is None:
        bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape).astype(dtype or default_dtype())


class ParamStore:
    """Named trainable tensors, iterated in registration order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        t = value if isinstance(value, Tensor) else Tensor(value, dtype=np.asarray(value).dtype)
        t.requires_grad = True
        t.is_leaf = True
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_values(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self._params.items():
            arr = np.asarray(arrays[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

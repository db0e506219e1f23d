"""Named parameter store and per-forward tape bindings."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import GradMap, Tape, Tensor


class Params:
    """Flat dict of named float arrays; the unit of checkpointing."""

    def __init__(self, arrays=None):
        self._arrays: dict[str, np.ndarray] = {}
        if arrays:
            for name, value in arrays.items():
                self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._arrays:
            raise ContractError(f"duplicate parameter name: {name}")
        arr = np.asarray(value)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self._arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        self._arrays[name] = np.asarray(value, dtype=self._arrays[name].dtype)

    def __contains__(self, name) -> bool:
        return name in self._arrays

    def __len__(self):
        return len(self._arrays)

    def names(self) -> list[str]:
        return sorted(self._arrays)

    def items(self):
        for name in self.names():
            yield name, self._arrays[name]

    def copy(self) -> "Params":
        p = Params()
        for name, arr in self.items():
            p.add(name, arr.copy())
        return p

    def astype(self, dtype) -> "Params":
        p = Params()
        for name, arr in self.items():
            p.add(name, arr.astype(dtype))
        return p

    def num_values(self) -> int:
        return sum(a.size for a in self._arrays.values())


class Binding:
    """Leaf tensors for one tape; each parameter is registered once."""

    def __init__(self, params: Params, tape: Tape, dtype=None):
        self.params = params
        self.tape = tape
        self.dtype = dtype
        self._leaves: dict[str, Tensor] = {}

    def __call__(self, name: str) -> Tensor:
        t = self._leaves.get(name)
        if t is None:
            arr = self.params[name]
            if self.dtype is not None:
                arr = arr.astype(self.dtype)
            t = self.tape.leaf(arr)
            self._leaves[name] = t
        return t

    def used_names(self) -> list[str]:
        return sorted(self._leaves)

    def grads(self, gmap: GradMap) -> dict[str, np.ndarray]:
        """Gradient per parameter name; untouched parameters get zeros."""
        out = {}
        for name, arr in self.params.items():
            leaf = self._leaves.get(name)
            if leaf is None:
                out[name] = np.zeros_like(arr)
            else:
                out[name] = gmap.get(leaf).astype(arr.dtype, copy=False)
        return out


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def normal(rng: np.random.Generator, shape, std=0.02):
    return (rng.standard_normal(shape) * std).astype(np.float32)

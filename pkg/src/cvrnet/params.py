"""Named parameter storage with parallel gradient slots."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np


class ParamStore:
    """Ordered mapping from hierarchical names to arrays.

    Trainable parameters get a gradient slot of the same shape. Buffers
    (batch-norm running statistics) are stored alongside them, are saved in
    checkpoints, but are never handed to the optimizer.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._values: OrderedDict[str, np.ndarray] = OrderedDict()
        self._trainable: dict[str, bool] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=self.dtype)
        self._values[name] = value
        self._trainable[name] = trainable
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        old = self._values[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != old.shape:
            raise ValueError(f"{name}: shape {value.shape} != stored {old.shape}")
        old[...] = value

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._values.items())

    def trainable(self) -> Iterator[tuple[str, np.ndarray]]:
        return ((n, v) for n, v in self._values.items() if self._trainable[n])

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        slot = self.grads.get(name)
        if slot is None:
            self.grads[name] = np.array(grad, dtype=self.dtype)
        else:
            slot += grad

    def zero_grad(self) -> None:
        self.grads.clear()

    def grad(self, name: str) -> np.ndarray:
        """Gradient for ``name``; zeros if nothing was accumulated."""
        g = self.grads.get(name)
        return np.zeros_like(self._values[name]) if g is None else g

    def count(self, prefix: str = "", trainable_only: bool = True) -> int:
        return sum(
            v.size
            for n, v in self._values.items()
            if n.startswith(prefix) and (self._trainable[n] or not trainable_only)
        )

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for n, v in self._values.items():
            out.add(n, v, self._trainable[n])
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

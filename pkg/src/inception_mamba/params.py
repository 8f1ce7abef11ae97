"""Named parameter registry shared by every block."""
from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .tensor_core import NormStats, Tensor, parameter


class ParamStore:
    """Trainable tensors keyed by dotted name, plus batch-norm running statistics.

    A batch-norm layer ``foo.norm`` owns the parameters ``foo.norm.gamma`` and
    ``foo.norm.beta``; its running statistics live in :attr:`norms` under ``foo.norm``.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray], norms: Mapping[str, NormStats] | None = None):
        self.tensors: dict[str, Tensor] = {name: parameter(arr, name) for name, arr in arrays.items()}
        if norms is None:
            norms = {name[: -len(".gamma")]: NormStats.fresh(arr.shape[0])
                     for name, arr in arrays.items() if name.endswith(".gamma")}
        self.norms: dict[str, NormStats] = dict(norms)
        self.training = False

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def norm(self, name: str) -> NormStats:
        return self.norms[name]

    def scoped(self, prefix: str) -> "Scoped":
        return Scoped(self, prefix)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def assign(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Replace parameter values (tensors are immutable, so new leaves are created)."""
        for name, arr in arrays.items():
            if name not in self.tensors:
                raise KeyError(f"no parameter named {name!r}")
            if arr.shape != self.tensors[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != {self.tensors[name].shape}")
            self.tensors[name] = parameter(arr, name)


class Scoped:
    """Prefix view over a :class:`ParamStore`."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self._full(name)]

    def __contains__(self, name: str) -> bool:
        return self._full(name) in self.store

    def get(self, name: str) -> Tensor | None:
        full = self._full(name)
        return self.store[full] if full in self.store else None

    def norm(self, name: str) -> NormStats:
        return self.store.norm(self._full(name))

    def scoped(self, prefix: str) -> "Scoped":
        return Scoped(self.store, self._full(prefix))

    @property
    def training(self) -> bool:
        return self.store.training


def prefixed(prefix: str, arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in arrays.items()}

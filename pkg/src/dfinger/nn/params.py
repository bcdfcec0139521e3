"""Named parameter storage and initialisers."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor


class ParamStore:
    """Ordered mapping ``name -> Tensor`` of trainable parameters."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ConfigError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def n_values(self, prefix: str = "") -> int:
        return sum(self._params[n].size for n in self.names(prefix))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad for n, t in self._params.items() if t.grad is not None}

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, values: dict[str, np.ndarray], strict: bool = True):
        for name, arr in values.items():
            if name not in self._params:
                if strict:
                    raise ConfigError(f"checkpoint parameter {name!r} not in model")
                continue
            t = self._params[name]
            if t.shape != arr.shape:
                raise ConfigError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = np.array(arr, dtype=self.dtype)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(self.seed, dtype)
        for n, t in self._params.items():
            out.add(n, t.data)
        return out

    # -- initialisers -------------------------------------------------------

    def glorot(self, name, fan_in, fan_out, shape=None):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        shape = shape or (fan_in, fan_out)
        return self.add(name, self.rng.uniform(-limit, limit, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def constant(self, name, value):
        return self.add(name, value)

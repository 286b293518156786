"""Named parameter storage and SGD with momentum."""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Map from unique name to parameter Tensor plus a momentum buffer each."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._momentum: dict[str, np.ndarray] = {}
        self._lr_scale: dict[str, float] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t.requires_grad = True
        self._params[name] = t
        self._momentum[name] = np.zeros_like(t.data)
        return t

    def create(self, name: str, shape, std: float, rng: np.random.Generator) -> Tensor:
        """Zero-mean Gaussian parameter; std == 0 gives an all-zero tensor."""
        data = rng.normal(0.0, std, size=shape) if std > 0 else np.zeros(shape)
        return self.add(name, Tensor(data, requires_grad=True))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def momentum(self, name: str) -> np.ndarray:
        return self._momentum[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def set_lr_scale(self, prefix: str, scale: float) -> None:
        """Per-group learning-rate multiplier for all names under a prefix."""
        for name in self._params:
            if name.startswith(prefix):
                self._lr_scale[name] = scale

    def lr_scale(self, name: str) -> float:
        return self._lr_scale.get(name, 1.0)

    def fingerprint(self) -> str:
        """SHA-256 over all parameter bytes in name order; handy for
        asserting that a forward pass leaves parameters untouched."""
        digest = hashlib.sha256()
        for name in sorted(self._params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self._params[name].data).tobytes())
        return digest.hexdigest()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Install parameter (and momentum) arrays by name.

        Raises ValueError naming the first tensor whose shape disagrees.
        """
        for name, t in self._params.items():
            if name not in state:
                raise ValueError(f"checkpoint is missing tensor '{name}'")
            arr = state[name]
            if tuple(arr.shape) != t.data.shape:
                raise ValueError(
                    f"checkpoint tensor '{name}' has shape {tuple(arr.shape)}, "
                    f"expected {t.data.shape}")
            t.data[...] = arr
            mkey = name + ".m"
            if mkey in state:
                self._momentum[name][...] = state[mkey]


def sgd_step(store: ParamStore, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0) -> None:
    """m <- momentum*m + grad (+ wd*param); param <- param - lr*m; zero grads.

    The effective rate is lr times the parameter's group scale (1.0 unless
    set via set_lr_scale).
    """
    for name in store.names():
        p = store[name]
        m = store.momentum(name)
        m *= momentum
        if p._grad is not None:
            m += p._grad
        if weight_decay != 0.0:
            m += weight_decay * p.data
        p.data -= (lr * store.lr_scale(name)) * m
        p.zero_grad()

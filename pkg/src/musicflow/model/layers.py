"""Parameter store and the small layer classes the vector field is built from."""

from __future__ import annotations

import math
from collections.abc import Iterator
from pathlib import Path

import numpy as np

from musicflow.autodiff import ops
from musicflow.autodiff.array import Array
from musicflow.autodiff.checkpoint import load_arrays, save_arrays
from musicflow.utils.errors import NonFiniteError, ShapeError


class Parameters:
    """Named, trainable arrays; creation order is the checkpoint order."""

    def __init__(self, seed: int = 0, dtype: type = np.float32) -> None:
        self._arrays: dict[str, Array] = {}
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def create(self, name: str, shape: tuple[int, ...], std: float | None = None, fill: float | None = None) -> Array:
        if name in self._arrays:
            raise KeyError(f"Parameter '{name}' already exists")
        if fill is not None:
            data = np.full(shape, fill, dtype=self.dtype)
        else:
            scale = std if std is not None else 1.0 / math.sqrt(shape[0])
            data = (self.rng.standard_normal(shape) * scale).astype(self.dtype)
        param = Array(data, requires_grad=True, name=name)
        self._arrays[name] = param
        return param

    def __getitem__(self, name: str) -> Array:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def values(self) -> list[Array]:
        return list(self._arrays.values())

    def items(self) -> list[tuple[str, Array]]:
        return list(self._arrays.items())

    def count(self) -> int:
        return sum(p.data.size for p in self._arrays.values())

    def zero_grad(self) -> None:
        for p in self._arrays.values():
            p.zero_grad()

    def astype(self, dtype: type) -> None:
        self.dtype = dtype
        for p in self._arrays.values():
            p.data = p.data.astype(dtype)

    def check_finite(self) -> None:
        for name, p in self._arrays.items():
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteError(f"Parameter '{name}' has non-finite entries")

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._arrays.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self._arrays) - set(state))
        if missing:
            raise KeyError(f"Checkpoint lacks parameters: {', '.join(missing)}")
        for name, p in self._arrays.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"load '{name}'", p.shape, state[name].shape)
            p.data = state[name].astype(self.dtype)

    def save(self, path: Path, extra: dict[str, np.ndarray] | None = None) -> Path:
        return save_arrays(path, {**self.state(), **(extra or {})})

    def load(self, path: Path) -> dict[str, np.ndarray]:
        """Load matching parameters; returns the entries that are not parameters."""
        arrays = load_arrays(path)
        self.load_state(arrays)
        return {k: v for k, v in arrays.items() if k not in self._arrays}


class Linear:
    def __init__(self, params: Parameters, name: str, d_in: int, d_out: int, bias: bool = True) -> None:
        self.weight = params.create(f"{name}.weight", (d_in, d_out))
        self.bias = params.create(f"{name}.bias", (d_out,), fill=0.0) if bias else None

    def __call__(self, x: Array) -> Array:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class LayerNorm:
    def __init__(self, params: Parameters, name: str, dim: int) -> None:
        self.gamma = params.create(f"{name}.gamma", (dim,), fill=1.0)
        self.beta = params.create(f"{name}.beta", (dim,), fill=0.0)

    def __call__(self, x: Array) -> Array:
        return ops.layer_norm(x, self.gamma, self.beta)


class FeedForward:
    def __init__(self, params: Parameters, name: str, dim: int, hidden: int) -> None:
        self.up = Linear(params, f"{name}.up", dim, hidden)
        self.down = Linear(params, f"{name}.down", hidden, dim)

    def __call__(self, x: Array) -> Array:
        return self.down(ops.gelu(self.up(x)))


class Attention:
    """
    Multi-head attention without projection biases.

    Queries come from `x`; keys and values from `memory` (self-attention when None).
    An optional (H, Tq, Tk) bias is added to the logits before the softmax.
    """

    def __init__(self, params: Parameters, name: str, dim: int, heads: int) -> None:
        if dim % heads:
            raise ValueError(f"model_dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(params, f"{name}.q", dim, dim, bias=False)
        self.k = Linear(params, f"{name}.k", dim, dim, bias=False)
        self.v = Linear(params, f"{name}.v", dim, dim, bias=False)
        self.out = Linear(params, f"{name}.out", dim, dim, bias=False)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Array) -> Array:
        batch, length, _ = x.shape
        return ops.transpose(ops.reshape(x, (batch, length, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Array, memory: Array | None = None, bias: np.ndarray | None = None) -> Array:
        source = x if memory is None else memory
        q, k, v = self._split(self.q(x)), self._split(self.k(source)), self._split(self.v(source))
        logits = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        if bias is not None:
            logits = ops.add(logits, Array(bias.astype(logits.dtype)))
        weights = ops.softmax(logits, axis=-1)
        self.last_weights = weights.data
        context = ops.matmul(weights, v)
        batch, _, length, _ = context.shape
        merged = ops.reshape(ops.transpose(context, (0, 2, 1, 3)), (batch, length, self.heads * self.head_dim))
        return self.out(merged)

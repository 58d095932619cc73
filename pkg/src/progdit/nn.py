"""Parameter containers built on :mod:`progdit.tensor`."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Walks attributes in definition order to collect named parameters."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.named_parameters().items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise T.DimensionError(f"{k}: checkpoint shape {arr.shape} != parameter {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        dt = T.resolve_dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dt)
        return self


def param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, dtype=dtype)


class Linear(Module):
    """``y = x @ W + b`` with Xavier-uniform init unless ``zero=True``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False, dtype="f64"):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            bound = math.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise T.DimensionError(f"Linear expects last extent {self.d_in}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class MLP(Module):
    """Two linear layers with SiLU between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 zero_out: bool = False, dtype="f64"):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype=dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_out, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator, dtype="f64"):
        self.weight = param(rng.standard_normal((vocab, dim)) * 0.02 * math.sqrt(dim), dtype)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.getitem(self.weight, np.asarray(ids, dtype=np.int64))


def randomize_(module: Module, rng: np.random.Generator, scale: float = 0.3) -> Module:
    """Overwrite every parameter with Gaussian noise (gradient checks, sensitivity tests)."""
    for p in module.parameters():
        p.data = (rng.standard_normal(p.shape) * scale).astype(p.dtype)
    return module

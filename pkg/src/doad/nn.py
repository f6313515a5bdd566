"""Parameter containers shared by both branches."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


@dataclass
class Linear:
    w: Tensor  # (in, out)
    b: Tensor | None

    @classmethod
    def create(cls, rng, n_in: int, n_out: int, dtype=np.float64, bias: bool = True) -> "Linear":
        return cls(uniform_init(rng, (n_in, n_out), n_in, dtype), zeros((n_out,), dtype) if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.w, self.b)

    def zero_(self) -> None:
        self.w.data[...] = 0
        if self.b is not None:
            self.b.data[...] = 0


@dataclass
class Conv:
    w: Tensor  # (out, in, *kernel)
    b: Tensor
    stride: tuple[int, ...]
    padding: tuple[int, ...]

    @classmethod
    def create(cls, rng, c_in: int, c_out: int, kernel, stride=1, padding=0, dtype=np.float64) -> "Conv":
        kernel = tuple(kernel)
        n = len(kernel)
        stride = (stride,) * n if isinstance(stride, int) else tuple(stride)
        padding = (padding,) * n if isinstance(padding, int) else tuple(padding)
        fan_in = c_in * int(np.prod(kernel))
        return cls(uniform_init(rng, (c_out, c_in) + kernel, fan_in, dtype), zeros((c_out,), dtype),
                   stride, padding)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv(x, self.w, self.b, self.stride, self.padding)

    def zero_(self) -> None:
        self.w.data[...] = 0
        self.b.data[...] = 0


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses, lists and dicts, yielding every Tensor with a dotted name."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}")
    elif isinstance(obj, dict):
        for k, item in obj.items():
            yield from named_parameters(item, f"{prefix}.{k}")

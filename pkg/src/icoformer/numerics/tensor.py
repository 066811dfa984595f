"""Dense tensors and an explicit reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape`; outside
a tape they just compute values, which is the inference path.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


class Parameter(Tensor):
    """Named learnable tensor. Names are dotted paths, unique per model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Backward) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that
        requires it. Intermediate gradients are kept local to this call.
        """
        if seed is None:
            if loss.data.size != 1:
                raise ValueError("backward() on a non-scalar needs an explicit seed")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        produced = set()
        for out, _, _ in self.records:
            produced.add(id(out))
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    # leaf: flush immediately so fan-out accumulates in place
                    g_leaf = grads.pop(key)
                    inp.grad = g_leaf.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + g_leaf
        if id(loss) in grads and id(loss) not in produced and loss.requires_grad:
            g_leaf = grads.pop(id(loss))
            loss.grad = g_leaf if loss.grad is None else loss.grad + g_leaf


def make_result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Backward) -> Tensor:
    """Wrap an op result and record it when any input needs a gradient."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))

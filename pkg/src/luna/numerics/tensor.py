"""Dense tensor with reverse-mode gradients.

A ``Tensor`` wraps a numpy array. Operations in :mod:`luna.numerics.functional`
record a backward closure on their output; :meth:`Tensor.backward` walks the
graph in reverse topological order and accumulates gradients into the
``grad`` slot of every leaf that requires one.

Allocation accounting: while a :class:`MemoryTracker` is active, every tensor
that owns its buffer is counted (element count, not bytes) from creation until
it is garbage collected. Gradient buffers held during ``backward`` are counted
the same way. Views (transpose, contiguous reshape) are free.
"""
from __future__ import annotations

import contextlib
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
DTYPE_NAMES = {np.dtype(v): k for k, v in DTYPES.items()}

_grad_enabled = True
_trackers: list["MemoryTracker"] = []


@dataclass
class MemoryTracker:
    """Counts live tensor elements; ``peak`` is the high-water mark."""

    live: int = 0
    peak: int = 0
    allocs: int = 0
    largest: int = 0
    record_shapes: bool = False
    shapes: list = field(default_factory=list)

    def alloc(self, n: int, shape=None) -> None:
        self.live += n
        self.allocs += 1
        if n > self.largest:
            self.largest = n
        if self.live > self.peak:
            self.peak = self.live
        if self.record_shapes and shape is not None:
            self.shapes.append(tuple(shape))

    def free(self, n: int) -> None:
        self.live -= n


@contextlib.contextmanager
def track_memory(record_shapes: bool = False) -> Iterator[MemoryTracker]:
    tracker = MemoryTracker(record_shapes=record_shapes)
    _trackers.append(tracker)
    try:
        yield tracker
    finally:
        _trackers.remove(tracker)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _count(obj, arr: np.ndarray) -> None:
    if not _trackers or not arr.flags.owndata:
        return
    n = arr.size
    for tr in _trackers:
        tr.alloc(n, arr.shape)
        weakref.finalize(obj, tr.free, n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable] = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in DTYPE_NAMES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward
        _count(self, arr)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return DTYPE_NAMES[self.data.dtype]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autograd ------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        counted: dict[int, int] = {}
        trackers = list(_trackers)

        def hold(key: int, g: np.ndarray) -> None:
            if trackers and key not in counted:
                counted[key] = g.size
                for tr in trackers:
                    tr.alloc(g.size)

        hold(id(self), grad)
        for node in reversed(order):
            g = grads.pop(id(node), None)
            n_held = counted.pop(id(node), 0)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
            else:
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not (p.requires_grad or p._parents):
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                        hold(key, pg)
            for tr in trackers:
                tr.free(n_held)
            del g

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, key):
        from . import functional as F
        return F.getitem(self, key)

    @property
    def T(self) -> "Tensor":
        from . import functional as F
        return F.swap_last(self)


def as_tensor(x, dtype: Optional[str] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=DTYPES[dtype] if dtype else None)
    return Tensor(arr)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op output, attaching the backward closure only when needed."""
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)

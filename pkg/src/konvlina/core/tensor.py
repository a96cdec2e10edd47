"""Immutable float64 tensors and a reverse-mode differentiation tape.

Every op in :mod:`konvlina.core.ops` funnels through :func:`record`, which
creates the output tensor and, when a tape is active and at least one input
is tracked by it, appends a node holding the op's vector-Jacobian product.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ConfigurationError(ValueError):
    """A layer or module was configured with inconsistent settings."""


class NumericalError(FloatingPointError):
    """A forward pass produced NaN or Inf."""


_next_id = itertools.count(1)


class Tensor:
    """Dense row-major float64 array with a process-unique id.

    The underlying buffer is read-only, so tensors can be shared freely.
    """

    __slots__ = ("_data", "id", "meta")
    __array_priority__ = 100

    def __init__(self, data, *, _own: bool = False):
        if isinstance(data, Tensor):
            data = data._data
        if _own and isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        arr.setflags(write=False)
        self._data = arr
        self.id = next(_next_id)
        self.meta: dict | None = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float(self._data)

    def __repr__(self) -> str:
        kind = type(self).__name__
        return f"{kind}(id={self.id}, shape={self.shape})"

    def __len__(self) -> int:
        return self.shape[0]

    # Arithmetic is delegated to ops so everything lands on the tape.
    def __add__(self, other):
        from konvlina.core import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from konvlina.core import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from konvlina.core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from konvlina.core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from konvlina.core import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from konvlina.core import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from konvlina.core import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from konvlina.core import ops
        return ops.div(other, self)

    def __neg__(self):
        from konvlina.core import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from konvlina.core import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from konvlina.core import ops
        return ops.matmul(other, self)

    @property
    def T(self):
        from konvlina.core import ops
        return ops.swapaxes(self, -1, -2)


class Parameter(Tensor):
    """A trainable tensor whose id survives value updates between passes."""

    __slots__ = ()

    def assign(self, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self.shape:
            raise DimensionError(f"cannot assign shape {arr.shape} to parameter of shape {self.shape}")
        arr.setflags(write=False)
        self._data = arr


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: int
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Append-only record of ops for one forward/backward pass.

    Use as a context manager; ops executed inside the block are recorded when
    any of their inputs is a :class:`Parameter` or a watched/produced tensor.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[int, Tensor] = {}
        self._tracked: set[int] = set()
        self._shapes: dict[int, tuple[int, ...]] = {}
        self._consumed = False

    def watch(self, t: Tensor) -> Tensor:
        """Mark ``t`` trainable for this tape (its gradient is returned)."""
        self.parameters[t.id] = t
        self._tracked.add(t.id)
        self._shapes[t.id] = t.shape
        return t

    def is_tracked(self, t: Tensor) -> bool:
        if t.id in self._tracked:
            return True
        if isinstance(t, Parameter):
            self.watch(t)
            return True
        return False

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.paused = 0
        self.alloc_hooks: list[Callable[[str, tuple[int, ...]], None]] = []


_state = _State()
_faults: dict[str, float] = {}


def active_tape() -> Tape | None:
    if _state.paused or not _state.stack:
        return None
    return _state.stack[-1]


@contextlib.contextmanager
def no_record():
    """Evaluate ops without recording them on any active tape."""
    _state.paused += 1
    try:
        yield
    finally:
        _state.paused -= 1


@contextlib.contextmanager
def track_allocations():
    """Collect (op name, output shape) for every op output created inside."""
    log: list[tuple[str, tuple[int, ...]]] = []
    hook = lambda name, shape: log.append((name, shape))  # noqa: E731
    _state.alloc_hooks.append(hook)
    try:
        yield log
    finally:
        _state.alloc_hooks.remove(hook)


@contextlib.contextmanager
def inject_fault(op: str, scale: float = 1.5):
    """Test hook: scale every gradient produced by ``op``'s backward rule."""
    _faults[op] = scale
    try:
        yield
    finally:
        _faults.pop(op, None)


def record(op: str, out: np.ndarray, inputs: Iterable[Tensor], vjp) -> Tensor:
    """Wrap ``out`` as a tensor and put it on the active tape if needed.

    ``vjp(g)`` must return one gradient (or None) per input, each shaped like
    that input.
    """
    t = Tensor(out, _own=True)
    for hook in _state.alloc_hooks:
        hook(op, t.shape)
    tape = active_tape()
    if tape is None:
        return t
    inputs = tuple(inputs)
    tracked = [tape.is_tracked(x) for x in inputs]
    if not any(tracked):
        return t
    if op in _faults:
        scale = _faults[op]
        inner = vjp
        vjp = lambda g: [None if r is None else r * scale for r in inner(g)]  # noqa: E731
    parents = tuple(x.id if tr else 0 for x, tr in zip(inputs, tracked))
    tape.nodes.append(Node(t.id, parents, vjp, op))
    tape._tracked.add(t.id)
    return t


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a gradient for every trainable tensor seen by the tape, keyed by
    tensor id. Parameters that did not influence the loss get zeros.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if tape._consumed:
        raise RuntimeError("tape already consumed by a previous backward()")
    tape._consumed = True
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    params = tape.parameters
    for node in reversed(tape.nodes):
        g = grads.get(node.out)
        if g is None:
            continue
        if node.out not in params:
            del grads[node.out]
        parent_grads = node.vjp(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pid == 0 or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    tape.nodes.clear()
    return {pid: grads.get(pid, np.zeros(p.shape)) for pid, p in params.items()}


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite values in {where} (shape {t.shape})")
    return t

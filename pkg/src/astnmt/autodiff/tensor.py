"""Tensor and tape for reverse-mode differentiation.

A :class:`Tape` is a flat, ordered log of primitive applications. Primitives
record onto the innermost active tape only when at least one of their inputs
requires a gradient; with no tape active everything runs as plain numpy, which
is what decoding and evaluation use.
"""

from __future__ import annotations

import contextvars
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __slots__ = ("__weakref__", "data", "grad", "name", "requires_grad")
    # make `ndarray <op> Tensor` dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(
                f"item() needs a single-element tensor, got shape {self.shape}"
            )
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the primitives live in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.slice_(self, index)

    @property
    def T(self) -> Tensor:
        from . import ops

        return ops.transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; every primitive evaluated inside the block whose
    inputs need gradients is appended to :attr:`nodes`.
    """

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) to every leaf tensor that requires a gradient.

        Leaf gradients are *assigned* (not accumulated), so running backward
        twice on the same tape gives the same result. Returns a map from
        ``id(leaf)`` to its gradient.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss

        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi

        out = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = np.array(g, dtype=DTYPE).reshape(leaf.shape)
            out[key] = leaf.grad
        return out


def active_tape() -> Tape | None:
    return _active_tape.get()


def record(
    op: str,
    inputs: tuple[Tensor, ...],
    value: np.ndarray,
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
) -> Tensor:
    """Wrap ``value`` in a Tensor and log it on the active tape if needed."""
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.record(Node(op, inputs, out, backward))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    tape = tape if tape is not None else _active_tape.get()
    if tape is None:
        raise RuntimeError("backward called with no tape")
    return tape.backward(loss)

"""Reverse-mode differentiation tape.

Primitives in :mod:`mtair.tensor` call :func:`record` with a VJP closure
whenever a tape is active on the current thread.  Nodes are appended in
execution order, so walking the list in reverse is a reverse topological
traversal of the computation graph.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import MtairError

_state = threading.local()


def _tape_stack() -> list["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(out, inputs: Sequence, vjp: Callable, op: str) -> None:
    """Append one executed primitive to the active tape, if any.

    ``vjp(grad_out)`` must return one gradient array (or None) per input,
    in order.
    """
    tape = active_tape()
    if tape is not None:
        tape._nodes.append(_Node(out, tuple(inputs), vjp, op))


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out, inputs, vjp, op):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class Tape:
    """Ordered record of primitive executions for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the scalar loss.  Tapes are thread-local and must
    not be shared across threads.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def nodes(self) -> tuple:
        """Recorded primitives in execution order."""
        return tuple(self._nodes)

    def backward(self, loss, seed: float = 1.0) -> "Gradients":
        """Accumulate gradients of ``loss`` w.r.t. every recorded tensor.

        Returns a :class:`Gradients` view; named tensors (parameters) are
        additionally indexed by name.  Deterministic: the accumulation
        order is fixed by the recording order.
        """
        if loss.data.ndim != 0:
            raise MtairError("backward requires a scalar loss")
        acc: dict[int, np.ndarray] = {
            id(loss): np.asarray(seed, dtype=loss.data.dtype)
        }
        by_name: dict[str, np.ndarray] = {}
        for node in reversed(self._nodes):
            g = acc.pop(id(node.out), None)
            if g is None:
                continue  # not on a path to the loss
            gins = node.vjp(g)
            if len(gins) != len(node.inputs):
                raise MtairError(f"vjp arity mismatch in op {node.op!r}")
            for inp, gi in zip(node.inputs, gins):
                if gi is None:
                    continue
                if gi.shape != inp.data.shape:
                    raise MtairError(
                        f"vjp shape mismatch in op {node.op!r}: "
                        f"{gi.shape} vs {inp.data.shape}"
                    )
                key = id(inp)
                if key in acc:
                    acc[key] = acc[key] + gi
                else:
                    acc[key] = gi
                if inp.name is not None:
                    by_name[inp.name] = acc[key]
        return Gradients(acc, by_name)


class Gradients:
    """Result of a backward sweep: gradients by tensor identity and name."""

    def __init__(self, by_id: dict[int, np.ndarray], by_name: dict[str, np.ndarray]):
        self._by_id = by_id
        self.by_name = by_name

    def wrt(self, tensor) -> np.ndarray | None:
        return self._by_id.get(id(tensor))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self.by_name

    def names(self):
        return self.by_name.keys()


# ReLU kink tracing: finite-difference probes compare the activation sign
# pattern at +h and -h to spot parameters whose perturbation crosses a kink.

def relu_trace_active() -> "list[np.ndarray] | None":
    return getattr(_state, "relu_trace", None)


class trace_relu_masks:
    """Collect the boolean input-sign masks of every ReLU evaluated inside."""

    def __enter__(self) -> list:
        self._prev = getattr(_state, "relu_trace", None)
        _state.relu_trace = []
        return _state.relu_trace

    def __exit__(self, *exc):
        _state.relu_trace = self._prev

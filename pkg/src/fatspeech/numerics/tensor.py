"""Dense tensors with taped reverse-mode differentiation.

A Tensor wraps a numpy array plus an optional gradient buffer. Ops (see
fatspeech.numerics.ops) compute forward results eagerly with numpy and, when a
tape is active and some input requires a gradient, record a backward rule onto
the tape. Records are appended in execution order, so replaying them in reverse
is a valid topological backward pass and visits every op exactly once; no
recursion, no graph search.

The tape is a context manager:

    with Tape() as tape:
        loss = some_composition(params)
    tape.backward(loss)

Gradients accumulate into `Tensor.grad` (allocated lazily, same dtype as the
data). Leaves are tensors created with requires_grad=True; intermediate results
inherit the flag from their inputs.
"""

import numpy as np

from ..errors import ShapeError

_TAPE_STACK = []


def active_tape():
    """The innermost open tape, or None when recording is off."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item", self.data.shape, detail="expected a scalar")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ShapeError("accumulate_grad", g.shape, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class OpRecord:
    """One taped op: a name for diagnostics, operand references, a backward rule.

    `backward` takes no arguments; it reads `output.grad` and accumulates into
    the inputs' grads.
    """

    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of ops for one differentiable computation."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, name, inputs, output, backward):
        self.records.append(OpRecord(name, inputs, output, backward))

    def backward(self, root):
        """Replay recorded ops in reverse, seeding d(root)/d(root) = 1.

        `root` must be a scalar tensor produced under this tape.
        """
        if root.data.size != 1:
            raise ShapeError("backward", root.data.shape, detail="root must be scalar")
        root.grad = np.ones_like(root.data)
        for rec in reversed(self.records):
            if rec.output.grad is None:
                continue
            rec.backward()

    def __len__(self):
        return len(self.records)


def record_op(name, inputs, output, backward):
    """Register a backward rule for a custom op if recording applies.

    Returns `output` so call sites can stay single-expression. Recording
    happens only when a tape is open and some input requires a gradient; the
    output's requires_grad is set accordingly either way.
    """
    needs = any(t.requires_grad for t in inputs)
    output.requires_grad = needs
    tape = active_tape()
    if tape is not None and needs:
        tape.record(name, inputs, output, backward)
    return output

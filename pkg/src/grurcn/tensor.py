"""Dense 64-bit tensors and reverse-mode automatic differentiation on an explicit tape.

Every value flowing through the engine is a :class:`Tensor` wrapping a
``float64`` numpy array.  Operations are free functions (``add``, ``sigmoid``,
``affine``, ...) that compute eagerly and, while a :class:`Tape` is active,
append one entry per primitive so that :func:`backward` can traverse the
recording in exact reverse order.  Tensors are immutable once produced; only
leaf parameters are updated between optimization steps.

Shape conventions are channels-first and row-major.  Binary elementwise ops
require identical shapes; the only broadcasting in the engine is the
bias-over-space/batch handled inside ``affine`` and the convolution ops.
"""

from __future__ import annotations

import numpy as np
from contextlib import contextmanager
from scipy.special import expit


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested operation."""


class NumericalError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by '{op}'")


class Tensor:
    """Immutable dense array of float64 values with an explicit shape."""

    __slots__ = ("data", "requires_grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check:
            _ensure_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tracked = self.requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Small arithmetic conveniences; all dispatch to the taped primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor marked for gradient computation."""
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), _check=False)


class TapeEntry:
    """One recorded primitive: value slots plus forward/backward rules."""

    __slots__ = ("op", "inputs", "outputs", "forward", "backward")

    def __init__(self, op, inputs, outputs, forward, backward):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.forward = forward
        self.backward = backward


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered recording of primitive operations for one forward pass.

    A tape is confined to one logical thread of execution.  Use as a context
    manager around the forward computation, then call :func:`backward` on it.
    """

    def __init__(self):
        self._entries: list[TapeEntry] = []

    @property
    def entries(self) -> list[TapeEntry]:
        return self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def replay(self) -> int:
        """Re-run every recorded forward rule and verify bit-exact outputs.

        Returns the number of entries replayed; raises NumericalError on the
        first mismatch.
        """
        for entry in self._entries:
            fresh = entry.forward()
            for new, out in zip(fresh, entry.outputs):
                if not np.array_equal(new, out.data):
                    raise NumericalError(f"replay mismatch in '{entry.op}'")
        return len(self._entries)


_BACKWARD_FAULT: tuple[str, float] | None = None


@contextmanager
def inject_backward_fault(op: str, factor: float = 3.0):
    """Deliberately corrupt the backward rule of one op (negative-control hook).

    While active, every input gradient produced by entries named ``op`` is
    multiplied by ``factor``, which a finite-difference check must detect.
    """
    global _BACKWARD_FAULT
    prev = _BACKWARD_FAULT
    _BACKWARD_FAULT = (op, float(factor))
    try:
        yield
    finally:
        _BACKWARD_FAULT = prev


def _emit(op: str, inputs: tuple, forward, backward_builder) -> tuple:
    """Run a primitive and record it on the active tape when gradients may flow.

    ``forward`` returns a tuple of output arrays and must be replayable;
    ``backward_builder(outputs)`` returns a function mapping output gradients
    to per-input gradients (None for inputs that need none).
    """
    outs_data = forward()
    for arr in outs_data:
        _ensure_finite(arr, op)
    outputs = tuple(Tensor(arr, _check=False) for arr in outs_data)
    tracked = any(t._tracked for t in inputs)
    if tracked:
        for out in outputs:
            out._tracked = True
        tape = _ACTIVE_TAPE
        if tape is not None:
            tape._entries.append(
                TapeEntry(op, inputs, outputs, forward, backward_builder(outputs)))
    return outputs


def backward(tape: Tape, loss: Tensor, params=None) -> dict:
    """Reverse-mode gradients of a scalar with respect to marked parameters.

    Traverses the tape in exact reverse recording order.  Returns a dict
    keyed by Tensor (identity).  When ``params`` is given, every listed
    parameter gets an entry, with a zero tensor if it was never used.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    marked: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        out_grads = []
        missing = True
        for out in entry.outputs:
            g = grads.get(id(out))
            if g is not None:
                missing = False
            out_grads.append(g)
        if missing:
            continue
        out_grads = tuple(
            g if g is not None else np.zeros_like(o.data)
            for g, o in zip(out_grads, entry.outputs))
        in_grads = entry.backward(out_grads)
        if _BACKWARD_FAULT is not None and entry.op == _BACKWARD_FAULT[0]:
            factor = _BACKWARD_FAULT[1]
            in_grads = tuple(None if g is None else g * factor for g in in_grads)
        for t, g in zip(entry.inputs, in_grads):
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient from '{entry.op}'")
            if t.requires_grad:
                marked[id(t)] = t
            acc = grads.get(id(t))
            grads[id(t)] = g if acc is None else acc + g
    if params is not None:
        marked = {id(p): p for p in params}
    result = {}
    for tid, t in marked.items():
        g = grads.get(tid)
        result[t] = g if g is not None else np.zeros_like(t.data)
    return result


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def _binary_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ "
                         "(no implicit broadcasting)")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check(a, b, "add")
    return _emit("add", (a, b),
                 lambda: (a.data + b.data,),
                 lambda outs: lambda gs: (gs[0], gs[0]))[0]


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check(a, b, "hadamard")
    return _emit("hadamard", (a, b),
                 lambda: (a.data * b.data,),
                 lambda outs: lambda gs: (gs[0] * b.data, gs[0] * a.data))[0]


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    return _emit("sigmoid", (x,),
                 lambda: (expit(x.data),),
                 lambda outs: lambda gs: (gs[0] * outs[0].data * (1.0 - outs[0].data),))[0]


def tanh(x) -> Tensor:
    x = as_tensor(x)
    return _emit("tanh", (x,),
                 lambda: (np.tanh(x.data),),
                 lambda outs: lambda gs: (gs[0] * (1.0 - outs[0].data ** 2),))[0]


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _emit("relu", (x,),
                 lambda: (np.maximum(x.data, 0.0),),
                 lambda outs: lambda gs: (gs[0] * (x.data > 0.0),))[0]


def scale(x, alpha: float) -> Tensor:
    x = as_tensor(x)
    alpha = float(alpha)
    return _emit("scale", (x,),
                 lambda: (x.data * alpha,),
                 lambda outs: lambda gs: (gs[0] * alpha,))[0]


def one_minus(x) -> Tensor:
    x = as_tensor(x)
    return _emit("one_minus", (x,),
                 lambda: (1.0 - x.data,),
                 lambda outs: lambda gs: (-gs[0],))[0]


_ELEMENTWISE = {"add": add, "hadamard": hadamard, "sigmoid": sigmoid,
                "tanh": tanh, "scale": scale, "one_minus": one_minus}


def elementwise(op: str, *operands, alpha: float | None = None) -> Tensor:
    """Dispatch by name to the pointwise ops: add, hadamard, sigmoid, tanh, scale, one_minus."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op '{op}'")
    if op == "scale":
        return scale(operands[0], alpha if alpha is not None else operands[1])
    return _ELEMENTWISE[op](*operands)


# ---------------------------------------------------------------------------
# Linear algebra, reductions, shape ops
# ---------------------------------------------------------------------------

def affine(x, weight, bias=None) -> Tensor:
    """weight @ x + bias for a vector, or row-wise for a (batch, D_in) input."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"affine: weight must be 2-D, got {weight.shape}")
    d_out, d_in = weight.shape
    if x.ndim not in (1, 2) or x.shape[-1] != d_in:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (d_out,):
            raise ShapeError(f"affine: bias {bias.shape} must be ({d_out},)")

    batched = x.ndim == 2

    def forward():
        y = x.data @ weight.data.T if batched else weight.data @ x.data
        if bias is not None:
            y = y + bias.data
        return (y,)

    def backward_builder(outs):
        def bwd(gs):
            g = gs[0]
            if batched:
                gx = g @ weight.data
                gw = g.T @ x.data
                gb = g.sum(axis=0) if bias is not None else None
            else:
                gx = weight.data.T @ g
                gw = np.outer(g, x.data)
                gb = g if bias is not None else None
            if bias is not None:
                return (gx, gw, gb)
            return (gx, gw)
        return bwd

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("affine", inputs, forward, backward_builder)[0]


def softmax(x) -> Tensor:
    """Stable softmax along the last axis; rows sum to one."""
    x = as_tensor(x)
    if x.ndim not in (1, 2):
        raise ShapeError(f"softmax: expected 1-D or 2-D input, got {x.shape}")

    def forward():
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return (e / e.sum(axis=-1, keepdims=True),)

    def backward_builder(outs):
        p = outs[0].data

        def bwd(gs):
            g = gs[0]
            dot = (g * p).sum(axis=-1, keepdims=True)
            return (p * (g - dot),)
        return bwd

    return _emit("softmax", (x,), forward, backward_builder)[0]


def sum_all(x) -> Tensor:
    """Sum of all entries, as a rank-0 tensor."""
    x = as_tensor(x)
    return _emit("sum_all", (x,),
                 lambda: (np.asarray(x.data.sum()),),
                 lambda outs: lambda gs: (np.full_like(x.data, float(gs[0])),))[0]


def concat_channels(a, b) -> Tensor:
    """Concatenate two maps along the channel axis (axis ndim-3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim < 3:
        raise ShapeError(f"concat_channels: need equal-rank maps, got {a.shape}, {b.shape}")
    axis = a.ndim - 3
    if a.shape[:axis] != b.shape[:axis] or a.shape[axis + 1:] != b.shape[axis + 1:]:
        raise ShapeError(f"concat_channels: non-channel dims differ: {a.shape}, {b.shape}")
    n_a = a.shape[axis]

    def backward_builder(outs):
        def bwd(gs):
            g = gs[0]
            sl_a = [slice(None)] * g.ndim
            sl_b = [slice(None)] * g.ndim
            sl_a[axis] = slice(0, n_a)
            sl_b[axis] = slice(n_a, None)
            return (g[tuple(sl_a)], g[tuple(sl_b)])
        return bwd

    return _emit("concat_channels", (a, b),
                 lambda: (np.concatenate([a.data, b.data], axis=axis),),
                 backward_builder)[0]


def split_sequence(x, n_steps: int, batch: int | None = None) -> list:
    """Split a stacked per-step tensor into a list of per-step tensors.

    With ``batch=None`` the input is (T, ...) and step t is ``x[t]``.  With a
    batch size N the input rows are ordered clip-major, (N*T, ...), and step t
    is the (N, ...) slice of every clip's t-th row.
    """
    x = as_tensor(x)
    if batch is None:
        if x.shape[0] != n_steps:
            raise ShapeError(f"split_sequence: leading dim {x.shape[0]} != {n_steps}")

        def forward():
            return tuple(np.ascontiguousarray(x.data[t]) for t in range(n_steps))

        def backward_builder(outs):
            def bwd(gs):
                return (np.stack(gs, axis=0),)
            return bwd
    else:
        if x.shape[0] != batch * n_steps:
            raise ShapeError(
                f"split_sequence: leading dim {x.shape[0]} != {batch}*{n_steps}")

        def forward():
            view = x.data.reshape((batch, n_steps) + x.shape[1:])
            return tuple(np.ascontiguousarray(view[:, t]) for t in range(n_steps))

        def backward_builder(outs):
            def bwd(gs):
                g = np.stack(gs, axis=1)
                return (g.reshape((batch * n_steps,) + x.shape[1:]),)
            return bwd

    return list(_emit("split_sequence", (x,), forward, backward_builder))

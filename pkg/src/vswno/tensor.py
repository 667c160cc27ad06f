"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records operations in execution order; :func:`backward` walks
the record in reverse, accumulating gradients into the ``grad`` buffers of
``requires_grad`` leaves.  Everything computes in 64-bit floats.  Broadcasting
in the elementwise ops is restricted to rank-0 operands; any other shape
mismatch raises, which keeps every backward rule auditable.  Use
:func:`expand_leading` to splice an unbatched parameter into a batched graph.

The engine is single-threaded per tape; independent tapes may live on
separate threads (the active tape is thread-local).
"""

from __future__ import annotations

import math
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "add",
    "sub",
    "mul",
    "linear",
    "pointwise_conv",
    "gelu",
    "spike_threshold",
    "reduce",
    "reduce_sum",
    "reduce_mean",
    "sqrt",
    "reshape",
    "moveaxis",
    "expand_leading",
    "apply_matrix",
    "coeff_mix",
    "detach",
    "backward",
    "custom_op",
]

_GELU_C = math.sqrt(2.0 / math.pi)

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered operation record for one forward pass.

    Each node stores its operation tag, routed inputs, output shape and a
    backward callback closing over whatever values the rule needs.  Nodes are
    appended in execution order, so the list is already topologically sorted.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = {}  # id(tensor) -> leaf Tensor

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


class _NoGrad:
    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = None
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


def no_grad():
    """Context manager suspending tape recording (evaluation passes)."""
    return _NoGrad()


class Tensor:
    """Dense float64 array with optional gradient buffer and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None  # ("leaf", tape) or ("op", tape, node); set lazily

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are lifted to rank-0 tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("tag", "input_ids", "shape", "backward_fn", "out_grad")

    def __init__(self, tag, input_ids, shape, backward_fn):
        self.tag = tag
        self.input_ids = input_ids
        self.shape = shape
        self.backward_fn = backward_fn
        self.out_grad = None


def custom_op(tag, inputs, out_data, backward_fn):
    """Record one operation on the active tape and return its output tensor.

    ``backward_fn(out_grad) -> tuple of per-input gradients (or None)``.
    Exposed so higher layers (wavelet steps, kernel contractions) can define
    their own differentiable primitives without touching the engine.
    """
    out = Tensor(out_data)
    tape = _active_tape()
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    if tape is None or not needs:
        return out
    routed = []
    for t in inputs:
        if not isinstance(t, Tensor) or not t.requires_grad:
            routed.append(None)
            continue
        info = t.node
        if info is not None and info[0] == "op" and info[1] is tape:
            routed.append(("op", info[2]))
            continue
        # leaf on this tape (tensors from other tapes re-enter as leaves)
        if info is None or info[1] is not tape:
            t.node = ("leaf", tape)
            tape.leaves[id(t)] = t
        routed.append(("leaf", t))
    node = _Node(tag, routed, out.data.shape, backward_fn)
    tape.nodes.append(node)
    out.requires_grad = True
    out.node = ("op", tape, node)
    return out


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape.

    Leaves unreachable from ``loss`` receive zeros.  Gradients add into any
    existing ``grad`` buffer; node contributions along multiple paths are
    summed, never overwritten.
    """
    if not tape.nodes:
        raise ValueError("backward on empty tape")
    if loss.data.shape != ():
        raise ValueError(f"backward requires a rank-0 loss, got shape {loss.data.shape}")
    if loss.node is None or loss.node[0] != "op" or loss.node[1] is not tape:
        raise ValueError("loss tensor does not belong to the given tape")

    for node in tape.nodes:
        node.out_grad = None
    loss.node[2].out_grad = np.ones((), dtype=np.float64)

    for idx in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[idx]
        if node.out_grad is None:
            continue
        grads = node.backward_fn(node.out_grad)
        for target, g in zip(node.input_ids, grads):
            if target is None or g is None:
                continue
            kind, obj = target
            if kind == "leaf":
                if obj.grad is None:
                    obj.grad = np.zeros_like(obj.data)
                obj.grad += g
            else:
                if obj.out_grad is None:
                    obj.out_grad = np.zeros(obj.shape, dtype=np.float64)
                obj.out_grad += g
        node.out_grad = None

    for leaf in tape.leaves.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# elementwise ops


def _binary_shapes(a, b, op):
    if a.data.shape == b.data.shape:
        return
    if a.data.shape == () or b.data.shape == ():
        return
    raise ValueError(
        f"{op}: shape mismatch {a.data.shape} vs {b.data.shape} "
        "(only rank-0 broadcast is supported)"
    )


def _reduce_to(g, shape):
    # collapse a broadcasted gradient back to a rank-0 operand
    if shape == ():
        return np.asarray(g.sum(), dtype=np.float64)
    return g


def add(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return custom_op("add", (a, b), a.data + b.data, bw)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return custom_op("sub", (a, b), a.data - b.data, bw)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return custom_op("mul", (a, b), ad * bd, bw)


def elementwise_binary(a, b, op):
    """Dispatch form of the elementwise ops: op in {'add', 'sub', 'mul'}."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra ops


def linear(x, weight, bias):
    """out[i, j] = sum_k x[i, k] * weight[k, j] + bias[j]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"linear expects 2-d x and weight, got {x.data.shape}, {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ValueError(f"linear: inner dims disagree ({x.data.shape} vs {weight.data.shape})")
    if bias.data.shape != (weight.data.shape[1],):
        raise ValueError(f"linear: bias shape {bias.data.shape} != ({weight.data.shape[1]},)")
    xd, wd = x.data, weight.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return custom_op("linear", (x, weight, bias), xd @ wd + bias.data, bw)


def pointwise_conv(x, weight):
    """Channel mixing at every grid point: out[..., o] = sum_c x[..., c] * W[c, o].

    Equivalent to ``linear`` over the flattened grid with zero bias; the
    kernel touches a single grid point (size-one stencil).
    """
    if weight.data.ndim != 2:
        raise ValueError(f"pointwise_conv weight must be 2-d, got {weight.data.shape}")
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ValueError(
            f"pointwise_conv: {x.data.shape[-1]} input channels vs weight {weight.data.shape}"
        )
    xd, wd = x.data, weight.data

    def bw(g):
        gx = g @ wd.T
        gw = np.tensordot(xd, g, axes=(range(xd.ndim - 1), range(g.ndim - 1)))
        return gx, gw

    return custom_op("pointwise_conv", (x, weight), xd @ wd, bw)


def apply_matrix(x, matrix):
    """Contract the last axis with a constant matrix: out = x @ matrix.T.

    ``matrix`` is a plain ndarray (never trained); the backward rule is the
    transpose contraction.  Used for the wavelet filter-bank steps.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if x.data.shape[-1] != m.shape[1]:
        raise ValueError(f"apply_matrix: last axis {x.data.shape[-1]} vs matrix {m.shape}")

    def bw(g):
        return (g @ m,)

    return custom_op("apply_matrix", (x,), x.data @ m.T, bw)


def coeff_mix(x, kernel):
    """Per-position channel contraction: out[..., o, k] = sum_c x[..., c, k] * R[c, o, k]."""
    if kernel.data.ndim != 3:
        raise ValueError(f"coeff_mix kernel must be 3-d, got {kernel.data.shape}")
    c_in, _, extent = kernel.data.shape
    if x.data.ndim < 2 or x.data.shape[-2] != c_in or x.data.shape[-1] != extent:
        raise ValueError(f"coeff_mix: x {x.data.shape} incompatible with kernel {kernel.data.shape}")
    xd, kd = x.data, kernel.data
    c_out = kd.shape[1]

    def bw(g):
        gx = np.einsum("...ok,cok->...ck", g, kd)
        xb = xd.reshape(-1, c_in, extent)
        gb = g.reshape(-1, c_out, extent)
        gk = np.einsum("bck,bok->cok", xb, gb)
        return gx, gk

    return custom_op("coeff_mix", (x, kernel), np.einsum("...ck,cok->...ok", xd, kd), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def gelu(x):
    """tanh-form GeLU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).

    The closed-form derivative of the same expression drives the backward
    rule, so gradients and values always refer to one formula.
    """
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)

    def bw(g):
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * sech2 * dinner),)

    return custom_op("gelu", (x,), 0.5 * xd * (1.0 + t), bw)


def spike_threshold(m_minus_t, slope=25.0):
    """Heaviside firing decision with a fast-sigmoid surrogate derivative.

    Forward emits 1.0 where the argument is >= 0 (threshold inclusive), else
    0.0.  Backward multiplies by d/dx [x / (1 + slope*|x|)] = 1/(1+slope*|x|)^2,
    which is 1 exactly at the origin and decays smoothly either side.
    """
    if slope <= 0:
        raise ValueError(f"spike_threshold slope must be positive, got {slope}")
    xd = m_minus_t.data

    def bw(g):
        return (g / (1.0 + slope * np.abs(xd)) ** 2,)

    return custom_op("spike_threshold", (m_minus_t,), (xd >= 0.0).astype(np.float64), bw)


def sqrt(x):
    xd = x.data
    out = np.sqrt(xd)

    def bw(g):
        return (g * 0.5 / out,)

    return custom_op("sqrt", (x,), out, bw)


# ---------------------------------------------------------------------------
# shape and reduction ops


def reduce(x, op, axis=None):
    """Sum or mean over one axis (or everything when axis is None)."""
    if op not in ("sum", "mean"):
        raise ValueError(f"reduce: unknown op {op!r}")
    xd = x.data
    if axis is not None:
        if not -xd.ndim <= axis < xd.ndim:
            raise ValueError(f"reduce: axis {axis} invalid for shape {xd.shape}")
        axis = axis % xd.ndim
        extent = xd.shape[axis]
    else:
        extent = xd.size
    scale = 1.0 / extent if op == "mean" else 1.0
    out = xd.sum(axis=axis) * scale if op == "mean" else xd.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(np.asarray(g * scale), xd.shape).copy(),)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp * scale, xd.shape).copy(),)

    return custom_op(f"reduce_{op}", (x,), out, bw)


def reduce_sum(x, axis=None):
    return reduce(x, "sum", axis)


def reduce_mean(x, axis=None):
    return reduce(x, "mean", axis)


def reshape(x, shape):
    xd = x.data
    old = xd.shape

    def bw(g):
        return (g.reshape(old),)

    return custom_op("reshape", (x,), xd.reshape(shape), bw)


def moveaxis(x, source, destination):
    # the output shares memory with x (a view); fine, tensors are never
    # written in place
    def bw(g):
        return (np.moveaxis(g, destination, source),)

    return custom_op("moveaxis", (x,), np.moveaxis(x.data, source, destination), bw)


def expand_leading(x, n):
    """Tile x along a new leading axis of extent n; backward sums that axis.

    This is the one sanctioned broadcast beyond rank-0: it lets per-element
    parameters (leakage, thresholds) enter a batched computation explicitly.
    """
    if n < 1:
        raise ValueError(f"expand_leading: n must be >= 1, got {n}")
    xd = x.data

    def bw(g):
        return (g.sum(axis=0),)

    out = np.broadcast_to(xd, (n,) + xd.shape).copy()
    return custom_op("expand_leading", (x,), out, bw)


def detach(x):
    """Constant copy of x: same values, no gradient path (stop-gradient)."""
    return Tensor(x.data.copy())

"""Minimal dense-tensor library with reverse-mode differentiation.

Just enough machinery to train the toy codec/classifier stacks and to
differentiate attack losses w.r.t. input images: float32 numpy storage,
a tape of primitive-op nodes per graph, and a finite-difference oracle
for testing. No broadcasting beyond tensor-scalar ops, no views: every
op materializes a new row-major array.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Node",
    "ComputationRecord",
    "build_record",
    "backward",
    "matmul",
    "conv2d",
    "conv2d_transpose",
    "leaky_relu",
    "softmax_cross_entropy",
    "tsum",
    "tmean",
    "tabs",
    "clamp",
    "reshape",
    "round_ste",
    "finite_diff_grad",
]


class Node:
    """One primitive-op entry of a computation record.

    ``backward_fn`` maps the output gradient to a tuple of gradients
    aligned with ``inputs`` (``None`` for untracked inputs).
    """

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op}, inputs={len(self.inputs)})"


class ComputationRecord:
    """Topologically ordered list of nodes reachable from one output."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


class Tensor:
    """Dense n-dimensional array of reals, optionally gradient-tracked.

    float32 by default; the finite-difference oracle may run the same
    graph at float64. ``grad`` is allocated (zeros) whenever
    ``requires_grad`` is set and accumulates additively across backward
    passes until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def detached(self) -> "Tensor":
        """Copy of the values with no graph history and no tracking."""
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # -- operator sugar (all defined on module-level ops below) --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_const(value, like: Tensor):
    """Cast a python scalar to the tensor's dtype."""
    return like.data.dtype.type(value)


def _make_op(op: str, inputs: Sequence, out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap an op result: track a node iff any tensor input is tracked."""
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data)
    tracked = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out.requires_grad = tracked
    out.grad = np.zeros_like(out.data) if tracked else None
    out._node = None
    if tracked:
        tensor_inputs = tuple(t for t in inputs if isinstance(t, Tensor))
        out._node = Node(op, tensor_inputs, out, backward_fn)
    return out


def build_record(root: Tensor) -> ComputationRecord:
    """Collect the nodes reachable from ``root`` in topological order
    (every node's inputs precede it). Iterative DFS, deterministic."""
    nodes: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            nodes.append(node)
        else:
            stack.append((t, True))
            for inp in reversed(node.inputs):
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append((inp, False))
    return ComputationRecord(nodes)


def backward(loss: Tensor) -> None:
    """Reverse-mode gradient of a scalar loss.

    Accumulates into ``.grad`` of every tracked tensor in the graph;
    leaf gradients add up across repeated calls (callers zero them
    explicitly), intermediate gradients are reset per pass.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    record = build_record(loss)
    for node in record:
        node.output.grad[...] = 0
    if loss._node is None:
        # loss is itself a tracked leaf: d loss / d loss = 1
        loss.grad += np.ones_like(loss.data)
        return
    loss.grad[...] = 1
    for node in reversed(record.nodes):
        grads = node.backward_fn(node.output.grad)
        for inp, g in zip(node.inputs, grads):
            if g is not None and inp.requires_grad:
                inp.grad += g.astype(inp.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives
# ---------------------------------------------------------------------------


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("add", a, b)
        out = _make_op("add", (a, b), a.data + b.data,
                       lambda g: (g, g))
    else:
        out = _make_op("add", (a,), a.data + _as_const(b, a),
                       lambda g: (g,))
    return out


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("sub", a, b)
        out = _make_op("sub", (a, b), a.data - b.data,
                       lambda g: (g, -g))
    else:
        out = _make_op("sub", (a,), a.data - _as_const(b, a),
                       lambda g: (g,))
    return out


def neg(a: Tensor) -> Tensor:
    return _make_op("neg", (a,), -a.data, lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("mul", a, b)
        a_data, b_data = a.data, b.data
        out = _make_op("mul", (a, b), a_data * b_data,
                       lambda g: (g * b_data, g * a_data))
    else:
        c = _as_const(b, a)
        out = _make_op("mul", (a,), a.data * c, lambda g: (g * c,))
    return out


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    # forward: slope * x on the negative side; backward uses slope at x == 0
    s = _as_const(slope, x)
    factor = np.where(x.data > 0, x.data.dtype.type(1), s)
    return _make_op("leaky_relu", (x,), np.where(x.data >= 0, x.data, s * x.data),
                    lambda g: (g * factor,))


def tabs(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return _make_op("abs", (x,), np.abs(x.data), lambda g: (g * sgn,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where x is inside (inclusive)."""
    lo_c, hi_c = _as_const(lo, x), _as_const(hi, x)
    mask = ((x.data >= lo_c) & (x.data <= hi_c)).astype(x.data.dtype)
    return _make_op("clamp", (x,), np.clip(x.data, lo_c, hi_c),
                    lambda g: (g * mask,))


def round_ste(x: Tensor) -> Tensor:
    """Round half away from zero; straight-through identity backward."""
    rounded = np.trunc(x.data + np.copysign(x.data.dtype.type(0.5), x.data))
    return _make_op("round_ste", (x,), rounded, lambda g: (g,))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old_shape = x.data.shape
    return _make_op("reshape", (x,), x.data.reshape(shape),
                    lambda g: (g.reshape(old_shape),))


def tsum(x: Tensor) -> Tensor:
    shape = x.data.shape
    return _make_op("sum", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype),
                    lambda g: (np.full(shape, g.reshape(()), dtype=x.data.dtype),))


def tmean(x: Tensor) -> Tensor:
    shape = x.data.shape
    n = x.data.dtype.type(x.data.size)
    return _make_op("mean", (x,), np.asarray(x.data.mean(), dtype=x.data.dtype),
                    lambda g: (np.full(shape, g.reshape(()) / n, dtype=x.data.dtype),))


# ---------------------------------------------------------------------------
# linear algebra / convolution
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data
    return _make_op("matmul", (a, b), a_data @ b_data,
                    lambda g: (g @ b_data.T, a_data.T @ g))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Patches of a (C,H,W) array as a (C*kh*kw, oh*ow) matrix."""
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, oh, ow, kh, kw)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols: np.ndarray, canvas_shape, kh, kw, stride, pad, grid_h, grid_w):
    """Adjoint of _im2col: scatter-add patch columns back onto a canvas."""
    c, h, w = canvas_shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    patches = cols.reshape(c, kh, kw, grid_h, grid_w)
    for i in range(kh):
        for j in range(kw):
            padded[:, i:i + grid_h * stride:stride,
                   j:j + grid_w * stride:stride] += patches[:, i, j]
    if pad:
        return np.ascontiguousarray(padded[:, pad:pad + h, pad:pad + w])
    return padded


def _check_conv_geometry(op, h, w, kh, kw, stride, pad):
    if stride < 1:
        raise ShapeError(f"{op}: stride must be positive, got {stride}")
    if pad < 0:
        raise ShapeError(f"{op}: pad must be non-negative, got {pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(
            f"{op}: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a (C_in,H,W) image with (C_out,C_in,kh,kw) filters.

    Input gradient is the transposed convolution of the output gradient;
    kernel gradient correlates saved input patches with the output gradient.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (Co,Ci,kh,kw), got {x.shape}, {kernel.shape}")
    ci, h, w = x.data.shape
    co, ci_k, kh, kw = kernel.data.shape
    if ci != ci_k:
        raise ShapeError(f"conv2d: input channels {ci} != kernel channels {ci_k}")
    _check_conv_geometry("conv2d", h, w, kh, kw, stride, pad)

    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    w_mat = kernel.data.reshape(co, ci * kh * kw)
    out = (w_mat @ cols).reshape(co, oh, ow)
    x_shape, k_shape = x.data.shape, kernel.data.shape

    def bwd(g):
        g_mat = g.reshape(co, oh * ow)
        dx = _col2im(w_mat.T @ g_mat, x_shape, kh, kw, stride, pad, oh, ow)
        dk = (g_mat @ cols.T).reshape(k_shape)
        return dx, dk

    return _make_op("conv2d", (x, kernel), out, bwd)


def conv2d_transpose(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Adjoint of conv2d with the same stride/pad.

    Kernel layout is (C_in, C_out, kh, kw), i.e. the same array conv2d
    uses to map C_out -> C_in maps C_in -> C_out here. Output spatial
    size is (H-1)*stride - 2*pad + kh + output_padding; output_padding
    (0 <= op < stride) disambiguates sizes that stride-s convolution
    collapses onto the same grid.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d_transpose expects (C,H,W) and (Ci,Co,kh,kw), got {x.shape}, {kernel.shape}")
    ci, h, w = x.data.shape
    ci_k, co, kh, kw = kernel.data.shape
    if ci != ci_k:
        raise ShapeError(f"conv2d_transpose: input channels {ci} != kernel channels {ci_k}")
    if not 0 <= output_padding < max(stride, 1):
        raise ShapeError(f"conv2d_transpose: output_padding {output_padding} must be in [0, stride)")
    oh = (h - 1) * stride - 2 * pad + kh + output_padding
    ow = (w - 1) * stride - 2 * pad + kw + output_padding
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d_transpose: non-positive output extent {oh}x{ow}")
    _check_conv_geometry("conv2d_transpose", oh, ow, kh, kw, stride, pad)

    w_mat = kernel.data.reshape(ci, co * kh * kw)
    cols = w_mat.T @ x.data.reshape(ci, h * w)
    out = _col2im(cols, (co, oh, ow), kh, kw, stride, pad, h, w)
    x_data, k_shape = x.data, kernel.data.shape

    def bwd(g):
        g_cols, goh, gow = _im2col(g, kh, kw, stride, pad)  # (co*kh*kw, h*w)
        dx = (w_mat @ g_cols).reshape(ci, goh, gow)
        dk = (x_data.reshape(ci, h * w) @ g_cols.T).reshape(k_shape)
        return dx, dk

    return _make_op("conv2d_transpose", (x, kernel), out, bwd)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] with max-subtraction stabilization."""
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy expects 1-D logits, got {logits.shape}")
    c = logits.data.shape[0]
    if not 0 <= label < c:
        raise IndexError(f"label {label} out of range for {c} classes")
    z = logits.data - logits.data.max()
    exp = np.exp(z)
    probs = exp / exp.sum()
    loss = np.log(exp.sum()) - z[label]
    onehot = np.zeros(c, dtype=logits.data.dtype)
    onehot[label] = 1
    return _make_op("softmax_cross_entropy", (logits,),
                    np.asarray(loss, dtype=logits.data.dtype),
                    lambda g: (g.reshape(()) * (probs - onehot),))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> Tensor:
    """Central-difference gradient of a scalar function, coordinate by
    coordinate: (fn(x + h e_i) - fn(x - h e_i)) / 2h. Test oracle only;
    O(2 * size) evaluations of fn."""
    probe = Tensor(x.data.copy(), dtype=x.data.dtype)
    flat = probe.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(probe).item()
        flat[i] = orig - step
        f_minus = fn(probe).item()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return Tensor(grad.reshape(x.data.shape), dtype=x.data.dtype)

"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors record the operations that produced them; calling ``backward`` on a
scalar root walks the graph in reverse topological order and accumulates
gradients into every tensor that requires them. Only the operations needed
by the extraction networks are implemented, and broadcasting is restricted
to scalar-with-tensor so every gradient rule stays easy to audit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``grad`` is a same-shape numpy array, populated by ``backward`` and
    accumulated across calls until ``zero_grad`` resets it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are folded in as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


def _make_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    # scalar-with-tensor is the single permitted broadcast
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if shape == ():
        return np.asarray(grad.sum())
    return grad


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _lift_pair(a, b):
    # plain numbers adopt the partner's dtype so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return _lift(a), _lift(b)


def add(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _check_same_shape(a, b, "sub")
    out = a.data - b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _make_op(out, (a, b), vjp)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Elementwise combination of two same-shape tensors, op in {add, mul}."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _make_op(out, (a, b), vjp)


def sigmoid(x: Tensor) -> Tensor:
    x = _lift(x)
    xd = x.data
    # split over sign so exp never overflows
    out = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                   np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    out = out.astype(xd.dtype, copy=False)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make_op(out, (x,), vjp)


def tanh_op(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make_op(out, (x,), vjp)


# when set (a list), relu records min |input| per call so callers can verify
# an evaluation point is differentiable with margin (finite differences are
# meaningless across the kink)
_relu_watch: Optional[list] = None


def relu(x: Tensor) -> Tensor:
    x = _lift(x)
    if _relu_watch is not None and x.data.size:
        _relu_watch.append(float(np.min(np.abs(x.data))))
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _make_op(out, (x,), vjp)


@contextlib.contextmanager
def watch_relu_margins():
    """Collect min |relu input| per call inside the block."""
    global _relu_watch
    prev = _relu_watch
    _relu_watch = margins = []
    try:
        yield margins
    finally:
        _relu_watch = prev


def exp(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _make_op(out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    x = _lift(x)
    xd = x.data
    out = np.log(xd)

    def vjp(g):
        return (g / xd,)

    return _make_op(out, (x,), vjp)


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for a fixed float exponent.

    For p < 1 the derivative at x == 0 is taken as 0 (the forward value is
    defined there but the true derivative diverges).
    """
    x = _lift(x)
    p = float(p)
    xd = x.data
    out = xd ** p

    def vjp(g):
        deriv = p * xd ** (p - 1.0)
        if p < 1.0:
            deriv = np.where(xd == 0.0, 0.0, deriv)
        return (g * deriv,)

    return _make_op(out, (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    return power(x, 0.5)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.shape

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, tuple(a % len(in_shape) for a in axes))
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make_op(out, (x,), vjp)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, *shape) -> Tensor:
    x = _lift(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = x.data.reshape(shape)
    in_shape = x.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return _make_op(out, (x,), vjp)


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast size-1 axes of x up to ``shape`` (explicit, sum-backward)."""
    x = _lift(x)
    shape = tuple(shape)
    if len(shape) != x.data.ndim:
        raise ShapeError(f"expand: rank of {x.shape} != target {shape}")
    for have, want in zip(x.shape, shape):
        if have != want and have != 1:
            raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    out = np.broadcast_to(x.data, shape).copy()
    axes = tuple(i for i, (have, want) in enumerate(zip(x.shape, shape)) if have != want)

    def vjp(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make_op(out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(slicer)])
        return tuple(pieces)

    return _make_op(out, tensors, vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    x = _lift(x)
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for {x.shape} axis {axis}")
    slicer = [slice(None)] * x.data.ndim
    slicer[axis] = slice(start, start + length)
    slicer = tuple(slicer)
    out = x.data[slicer].copy()
    in_shape = x.shape

    def vjp(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[slicer] = g
        return (full,)

    return _make_op(out, (x,), vjp)


def conv2d(inp: Tensor, kernel: Tensor, dilation=(1, 1)) -> Tensor:
    """2-D cross-correlation with dilation and "same" zero padding.

    inp: (C_in, H, W); kernel: (C_out, C_in, kh, kw). Output (C_out, H, W).
    """
    inp, kernel = _lift(inp), _lift(kernel)
    if inp.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) input and (O,C,kh,kw) kernel, "
                         f"got {inp.shape} and {kernel.shape}")
    c_in, h, w = inp.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: kernel expects {kc} input channels, input has {c_in}")
    dh, dw = dilation
    eff_h = (kh - 1) * dh + 1
    eff_w = (kw - 1) * dw + 1
    ph0, pw0 = (eff_h - 1) // 2, (eff_w - 1) // 2
    ph1, pw1 = eff_h - 1 - ph0, eff_w - 1 - pw0

    padded = np.pad(inp.data, ((0, 0), (ph0, ph1), (pw0, pw1)))
    # dilated im2col view (no copy), flattened into one GEMM
    sc, sh, sw = padded.strides
    windows = np.lib.stride_tricks.as_strided(
        padded, shape=(c_in, kh, kw, h, w),
        strides=(sc, sh * dh, sw * dw, sh, sw), writeable=False)
    cols = windows.reshape(c_in * kh * kw, h * w)
    kmat = kernel.data.reshape(c_out, c_in * kh * kw)
    out = (kmat @ cols).reshape(c_out, h, w)

    def vjp(g):
        gmat = g.reshape(c_out, h * w)
        g_kernel = (gmat @ cols.T).reshape(kernel.shape)
        # input gradient is the same correlation with a flipped kernel,
        # transposed channels, and the zero padding mirrored
        g_pad = np.pad(g, ((0, 0), (ph1, ph0), (pw1, pw0)))
        gs_c, gs_h, gs_w = g_pad.strides
        g_windows = np.lib.stride_tricks.as_strided(
            g_pad, shape=(c_out, kh, kw, h, w),
            strides=(gs_c, gs_h * dh, gs_w * dw, gs_h, gs_w), writeable=False)
        k_flip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        g_inp = (k_flip.reshape(c_in, c_out * kh * kw)
                 @ g_windows.reshape(c_out * kh * kw, h * w)).reshape(c_in, h, w)
        return g_inp, g_kernel

    return _make_op(out, (inp, kernel), vjp)


def irfft_columns(re: Tensor, im: Tensor, n: int) -> Tensor:
    """Column-wise inverse real FFT of a one-sided spectrum (re + i*im).

    re, im: (n//2 + 1, L) real tensors. Returns (n, L). The imaginary parts
    of the DC and Nyquist bins do not influence the output (their gradient
    is zero), matching the conjugate-symmetric completion.
    """
    re, im = _lift(re), _lift(im)
    if n % 2 != 0:
        raise ShapeError("irfft_columns requires an even transform size")
    if re.shape != im.shape:
        raise ShapeError(f"irfft_columns: re {re.shape} vs im {im.shape}")
    k = n // 2 + 1
    if re.shape[0] != k:
        raise ShapeError(f"irfft_columns: expected {k} bins for n={n}, got {re.shape[0]}")
    spec = re.data + 1j * im.data
    # numpy ignores the imaginary part of the DC/Nyquist bins only after
    # hermitian completion; zero them so forward and vjp agree exactly
    spec[0] = spec[0].real
    spec[-1] = spec[-1].real
    out = np.fft.irfft(spec, n=n, axis=0)
    out = out.astype(re.dtype, copy=False)

    def vjp(g):
        r = np.fft.rfft(g, axis=0)
        scale = np.full((k, 1), 2.0 / n)
        scale[0] = 1.0 / n
        scale[-1] = 1.0 / n
        g_re = (scale * r.real).astype(g.dtype, copy=False)
        g_im = (scale * r.imag).astype(g.dtype, copy=False)
        g_im[0] = 0.0
        g_im[-1] = 0.0
        return g_re, g_im

    return _make_op(out, (re, im), vjp)


def overlap_add(frames: Tensor, hop: int) -> Tensor:
    """Overlap-add columns of (frame_len, L) at stride ``hop``."""
    frames = _lift(frames)
    if frames.data.ndim != 2:
        raise ShapeError(f"overlap_add expects (frame_len, L), got {frames.shape}")
    frame_len, n_frames = frames.shape
    out_len = frame_len + (n_frames - 1) * hop
    out = np.zeros(out_len, dtype=frames.dtype)
    fd = frames.data
    for l in range(n_frames):
        out[l * hop:l * hop + frame_len] += fd[:, l]

    def vjp(g):
        g_frames = np.empty_like(fd)
        for l in range(n_frames):
            g_frames[:, l] = g[l * hop:l * hop + frame_len]
        return (g_frames,)

    return _make_op(out, (frames,), vjp)


class ComputeGraph:
    """Topologically ordered record of the operations below a root tensor."""

    def __init__(self, nodes: list):
        self.nodes = nodes  # parents come before children

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)


# test hook: called with (tensor, grad) before grads are stored; may return
# a replacement gradient. Used by the gradcheck negative control.
_grad_tap: Optional[Callable] = None


def backward(root: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from root.

    Repeated calls accumulate. A root with no tracked inputs is a no-op.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    graph = ComputeGraph.from_root(root)
    flow = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if _grad_tap is not None:
            replaced = _grad_tap(node, g)
            if replaced is not None:
                g = replaced
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flow:
                    flow[key] = flow[key] + pg
                else:
                    flow[key] = pg


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a deterministic scalar function of the (in-place perturbed)
    ``params``. Relative error per entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    zero_grads(params)
    out = f()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = f().item()
            flat[i] = orig - eps
            with no_grad():
                lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(ana_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
    return worst

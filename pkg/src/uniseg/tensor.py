"""Dense NCHW tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (float64 by default, float32 supported).
Every differentiable operation records its parent nodes and a backward
closure on its output; ``backward()`` on a scalar walks the recorded
graph in reverse topological order, accumulating gradients into each
``requires_grad`` leaf. The tape belongs to a single forward pass and is
released as backward consumes it. Gradients of leaves accumulate across
passes until ``zero_grad()``.

All randomness (dropout) is drawn from an explicitly passed
``numpy.random.Generator``, so identical seeds give bitwise-identical
results at a fixed BLAS thread count.
"""

from __future__ import annotations

import itertools
import numbers

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    """A dense real-valued array plus an optional gradient buffer.

    ``grad`` is lazily allocated: ``None`` means "all zeros so far".
    ``node_id`` identifies the node within the computation graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"tensor of shape {self.data.shape} is not a scalar")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # Arithmetic sugar for the loss formulas; heavy ops are module functions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(neg(self), float(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out: Tensor, parents, backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede consumers; root is last


def backward(loss: Tensor):
    """Populate dLoss/dLeaf for every requires_grad leaf reachable from ``loss``.

    ``loss`` must be scalar. Leaf gradients accumulate across calls; the
    recorded tape is freed as it is consumed, so a graph supports one
    backward pass.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        fn = node._backward
        if fn is not None and node.grad is not None:
            fn(node.grad)
        if fn is not None:  # interior node: tape and grad no longer needed
            node.grad = None
        node._parents = ()
        node._backward = None


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b):
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        out = Tensor(a.data + b.data)

        def bwd(g):
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, g)

        return _record(out, (a, b), bwd)

    if not isinstance(b, numbers.Real):
        raise TypeError(f"add: unsupported operand {type(b).__name__}")
    out = Tensor(a.data + float(b))

    def bwd_const(g):
        if a.requires_grad:
            _accumulate(a, g)

    return _record(out, (a,), bwd_const)


def neg(a: Tensor):
    out = Tensor(-a.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _record(out, (a,), bwd)


def scale(a: Tensor, c: float):
    out = Tensor(a.data * c)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * c)

    return _record(out, (a,), bwd)


def elementwise_mul(a: Tensor, b: Tensor):
    """Hadamard product. ``b`` may have a single channel (axis 1) that is
    broadcast across the channels of ``a``; the broadcast axis gradient is
    summed back."""
    broadcast = False
    if a.data.shape != b.data.shape:
        ok = (
            a.data.ndim == b.data.ndim
            and a.data.ndim >= 2
            and b.data.shape[1] == 1
            and a.data.shape[0] == b.data.shape[0]
            and a.data.shape[2:] == b.data.shape[2:]
        )
        if not ok:
            raise ValueError(
                f"elementwise_mul: incompatible shapes {a.data.shape} vs {b.data.shape}"
            )
        broadcast = True
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * b_data)
        if b.requires_grad:
            gb = g * a_data
            if broadcast:
                gb = gb.sum(axis=1, keepdims=True)
            _accumulate(b, gb)

    return _record(out, (a, b), bwd)


def div(a: Tensor, b: Tensor):
    _check_same_shape(a, b, "div")
    out = Tensor(a.data / b.data)
    a_data, b_data = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g / b_data)
        if b.requires_grad:
            _accumulate(b, -g * a_data / (b_data * b_data))

    return _record(out, (a, b), bwd)


def power(a: Tensor, exponent):
    """Elementwise ``a ** exponent`` for a constant scalar or array exponent."""
    e = np.asarray(exponent, dtype=a.data.dtype)
    if e.shape not in ((), a.data.shape):
        raise ValueError(f"power: exponent shape {e.shape} incompatible with {a.data.shape}")
    out = Tensor(a.data**e)
    a_data = a.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * e * a_data ** (e - 1.0))

    return _record(out, (a,), bwd)


def sum_(a: Tensor, axis=None):
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    out = Tensor(a.data.sum(axis=axis))
    shape = a.data.shape

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                _accumulate(a, np.broadcast_to(g, shape).astype(g.dtype, copy=False))
            else:
                gk = np.expand_dims(g, axis)
                _accumulate(a, np.broadcast_to(gk, shape).astype(g.dtype, copy=False))

    return _record(out, (a,), bwd)


def mean(a: Tensor, axis=None):
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for d in ax:
            n *= a.data.shape[d]
    return scale(sum_(a, axis=axis), 1.0 / n)


def relu(a: Tensor):
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0  # subgradient at 0 is 0

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _record(out, (a,), bwd)


def sigmoid(a: Tensor):
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(s)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * s * (1.0 - s))

    return _record(out, (a,), bwd)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator):
    """Inverted dropout: zero with probability ``p``, scale survivors by
    1/(1-p). Identity at inference; the mask comes from ``rng``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    factor = keep * (1.0 / (1.0 - p))
    out = Tensor(x.data * factor)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * factor)

    return _record(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor):
    """Concatenate along the channel axis; gradient splits back to sources."""
    sa, sb = a.data.shape, b.data.shape
    if len(sa) != 4 or len(sb) != 4:
        raise ValueError(f"concat_channels expects NCHW tensors, got {sa} and {sb}")
    if sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ValueError(f"concat_channels: batch/spatial mismatch {sa} vs {sb}")
    ca = sa[1]
    out = Tensor(np.concatenate((a.data, b.data), axis=1))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g[:, :ca])
        if b.requires_grad:
            _accumulate(b, g[:, ca:])

    return _record(out, (a, b), bwd)


def _conv_out_dim(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv2d: output dim not integral for size={size}, kernel={k}, "
            f"stride={stride}, padding={padding}"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0):
    """2-D cross-correlation with per-output-channel bias.

    ``x`` is (N, Cin, H, W), ``weight`` (Cout, Cin, kh, kw). Computed one
    kernel tap at a time so no im2col buffer is materialized; each tap is
    a single BLAS contraction over Cin.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-D input and weight, got {x.data.shape} and {weight.data.shape}"
        )
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(
            f"conv2d: input has {cin} channels but weight {weight.data.shape} expects {cin_w}"
        )
    if kh < 1 or kw < 1 or padding < 0 or stride < 1:
        raise ValueError(f"conv2d: bad kernel/stride/padding ({kh},{kw},{stride},{padding})")
    if bias is not None and bias.data.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    ho = _conv_out_dim(h, kh, stride, padding)
    wo = _conv_out_dim(w, kw, stride, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    acc = np.zeros((n, ho, wo, cout), dtype=x.data.dtype)
    for dy in range(kh):
        for dx in range(kw):
            xs = xp[:, :, dy : dy + stride * ho : stride, dx : dx + stride * wo : stride]
            acc += np.tensordot(xs, weight.data[:, :, dy, dx], axes=([1], [1]))
    if bias is not None:
        acc += bias.data
    out = Tensor(np.ascontiguousarray(acc.transpose(0, 3, 1, 2)))

    w_data = weight.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gt = g.transpose(0, 2, 3, 1)  # (N, Ho, Wo, Cout)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        need_dx = x.requires_grad
        dxp = np.zeros_like(xp) if need_dx else None
        dw = np.zeros_like(w_data) if weight.requires_grad else None
        for dy in range(kh):
            for dx in range(kw):
                xs = xp[:, :, dy : dy + stride * ho : stride, dx : dx + stride * wo : stride]
                if dw is not None:
                    dw[:, :, dy, dx] = np.tensordot(gt, xs, axes=([0, 1, 2], [0, 2, 3]))
                if need_dx:
                    ds = np.tensordot(gt, w_data[:, :, dy, dx], axes=([3], [0]))
                    dxp[:, :, dy : dy + stride * ho : stride, dx : dx + stride * wo : stride] += (
                        ds.transpose(0, 3, 1, 2)
                    )
        if dw is not None:
            _accumulate(weight, dw)
        if need_dx:
            if padding:
                _accumulate(x, dxp[:, :, padding : padding + h, padding : padding + w])
            else:
                _accumulate(x, dxp)

    return _record(out, parents, bwd)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2):
    """Stride-2 transposed convolution with a 2x2 kernel: the exact adjoint
    of a stride-2 2x2 convolution, doubling both spatial dims.

    ``weight`` is (Cin, Cout, 2, 2). The stride-2/2x2 taps never overlap,
    so each tap fills its own output phase with one contraction.
    """
    if stride != 2:
        raise ValueError(f"conv_transpose2d supports stride 2 only, got {stride}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(
            f"conv_transpose2d expects 4-D input and weight, got {x.data.shape} and {weight.data.shape}"
        )
    n, cin, h, w = x.data.shape
    cin_w, cout, kh, kw = weight.data.shape
    if (kh, kw) != (2, 2):
        raise ValueError(f"conv_transpose2d supports 2x2 kernels only, got {(kh, kw)}")
    if cin != cin_w:
        raise ValueError(
            f"conv_transpose2d: input has {cin} channels but weight {weight.data.shape} expects {cin_w}"
        )
    if bias is not None and bias.data.shape != (cout,):
        raise ValueError(f"conv_transpose2d: bias shape {bias.data.shape} != ({cout},)")

    res = np.empty((n, cout, 2 * h, 2 * w), dtype=x.data.dtype)
    for dy in range(2):
        for dx in range(2):
            tap = np.tensordot(x.data, weight.data[:, :, dy, dx], axes=([1], [0]))
            res[:, :, dy::2, dx::2] = tap.transpose(0, 3, 1, 2)
    if bias is not None:
        res += bias.data[None, :, None, None]
    out = Tensor(res)

    x_data, w_data = x.data, weight.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        dx_acc = np.zeros_like(x_data) if x.requires_grad else None
        dw = np.zeros_like(w_data) if weight.requires_grad else None
        for dy in range(2):
            for dx in range(2):
                gt = g[:, :, dy::2, dx::2].transpose(0, 2, 3, 1)  # (N, H, W, Cout)
                if dw is not None:
                    dw[:, :, dy, dx] = np.tensordot(x_data, gt, axes=([0, 2, 3], [0, 1, 2]))
                if dx_acc is not None:
                    ds = np.tensordot(gt, w_data[:, :, dy, dx], axes=([3], [1]))
                    dx_acc += ds.transpose(0, 3, 1, 2)
        if dw is not None:
            _accumulate(weight, dw)
        if dx_acc is not None:
            _accumulate(x, dx_acc)

    return _record(out, parents, bwd)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2):
    """2x2 stride-2 max pooling. Backward routes each window's gradient to
    its argmax, first element in scan order on ties."""
    if window != 2 or stride != 2:
        raise ValueError(f"maxpool2d supports window=stride=2 only, got {window}/{stride}")
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d expects NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    )
    idx = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

    def bwd(g):
        if not x.requires_grad:
            return
        dwin = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, dx)

    return _record(out, (x,), bwd)

"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every backward rule is written in terms of the same differentiable ops used
in the forward pass, so a gradient computed with ``create_graph=True`` is an
ordinary graph-connected tensor that can be differentiated again (double
backpropagation).
"""

import contextlib
import itertools
import threading
import weakref

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class NotScalar(ValueError):
    pass


class Unreachable(ValueError):
    pass


class GradDisabled(ValueError):
    pass


_state = threading.local()
_node_ids = itertools.count()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode):
    prev = is_grad_enabled()
    _state.enabled = bool(mode)
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Node:
    """Graph record: the op that produced a tensor and the tensors it read.

    ``seq`` increases monotonically with creation, so sorting nodes by it
    gives a topological order of the graph.
    """

    __slots__ = ("op", "parents", "seq")

    def __init__(self, op, parents):
        self.op = op
        self.parents = parents
        self.seq = next(_node_ids)


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6, threshold=20)}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        if exponent != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """A differentiable primitive.

    ``forward`` maps numpy arrays to a numpy array. ``backward`` receives the
    upstream gradient as a Tensor plus a mask of which inputs need a gradient,
    and must return Tensors built from differentiable ops (or None).
    """

    keeps_output = False

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, g, needs):
        raise NotImplementedError

    def output(self):
        return self._out()

    def __call__(self, *inputs):
        inputs = tuple(as_tensor(t) for t in inputs)
        self.inputs = inputs
        with np.errstate(all="ignore"):
            data = self.forward(*(t.data for t in inputs))
        if not np.all(np.isfinite(data)):
            raise NonFiniteValue(f"{type(self).__name__} produced a non-finite value")
        out = Tensor(data)
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = Node(self, inputs)
            if self.keeps_output:
                self._out = weakref.ref(out)
        return out


def _unbroadcast_shape(g, shape):
    return g if g.shape == shape else sum_to(g, shape)


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g, needs):
        a, b = self.inputs
        return (_unbroadcast_shape(g, a.shape) if needs[0] else None,
                _unbroadcast_shape(g, b.shape) if needs[1] else None)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g, needs):
        a, b = self.inputs
        return (_unbroadcast_shape(g, a.shape) if needs[0] else None,
                _unbroadcast_shape(neg(g), b.shape) if needs[1] else None)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g, needs):
        a, b = self.inputs
        return (_unbroadcast_shape(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast_shape(mul(g, a), b.shape) if needs[1] else None)


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g, needs):
        a, b = self.inputs
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast_shape(div(g, b), a.shape)
        if needs[1]:
            gb = _unbroadcast_shape(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g, needs):
        return (neg(g),)


class SumTo(Function):
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcasting)."""

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        lead = a.ndim - len(self.shape)
        out = a.sum(axis=tuple(range(lead))) if lead else a
        axes = tuple(i for i, n in enumerate(self.shape) if n == 1 and out.shape[i] != 1)
        if axes:
            out = out.sum(axis=axes, keepdims=True)
        return out.reshape(self.shape)

    def backward(self, g, needs):
        return (broadcast_to(g, self.inputs[0].shape),)


class BroadcastTo(Function):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        return np.broadcast_to(a, self.shape).copy()

    def backward(self, g, needs):
        return (sum_to(g, self.inputs[0].shape),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, g, needs):
        a, b = self.inputs
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)


class Transpose(Function):
    def __init__(self, axes):
        self.axes = axes

    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, g, needs):
        if self.axes is None:
            return (transpose(g),)
        return (transpose(g, tuple(np.argsort(self.axes))),)


class Reshape(Function):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        try:
            return a.reshape(self.shape)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from None

    def backward(self, g, needs):
        return (reshape(g, self.inputs[0].shape),)


class Sum(Function):
    def __init__(self, axis, keepdims):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g, needs):
        shape = self.inputs[0].shape
        if not self.keepdims and self.axis is not None:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            kept = list(g.shape)
            for ax in sorted(a % len(shape) for a in axes):
                kept.insert(ax, 1)
            g = reshape(g, kept)
        return (broadcast_to(g, shape),)


class Exp(Function):
    keeps_output = True

    def forward(self, a):
        return np.exp(a)

    def backward(self, g, needs):
        return (mul(g, self.output()),)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g, needs):
        return (div(g, self.inputs[0]),)


class Sqrt(Function):
    keeps_output = True

    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g, needs):
        return (div(mul(g, 0.5), self.output()),)


class Relu(Function):
    # Subgradient 0 at 0; the mask is a constant so the second derivative is 0.
    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g, needs):
        return (mul(g, Tensor(self.inputs[0].data > 0)),)


class Sigmoid(Function):
    keeps_output = True

    def forward(self, a):
        return _sigmoid(a)

    def backward(self, g, needs):
        s = self.output()
        return (mul(g, mul(s, sub(1.0, s))),)


class Softplus(Function):
    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, g, needs):
        return (mul(g, sigmoid(self.inputs[0])),)


class LogSoftmax(Function):
    keeps_output = True

    def __init__(self, axis):
        self.axis = axis

    def forward(self, a):
        shifted = a - a.max(axis=self.axis, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=self.axis, keepdims=True))

    def backward(self, g, needs):
        p = exp(self.output())
        return (sub(g, mul(p, sum_(g, axis=self.axis, keepdims=True))),)


class Slice(Function):
    def __init__(self, idx):
        self.idx = idx

    def forward(self, a):
        return np.array(a[self.idx], dtype=np.float64)

    def backward(self, g, needs):
        return (SliceAdjoint(self.idx, self.inputs[0].shape)(g),)


class SliceAdjoint(Function):
    """Scatter-add into a zero array: the adjoint of :class:`Slice`."""

    def __init__(self, idx, shape):
        self.idx = idx
        self.shape = tuple(shape)

    def forward(self, g):
        out = np.zeros(self.shape)
        np.add.at(out, self.idx, g)
        return out

    def backward(self, g, needs):
        return (slice_(g, self.idx),)


class Pad(Function):
    def __init__(self, widths, value):
        self.widths = tuple(tuple(w) for w in widths)
        self.value = value

    def forward(self, a):
        return np.pad(a, self.widths, constant_values=self.value)

    def backward(self, g, needs):
        idx = tuple(slice(lo, lo + n) for (lo, _), n in zip(self.widths, self.inputs[0].shape))
        return (slice_(g, idx),)


class Concat(Function):
    def __init__(self, axis):
        self.axis = axis

    def forward(self, *arrays):
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g, needs):
        grads = []
        start = 0
        ndim = g.ndim
        axis = self.axis % ndim
        for t, need in zip(self.inputs, needs):
            n = t.shape[axis]
            if need:
                idx = tuple(slice(start, start + n) if d == axis else slice(None) for d in range(ndim))
                grads.append(slice_(g, idx))
            else:
                grads.append(None)
            start += n
        return tuple(grads)


class AxisMatmul(Function):
    """Contract a constant matrix ``m`` (out x in) against one axis of ``a``."""

    def __init__(self, m, axis):
        self.m = np.asarray(m, dtype=np.float64)
        self.axis = axis

    def forward(self, a):
        if a.shape[self.axis] != self.m.shape[1]:
            raise ShapeMismatch(f"axis {self.axis} has size {a.shape[self.axis]}, matrix expects {self.m.shape[1]}")
        return np.moveaxis(np.tensordot(self.m, a, axes=(1, self.axis)), 0, self.axis)

    def backward(self, g, needs):
        return (AxisMatmul(self.m.T, self.axis)(g),)


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


class Im2Col(Function):
    """Unfold NHWC patches into rows of shape (kh*kw*C,)."""

    def __init__(self, kh, kw, stride, pad):
        self.kh, self.kw, self.stride, self.pad = kh, kw, stride, pad

    def forward(self, x):
        n, h, w, c = x.shape
        kh, kw, s, p = self.kh, self.kw, self.stride, self.pad
        ho, wo = _conv_out(h, kh, s, p), _conv_out(w, kw, s, p)
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {p}")
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        cols = np.empty((n, ho, wo, kh, kw, c))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
        return cols.reshape(n * ho * wo, kh * kw * c)

    def backward(self, g, needs):
        return (Col2Im(self.inputs[0].shape, self.kh, self.kw, self.stride, self.pad)(g),)


class Col2Im(Function):
    """Fold patch rows back onto an NHWC canvas, summing overlaps."""

    def __init__(self, shape, kh, kw, stride, pad):
        self.shape = tuple(shape)
        self.kh, self.kw, self.stride, self.pad = kh, kw, stride, pad

    def forward(self, cols):
        n, h, w, c = self.shape
        kh, kw, s, p = self.kh, self.kw, self.stride, self.pad
        ho, wo = _conv_out(h, kh, s, p), _conv_out(w, kw, s, p)
        if cols.shape != (n * ho * wo, kh * kw * c):
            raise ShapeMismatch(f"col2im got {cols.shape}, expected {(n * ho * wo, kh * kw * c)}")
        cols = cols.reshape(n, ho, wo, kh, kw, c)
        canvas = np.zeros((n, h + 2 * p, w + 2 * p, c))
        for i in range(kh):
            for j in range(kw):
                canvas[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += cols[:, :, :, i, j, :]
        return canvas[:, p:p + h, p:p + w, :].copy() if p else canvas

    def backward(self, g, needs):
        return (Im2Col(self.kh, self.kw, self.stride, self.pad)(g),)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


# ---------------------------------------------------------------- functional API

def add(a, b):
    return Add()(a, b)


def sub(a, b):
    return Sub()(a, b)


def mul(a, b):
    return Mul()(a, b)


def div(a, b):
    return Div()(a, b)


def neg(a):
    return Neg()(a)


def sum_to(a, shape):
    return SumTo(shape)(a)


def broadcast_to(a, shape):
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return BroadcastTo(shape)(a)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 1:
        return reshape(MatMul()(a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    return MatMul()(a, b)


def transpose(a, axes=None):
    return Transpose(tuple(axes) if axes is not None else None)(a)


def reshape(a, shape):
    return Reshape(shape)(a)


def flatten(a):
    """Flatten all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def sum_(a, axis=None, keepdims=False):
    return Sum(axis, keepdims)(a)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a):
    return Exp()(a)


def log(a):
    return Log()(a)


def sqrt(a):
    return Sqrt()(a)


def relu(a):
    return Relu()(a)


def sigmoid(a):
    return Sigmoid()(a)


def softplus(a):
    return Softplus()(a)


def log_sigmoid(a):
    """log(sigmoid(a)) computed as -softplus(-a)."""
    return neg(softplus(neg(a)))


def log_softmax(a, axis=-1):
    return LogSoftmax(axis)(a)


def square(a):
    a = as_tensor(a)
    return mul(a, a)


def l2_norm_sq(a):
    return sum_(square(a))


def slice_(a, idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return Slice(idx)(a)


def pad_constant(a, widths, value=0.0):
    return Pad(widths, value)(a)


def concat(tensors, axis=0):
    return Concat(axis)(*tensors)


def axis_matmul(a, m, axis):
    return AxisMatmul(m, axis)(a)


def im2col(x, kh, kw, stride=1, pad=0):
    return Im2Col(kh, kw, stride, pad)(x)


def col2im(cols, shape, kh, kw, stride=1, pad=0):
    return Col2Im(shape, kh, kw, stride, pad)(cols)


def conv2d(x, w, b=None, stride=1, padding=0):
    """NHWC convolution with a (kh, kw, cin, cout) filter."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeMismatch(f"conv2d input {x.shape} vs filter {w.shape}")
    n, h, wd, _ = x.shape
    kh, kw, cin, cout = w.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    out = matmul(im2col(x, kh, kw, stride, padding), reshape(w, (kh * kw * cin, cout)))
    if b is not None:
        out = add(out, b)
    return reshape(out, (n, ho, wo, cout))


def transpose_conv2d(x, w, b=None, stride=1, padding=0, output_size=None):
    """Adjoint of :func:`conv2d` w.r.t. its input, with a (kh, kw, cout, cin) filter.

    ``output_size`` picks among the spatial sizes that the matching forward
    convolution maps back onto the input size; the default is
    ``(h - 1) * stride + kh - 2 * padding``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[3]:
        raise ShapeMismatch(f"transpose_conv2d input {x.shape} vs filter {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, cout, _ = w.shape
    if output_size is None:
        output_size = ((h - 1) * stride + kh - 2 * padding, (wd - 1) * stride + kw - 2 * padding)
    ho, wo = output_size
    if _conv_out(ho, kh, stride, padding) != h or _conv_out(wo, kw, stride, padding) != wd:
        raise ShapeMismatch(f"output size {output_size} inconsistent with input {h}x{wd}")
    cols = matmul(reshape(x, (n * h * wd, cin)), transpose(reshape(w, (kh * kw * cout, cin))))
    out = col2im(cols, (n, ho, wo, cout), kh, kw, stride, padding)
    if b is not None:
        out = add(out, b)
    return out


def pool_matrix(size, kernel, stride):
    """Row-stochastic (out x size) matrix averaging windows along one axis."""
    out = (size - kernel) // stride + 1
    m = np.zeros((out, size))
    for o in range(out):
        m[o, o * stride:o * stride + kernel] = 1.0 / kernel
    return m


def avg_pool2d(x, kernel, stride=None):
    # Box filters are separable, so pool rows then columns.
    stride = kernel if stride is None else stride
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] < kernel or x.shape[2] < kernel:
        raise ShapeMismatch(f"avg_pool2d kernel {kernel} on {x.shape}")
    out = axis_matmul(x, pool_matrix(x.shape[1], kernel, stride), 1)
    return axis_matmul(out, pool_matrix(x.shape[2], kernel, stride), 2)


def global_avg_pool(x):
    return mean(x, axis=(1, 2))


# ---------------------------------------------------------------- differentiation

def grad(output, wrt, create_graph=False, allow_unused=False):
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the returned tensors are themselves part of the
    graph and may be differentiated again.
    """
    single = isinstance(wrt, Tensor)
    wrt = [wrt] if single else list(wrt)
    if output.size != 1:
        raise NotScalar(f"grad needs a scalar output, got shape {output.shape}")
    for w in wrt:
        if not w.requires_grad:
            raise GradDisabled("differentiation target does not require grad")
    if not output.requires_grad:
        raise Unreachable("output is not connected to any differentiable input")

    targets = {id(w) for w in wrt}
    # Collect every tensor reachable backwards from the output.
    seen = {id(output): output}
    stack = [output]
    while stack:
        t = stack.pop()
        if t.node is None:
            continue
        for p in t.node.parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    inner = sorted((t for t in seen.values() if t.node is not None), key=lambda t: t.node.seq)

    reaches = {tid: tid in targets for tid in seen}
    for t in inner:
        if not reaches[id(t)]:
            reaches[id(t)] = any(reaches[id(p)] for p in t.node.parents)

    grads = {id(output): Tensor(np.ones_like(output.data))}
    with set_grad_enabled(create_graph):
        for t in reversed(inner):
            g = grads.get(id(t))
            if g is None or not reaches[id(t)]:
                continue
            if id(t) not in targets:
                del grads[id(t)]
            parents = t.node.parents
            needs = tuple(p.requires_grad and reaches[id(p)] for p in parents)
            if not any(needs):
                continue
            pgrads = t.node.op.backward(g, needs)
            for p, need, pg in zip(parents, needs, pgrads):
                if not need or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    result = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            if not allow_unused:
                raise Unreachable("a differentiation target is not reachable from the output")
            g = Tensor(np.zeros_like(w.data))
        elif not create_graph:
            g = Tensor(g.data)
        result.append(g)
    return result[0] if single else result


def finite_difference_check(fn, point, eps=1e-6, analytic=None):
    """Compare the reverse-mode gradient of ``fn`` with central differences.

    Args:
        fn: maps a Tensor to a scalar Tensor; must be deterministic.
        point: array-like evaluation point.
        eps: difference step.
        analytic: optional precomputed gradient array; otherwise computed with
            :func:`grad`.

    Returns:
        max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(np.asarray(point, dtype=np.float64))
    if analytic is None:
        x = Tensor(base, requires_grad=True)
        analytic = grad(fn(x), x).data
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    # fn may differentiate internally, so the probe points keep requires_grad.
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(Tensor(base.copy(), requires_grad=True)).item()
        flat[i] = orig - eps
        lo = fn(Tensor(base.copy(), requires_grad=True)).item()
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2 * eps)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NonFiniteValue("non-finite gradient in finite-difference check")
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))

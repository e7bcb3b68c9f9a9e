"""Affine adapters from student-task images to the teacher's input shape.

Each transform maps a batch of target-task images ``(N, H, W, C)`` (its
``target_shape``) onto the teacher's input shape (its ``source_shape``) as
``A @ x + b``. Only the transpose-convolution adapter has a non-zero ``b``.
All transforms are built from autodiff ops, so teacher losses backpropagate
to the original pixels.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Parameter


class WrongKind(ValueError):
    pass


class Unresolved(ValueError):
    pass


def bilinear_matrix(size_in, size_out):
    """(size_out x size_in) interpolation matrix, half-pixel (align_corners=False) grid."""
    m = np.zeros((size_out, size_in))
    scale = size_in / size_out
    for o in range(size_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), size_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, size_in - 1)
        w = src - i0
        m[o, i0] += 1.0 - w
        m[o, i1] += w
    return m


def bilinear_resize(x, out_hw):
    x = ad.as_tensor(x)
    out = ad.axis_matmul(x, bilinear_matrix(x.shape[1], out_hw[0]), 1)
    return ad.axis_matmul(out, bilinear_matrix(x.shape[2], out_hw[1]), 2)


def _shape3(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ad.ShapeMismatch(f"image shape must be (H, W, C) with positive sizes, got {shape}")
    return shape


class InputTransform:
    kind = "base"
    bias_free = True

    def __init__(self, target_shape, source_shape):
        self.target_shape = _shape3(target_shape)
        self.source_shape = _shape3(source_shape)

    def _check(self, x):
        if tuple(x.shape[1:]) != self.target_shape:
            raise ad.ShapeMismatch(f"{self.kind} expects images {self.target_shape}, got {tuple(x.shape[1:])}")

    def apply(self, x):
        x = ad.as_tensor(x)
        self._check(x)
        return self._apply(x)

    __call__ = apply

    def parameters(self):
        return []

    @property
    def resolved(self):
        return True

    def describe(self):
        """Config-file parameters that rebuild this transform."""
        return {"kind": self.kind}

    def __repr__(self):
        return f"{type(self).__name__}({self.target_shape} -> {self.source_shape})"


class Identity(InputTransform):
    kind = "identity"

    def __init__(self, shape):
        super().__init__(shape, shape)

    def _apply(self, x):
        return x


class AvgPoolResize(InputTransform):
    kind = "avgpool_resize"

    def __init__(self, target_shape, factor=2):
        h, w, c = _shape3(target_shape)
        if h % factor or w % factor:
            raise ad.ShapeMismatch(f"{h}x{w} not divisible by {factor}")
        self.factor = factor
        super().__init__(target_shape, (h // factor, w // factor, c))

    def _apply(self, x):
        return ad.avg_pool2d(x, self.factor, self.factor)

    def describe(self):
        return {"kind": self.kind, "factor": self.factor}


class BilinearResize(InputTransform):
    """Bilinear interpolation to any size; used for upsizing small targets."""

    kind = "bilinear_upsize"

    def __init__(self, target_shape, out_hw):
        h, w, c = _shape3(target_shape)
        super().__init__(target_shape, (out_hw[0], out_hw[1], c))

    def _apply(self, x):
        return bilinear_resize(x, self.source_shape[:2])

    def describe(self):
        return {"kind": self.kind, "size": list(self.source_shape[:2])}


class CenterCrop(InputTransform):
    kind = "center_crop"

    def __init__(self, target_shape, out_hw):
        h, w, c = _shape3(target_shape)
        if out_hw[0] > h or out_hw[1] > w:
            raise ad.ShapeMismatch(f"crop {out_hw} larger than {h}x{w}")
        super().__init__(target_shape, (out_hw[0], out_hw[1], c))
        self.top = (h - out_hw[0]) // 2
        self.left = (w - out_hw[1]) // 2

    def window(self):
        h, w, _ = self.source_shape
        return (slice(None), slice(self.top, self.top + h), slice(self.left, self.left + w), slice(None))

    def _apply(self, x):
        return ad.slice_(x, self.window())

    def describe(self):
        return {"kind": self.kind, "size": list(self.source_shape[:2])}


class CenterPad(InputTransform):
    kind = "center_pad"

    def __init__(self, target_shape, out_hw):
        h, w, c = _shape3(target_shape)
        if out_hw[0] < h or out_hw[1] < w:
            raise ad.ShapeMismatch(f"pad {out_hw} smaller than {h}x{w}")
        super().__init__(target_shape, (out_hw[0], out_hw[1], c))
        self.offset = ((out_hw[0] - h) // 2, (out_hw[1] - w) // 2)

    def _widths(self):
        h, w, _ = self.target_shape
        H, W, _ = self.source_shape
        oy, ox = self.offset
        return ((0, 0), (oy, H - h - oy), (ox, W - w - ox), (0, 0))

    def _apply(self, x):
        return ad.pad_constant(x, self._widths())

    def describe(self):
        return {"kind": self.kind, "size": list(self.source_shape[:2])}


class RandomPad(CenterPad):
    """Zero padding at an offset drawn per batch by :func:`sample_random_pad_offset`."""

    kind = "random_pad"

    def __init__(self, target_shape, out_hw, offset=None):
        super().__init__(target_shape, out_hw)
        self.offset = None if offset is None else tuple(int(o) for o in offset)

    @property
    def resolved(self):
        return self.offset is not None

    def valid_offsets(self):
        h, w, _ = self.target_shape
        H, W, _ = self.source_shape
        return H - h + 1, W - w + 1

    def _apply(self, x):
        if self.offset is None:
            raise Unresolved("random_pad offset not sampled")
        return super()._apply(x)


class ChannelAverage(InputTransform):
    kind = "channel_average"

    def __init__(self, target_shape):
        h, w, c = _shape3(target_shape)
        super().__init__(target_shape, (h, w, 1))

    def _apply(self, x):
        return ad.mean(x, axis=3, keepdims=True)


class TransposeConv(InputTransform):
    """Trainable 3x3 stride-2 transpose convolution upsizing by 2.

    The filter starts as a per-channel bilinear stencil, so the untrained
    adapter is a smooth 2x upsampler.
    """

    kind = "transpose_conv"
    bias_free = False

    def __init__(self, target_shape, out_channels=None, seed=0):
        h, w, c = _shape3(target_shape)
        cout = out_channels or c
        super().__init__(target_shape, (2 * h, 2 * w, cout))
        stencil = np.outer([0.5, 1.0, 0.5], [0.5, 1.0, 0.5])
        wgt = np.zeros((3, 3, cout, c))
        for ch in range(min(c, cout)):
            wgt[:, :, ch, ch] = stencil
        rng = np.random.default_rng(seed)
        wgt += rng.normal(scale=1e-3, size=wgt.shape)
        self.w = Parameter(wgt, name="adapter.w")
        self.b = Parameter(np.zeros(cout), name="adapter.b")

    def _apply(self, x):
        return ad.transpose_conv2d(x, self.w, self.b, stride=2, padding=1,
                                   output_size=self.source_shape[:2])

    def parameters(self):
        return [self.w, self.b]

    def freeze(self):
        for p in self.parameters():
            p.freeze()

    def describe(self):
        return {"kind": self.kind, "channels": self.source_shape[2]}


class Composite(InputTransform):
    kind = "composite"

    def __init__(self, children):
        children = list(children)
        for a, b in zip(children, children[1:]):
            if a.source_shape != b.target_shape:
                raise ad.ShapeMismatch(f"{a} does not feed {b}")
        self.children = children
        super().__init__(children[0].target_shape, children[-1].source_shape)

    def _apply(self, x):
        for t in self.children:
            x = t.apply(x)
        return x

    def parameters(self):
        return [p for t in self.children for p in t.parameters()]

    @property
    def resolved(self):
        return all(t.resolved for t in self.children)

    @property
    def bias_free(self):
        return all(t.bias_free for t in self.children)

    def describe(self):
        return {"kind": self.kind, "children": [t.describe() for t in self.children]}


def apply(t, x):
    return t.apply(x)


def make_transform(kind, target_shape, source_shape=None, **params):
    """Construct a transform by name.

    ``source_shape`` (the teacher input shape) fills in sizes not given in
    ``params``; ``composite`` takes ``children`` as a list of
    ``{"kind": ..., ...}`` dicts applied in order.
    """
    target_shape = _shape3(target_shape)
    size = params.get("size") or (source_shape[:2] if source_shape else None)
    if kind == "identity":
        return Identity(target_shape)
    if kind == "avgpool_resize":
        factor = params.get("factor")
        if factor is None:
            factor = target_shape[0] // source_shape[0]
        return AvgPoolResize(target_shape, int(factor))
    if kind == "bilinear_upsize":
        return BilinearResize(target_shape, tuple(size))
    if kind == "center_crop":
        return CenterCrop(target_shape, tuple(size))
    if kind == "center_pad":
        return CenterPad(target_shape, tuple(size))
    if kind == "random_pad":
        return RandomPad(target_shape, tuple(size), params.get("offset"))
    if kind == "channel_average":
        return ChannelAverage(target_shape)
    if kind == "transpose_conv":
        channels = params.get("channels") or (source_shape[2] if source_shape else None)
        return TransposeConv(target_shape, channels, seed=params.get("seed", 0))
    if kind == "composite":
        children = []
        shape = target_shape
        for i, child in enumerate(params["children"]):
            child = dict(child)
            last = i == len(params["children"]) - 1
            t = make_transform(child.pop("kind"), shape, source_shape if last else None, **child)
            children.append(t)
            shape = t.source_shape
        out = Composite(children)
        if source_shape is not None and out.source_shape != tuple(source_shape):
            raise ad.ShapeMismatch(f"composite yields {out.source_shape}, teacher expects {tuple(source_shape)}")
        return out
    raise ValueError(f"unknown transform kind {kind!r}")


def materialize_affine(t):
    """Dense ``(A, b)`` with ``apply(t, x) == A @ x.ravel() + b`` per sample."""
    if not t.resolved:
        raise Unresolved(f"{t.kind} has an unsampled random offset")
    d_tar = int(np.prod(t.target_shape))
    with ad.no_grad():
        b = t.apply(Tensor(np.zeros((1,) + t.target_shape))).data.reshape(-1)
        basis = np.eye(d_tar).reshape((d_tar,) + t.target_shape)
        cols = t.apply(Tensor(basis)).data.reshape(d_tar, -1) - b
    return cols.T.copy(), b


def _find_crop(t):
    if isinstance(t, CenterCrop):
        return t
    if isinstance(t, Composite):
        for child in t.children:
            if isinstance(child, CenterCrop):
                return child
            # Only channel-wise maps may precede the crop, or its window would
            # not line up with target-space pixels.
            if not isinstance(child, (ChannelAverage, Identity)):
                break
    raise WrongKind(f"crop_for_discriminator needs a center_crop transform, got {t.kind}")


def crop_for_discriminator(J, t):
    """Restrict a target-space gradient batch to the crop window of ``t``.

    Pixels outside the window have structurally zero teacher gradients, which
    would otherwise let a discriminator tell teacher from student trivially.
    """
    crop = _find_crop(t)
    top, left = crop.top, crop.left
    h, w = crop.source_shape[:2]
    idx = (slice(None), slice(top, top + h), slice(left, left + w), slice(None))
    if isinstance(J, Tensor):
        return ad.slice_(J, idx)
    return np.asarray(J)[idx]


def disc_view(t):
    """Function applied to J batches before the discriminator (crop or identity)."""
    try:
        _find_crop(t)
    except WrongKind:
        return None
    return lambda J: crop_for_discriminator(J, t)


def disc_input_shape(t):
    try:
        crop = _find_crop(t)
    except WrongKind:
        return t.target_shape
    h, w = crop.source_shape[:2]
    return (h, w, t.target_shape[2])


def sample_random_pad_offset(t, rng):
    """Resolved copy of a random_pad transform with a uniformly drawn offset."""
    if not isinstance(t, RandomPad):
        if isinstance(t, Composite):
            children = [sample_random_pad_offset(c, rng) if isinstance(c, RandomPad) else c
                        for c in t.children]
            if any(isinstance(c, RandomPad) for c in t.children):
                return Composite(children)
        raise WrongKind(f"sample_random_pad_offset needs random_pad, got {t.kind}")
    ny, nx = t.valid_offsets()
    oy = int(rng.integers(ny))
    ox = int(rng.integers(nx))
    return RandomPad(t.target_shape, t.source_shape[:2], offset=(oy, ox))


def resolve(t, rng):
    """Resolve any random offsets in ``t``; transforms without them pass through."""
    try:
        return sample_random_pad_offset(t, rng)
    except WrongKind:
        return t

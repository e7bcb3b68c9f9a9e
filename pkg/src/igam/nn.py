"""Layers, model presets, parameter freezing, SGD and checkpoint I/O."""

import copy
import hashlib
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class UnknownPreset(ValueError):
    pass


class IncompatibleShape(ValueError):
    pass


class NoLogitLayer(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class Parameter(Tensor):
    """A trainable tensor. Frozen parameters never require grad."""

    __slots__ = ("frozen",)

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.frozen = False

    def freeze(self):
        self.frozen = True
        self.requires_grad = False

    def unfreeze(self):
        self.frozen = False
        self.requires_grad = True


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind = "layer"

    def params(self):
        return {}

    def out_shape(self, in_shape):
        return in_shape


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, cin, cout, kernel, stride=1, padding=0, rng=None):
        self.stride, self.padding = stride, padding
        fan_in = kernel * kernel * cin
        self.w = Parameter(_he_uniform(rng, (kernel, kernel, cin, cout), fan_in))
        self.b = Parameter(np.zeros(cout))

    def params(self):
        return {"w": self.w, "b": self.b}

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def out_shape(self, in_shape):
        h, w, c = in_shape
        kh, kw, cin, cout = self.w.shape
        if c != cin:
            raise IncompatibleShape(f"conv expects {cin} channels, got {c}")
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise IncompatibleShape(f"conv kernel {kh} does not fit {h}x{w}")
        return (ho, wo, cout)


class Dense(Layer):
    kind = "dense"

    def __init__(self, nin, nout, rng=None):
        self.w = Parameter(_he_uniform(rng, (nin, nout), nin))
        self.b = Parameter(np.zeros(nout))

    def params(self):
        return {"w": self.w, "b": self.b}

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b

    def out_shape(self, in_shape):
        if in_shape != (self.w.shape[0],):
            raise IncompatibleShape(f"dense expects ({self.w.shape[0]},), got {in_shape}")
        return (self.w.shape[1],)


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x):
        return ad.relu(x)


class AvgPool(Layer):
    kind = "avgpool"

    def __init__(self, kernel=2, stride=None):
        self.kernel = kernel
        self.stride = stride or kernel

    def __call__(self, x):
        return ad.avg_pool2d(x, self.kernel, self.stride)

    def out_shape(self, in_shape):
        h, w, c = in_shape
        if h < self.kernel or w < self.kernel:
            raise IncompatibleShape(f"avgpool {self.kernel} does not fit {h}x{w}")
        return ((h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1, c)


class GlobalAvgPool(Layer):
    kind = "gap"

    def __call__(self, x):
        return ad.global_avg_pool(x)

    def out_shape(self, in_shape):
        return (in_shape[-1],)


class Flatten(Layer):
    kind = "flatten"

    def __call__(self, x):
        return ad.flatten(x)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Model:
    """Sequential network. ``logits`` stops before ``final_activation``.

    Classifiers have no final activation (softmax is folded into the loss);
    discriminators end in a sigmoid.
    """

    def __init__(self, layers, input_shape, name="model", final_activation=None, arch=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.final_activation = final_activation
        self.arch = arch
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.output_shape = shape
        self._name_params()

    def _name_params(self):
        for i, layer in enumerate(self.layers):
            for key, p in layer.params().items():
                p.name = f"{i}.{layer.kind}.{key}"

    def parameters(self):
        """Ordered mapping of parameter name to :class:`Parameter`."""
        out = {}
        for layer in self.layers:
            for p in layer.params().values():
                out[p.name] = p
        return out

    def trainable(self):
        return [p for p in self.parameters().values() if not p.frozen]

    def logits(self, x):
        x = ad.as_tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise IncompatibleShape(f"{self.name} expects inputs {self.input_shape}, got {tuple(x.shape[1:])}")
        for layer in self.layers:
            x = layer(x)
        return x

    def features(self, x):
        """Hidden features feeding the final dense layer."""
        x = ad.as_tensor(x)
        for layer in self.layers[:self._logit_index()]:
            x = layer(x)
        return x

    def __call__(self, x):
        out = self.logits(x)
        if self.final_activation == "sigmoid":
            out = ad.sigmoid(out)
        return out

    def predict(self, x, batch_size=256):
        """Argmax class per sample, ties going to the lowest index."""
        x = np.asarray(x)
        preds = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                preds.append(np.argmax(self.logits(x[i:i + batch_size]).data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=int)

    def _logit_index(self):
        for i in range(len(self.layers) - 1, -1, -1):
            if isinstance(self.layers[i], Dense):
                return i
        raise NoLogitLayer(f"{self.name} has no dense logit layer")

    def freeze(self):
        for p in self.parameters().values():
            p.freeze()
        return self

    def copy(self, name=None):
        clone = copy.deepcopy(self)
        if name is not None:
            clone.name = name
        return clone

    def state(self):
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, state):
        params = self.parameters()
        if set(state) != set(params):
            raise CheckpointError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise CheckpointError(f"{k}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()

    def __repr__(self):
        kinds = ",".join(layer.kind for layer in self.layers)
        return f"Model({self.name!r}, input={self.input_shape}, layers=[{kinds}])"


# ---------------------------------------------------------------- presets

@dataclass(frozen=True)
class ArchitectureSpec:
    preset: str
    options: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, spec):
        if isinstance(spec, cls):
            return spec
        return cls(str(spec))


def _classifier_cnn(in_shape, k, widths, kernel, hidden, rng):
    h, w, c = in_shape
    layers = []
    shape = in_shape
    for width in widths:
        conv = Conv2D(shape[2], width, kernel, padding=kernel // 2, rng=rng)
        layers += [conv, ReLU()]
        shape = conv.out_shape(shape)
        if shape[0] >= 2 and shape[1] >= 2:
            pool = AvgPool(2)
            layers.append(pool)
            shape = pool.out_shape(shape)
    layers.append(Flatten())
    nflat = int(np.prod(shape))
    layers += [Dense(nflat, hidden, rng=rng), ReLU(), Dense(hidden, k, rng=rng)]
    return layers


def _disc_cnn(in_shape, depth, base, rng):
    layers = []
    shape = in_shape
    for i in range(depth):
        conv = Conv2D(shape[2], base * 2 ** i, 3, stride=2, padding=1, rng=rng)
        layers += [conv, ReLU()]
        shape = conv.out_shape(shape)
    layers += [Flatten(), Dense(int(np.prod(shape)), 1, rng=rng)]
    return layers


def build(spec, input_shape, num_classes, seed, name=None, **options):
    """Build a preset network with parameters drawn deterministically from ``seed``.

    Presets:
        ``mnist-cnn2``  two 5x5 conv + pool blocks (32, 64) and a 1024-unit dense layer.
        ``small-cnn``   two 3x3 conv + pool blocks (8, 16) and a 32-unit dense layer.
        ``mlp``         one hidden dense layer (``hidden``, default 32).
        ``linear``      a single dense layer on flattened input.
        ``disc-cnn-K``  K stride-2 3x3 conv layers with doubling channels
                        (8-16-32-64 for K=4; 16-32-...-256 for K=5) and a sigmoid output.

    Keyword options override widths: ``widths``, ``hidden``, ``kernel``, ``base``.
    """
    spec = ArchitectureSpec.parse(spec)
    opts = {**spec.options, **options}
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise IncompatibleShape(f"input_shape must be (H, W, C), got {input_shape}")
    rng = np.random.default_rng(seed)
    preset = spec.preset
    final = None
    if preset == "mnist-cnn2":
        layers = _classifier_cnn(input_shape, num_classes, opts.get("widths", (32, 64)),
                                 opts.get("kernel", 5), opts.get("hidden", 1024), rng)
    elif preset == "small-cnn":
        layers = _classifier_cnn(input_shape, num_classes, opts.get("widths", (8, 16)),
                                 opts.get("kernel", 3), opts.get("hidden", 32), rng)
    elif preset == "mlp":
        nin = int(np.prod(input_shape))
        hidden = opts.get("hidden", 32)
        layers = [Flatten(), Dense(nin, hidden, rng=rng), ReLU(), Dense(hidden, num_classes, rng=rng)]
    elif preset == "linear":
        layers = [Flatten(), Dense(int(np.prod(input_shape)), num_classes, rng=rng)]
    else:
        m = re.fullmatch(r"disc-cnn-(\d+)", preset)
        if not m:
            raise UnknownPreset(preset)
        depth = int(m.group(1))
        if num_classes != 1:
            raise IncompatibleShape("discriminator presets have a single output")
        base = opts.get("base", 16 if depth >= 5 else 8)
        layers = _disc_cnn(input_shape, depth, base, rng)
        final = "sigmoid"
    try:
        return Model(layers, input_shape, name=name or preset, final_activation=final, arch=spec)
    except IncompatibleShape:
        raise
    except (ValueError, IndexError) as exc:
        raise IncompatibleShape(str(exc)) from None


def freeze_all_but_logits(model, num_classes=None, seed=0):
    """Copy of ``model`` with every parameter frozen except a fresh logit layer.

    The replacement head may have a different number of classes.
    """
    out = model.copy()
    idx = out._logit_index()
    old = out.layers[idx]
    nin, nout = old.w.shape
    out.freeze()
    out.layers[idx] = Dense(nin, num_classes or nout, rng=np.random.default_rng(seed))
    out.output_shape = (num_classes or nout,)
    out._name_params()
    return out


def logit_parameters(model):
    layer = model.layers[model._logit_index()]
    return [layer.w, layer.b]


def parameter_hash(model):
    h = hashlib.sha256()
    for name, p in model.parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- optimization

def sgd_step(model, grads, lr):
    """Plain gradient step ``p <- p - lr * g`` on unfrozen parameters.

    ``grads`` maps parameter names to arrays; entries for frozen parameters
    are ignored.
    """
    params = model.parameters()
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g.data if isinstance(g, Tensor) else g)
        if g.shape != p.shape:
            raise ad.ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        if not p.frozen:
            p.data = p.data - lr * g
    return model


class SGD:
    """SGD with heavy-ball momentum over a fixed list of parameters."""

    def __init__(self, params, lr, momentum=0.9):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr=None, ascent=False):
        lr = self.lr if lr is None else lr
        sign = -1.0 if ascent else 1.0
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if p.frozen:
                continue
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            if self.momentum:
                self.velocity[i] = self.momentum * self.velocity[i] + g
                g = self.velocity[i]
            p.data = p.data - sign * lr * g


# ---------------------------------------------------------------- checkpoints

MAGIC = b"IGAM"
FORMAT_VERSION = 1


def save_checkpoint(model, path):
    """Write parameters as: magic, u16 version, then per tensor
    (u16 name length, UTF-8 name, u32 rank, u32 dims, little-endian f64 payload)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        for name, p in model.parameters().items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    pos = 6
    state = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims))
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"truncated payload for {name}")
            state[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error:
        raise CheckpointError("truncated checkpoint") from None
    return state


def load_checkpoint(model, path):
    """Load parameters into ``model``, validating names and shapes."""
    model.load_state(read_checkpoint(path))
    return model

"""Datasets: IDX (MNIST format) reader/writer and small synthetic raster tasks."""

import struct
from dataclasses import dataclass

import numpy as np


class BadMagic(ValueError):
    pass


class CountMismatch(ValueError):
    pass


class Truncated(ValueError):
    pass


class UnknownGenerator(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) ints in [0, k)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, split=None):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)

    def select_classes(self, classes):
        """Keep only ``classes``, relabelled 0..len(classes)-1 in the given order."""
        classes = list(classes)
        mask = np.isin(self.labels, classes)
        remap = {c: i for i, c in enumerate(classes)}
        labels = np.array([remap[c] for c in self.labels[mask]], dtype=np.int64)
        return Dataset(self.images[mask], labels, len(classes), self.split)


def minibatches(n, batch_size, rng=None):
    """Yield index arrays covering ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------- IDX files

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _read_idx(path, magic, ndim):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4:
        raise Truncated(f"{path}: header too short")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    if len(buf) < 4 + 4 * ndim:
        raise Truncated(f"{path}: header too short")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    payload = buf[4 + 4 * ndim:]
    if len(payload) < count:
        raise Truncated(f"{path}: expected {count} bytes of data, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)


def load_idx(path_images, path_labels, split="train", num_classes=10):
    """Read an MNIST-style image/label IDX pair, scaling pixels to [0, 1]."""
    images = _read_idx(path_images, IMAGE_MAGIC, 3)
    labels = _read_idx(path_labels, LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images vs {len(labels)} labels")
    return Dataset(images[..., None] / 255.0, labels.astype(np.int64), num_classes, split)


def write_idx(path_images, path_labels, images, labels):
    """Write uint8 images (N, H, W) and labels (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path_images, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(path_labels, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


# ---------------------------------------------------------------- synthetic tasks

def _moons(n_per_class, noise, rng):
    t0 = rng.uniform(0, np.pi, n_per_class)
    t1 = rng.uniform(0, np.pi, n_per_class)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    pts = np.concatenate([upper, lower]) + rng.normal(scale=noise, size=(2 * n_per_class, 2))
    labels = np.repeat([0, 1], n_per_class)
    # Normalize the moons' bounding box [-1, 2] x [-0.5, 1] to [0, 1]^2.
    pts = (pts - np.array([-1.0, -0.5])) / np.array([3.0, 1.5])
    return pts, labels


def _blobs(k, n_per_class, spread, rng):
    angles = 2 * np.pi * np.arange(k) / k
    centers = 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pts = np.repeat(centers, n_per_class, axis=0) + rng.normal(scale=spread, size=(k * n_per_class, 2))
    return pts, np.repeat(np.arange(k), n_per_class)


def rasterize(points, height, width, channels=1, sigma=1.5, margin=0.2, rng=None, texture=0.0):
    """Render each 2-D point in [0, 1]^2 as a Gaussian spot on an image.

    The unit square maps onto the central ``1 - 2 * margin`` fraction of the
    canvas. ``texture`` adds uniform background noise of that amplitude.
    """
    points = np.clip(np.asarray(points, dtype=np.float64), -0.1, 1.1)
    rows = (margin + (1 - 2 * margin) * (1 - points[:, 1])) * (height - 1)
    cols = (margin + (1 - 2 * margin) * points[:, 0]) * (width - 1)
    yy = np.arange(height)[None, :, None]
    xx = np.arange(width)[None, None, :]
    spots = np.exp(-((yy - rows[:, None, None]) ** 2 + (xx - cols[:, None, None]) ** 2) / (2 * sigma ** 2))
    images = np.repeat(spots[..., None], channels, axis=3)
    if texture > 0:
        images = images + texture * rng.uniform(size=images.shape)
    return np.clip(images, 0.0, 1.0)


def synth_dataset(generator, n, seed, height=28, width=28, channels=1, split="train", **params):
    """Deterministic synthetic image classification set.

    Generators:
        ``raster-moons``  two interleaved half-moons; the class is which moon
                          the rendered spot lies on.
        ``blob-K``        K Gaussian clusters on a ring, one class each.

    Classes are balanced to within one sample.
    """
    rng = np.random.default_rng(seed)
    if generator == "raster-moons":
        k = 2
    elif generator.startswith("blob-") and generator[5:].isdigit():
        k = int(generator[5:])
    else:
        raise UnknownGenerator(generator)
    per_class = -(-n // k)
    if generator == "raster-moons":
        pts, labels = _moons(per_class, params.get("noise", 0.08), rng)
    else:
        pts, labels = _blobs(k, per_class, params.get("spread", 0.05), rng)
    # Trim the surplus evenly from the largest classes, then shuffle.
    keep = np.concatenate([np.flatnonzero(labels == c)[:n // k + (c < n % k)] for c in range(k)])
    pts, labels = pts[keep], labels[keep]
    images = rasterize(pts, height, width, channels, sigma=params.get("sigma", 1.5),
                       margin=params.get("margin", 0.2), rng=rng, texture=params.get("texture", 0.0))
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], k, split)

"""Datasets: IDX (MNIST-format) files and small synthetic problems."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CountMismatchError, FormatError, TruncatedError, ValidationError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if len(self.samples) != len(labels):
            raise CountMismatchError(f"{len(self.samples)} samples but {len(labels)} labels")
        k = self.num_classes
        if k is None:
            k = int(labels.max()) + 1 if labels.size else 0
            object.__setattr__(self, "num_classes", k)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValidationError(f"labels outside [0, {k})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.samples.shape[1:]

    def subset(self, n, split=None):
        return Dataset(self.samples[:n], self.labels[:n], split or self.split, self.num_classes)


# -- IDX ------------------------------------------------------------------------

def _read(path):
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def read_idx(path, expected_magic, limit=None):
    buf = _read(path)
    if len(buf) < 8:
        raise TruncatedError(f"{path}: shorter than the IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise TruncatedError(f"{path}: truncated dims header")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = dims[0] if limit is None else min(dims[0], limit)
    per_item = int(np.prod(dims[1:], dtype=np.int64))
    need = count * per_item
    if len(buf) - head < need:
        raise TruncatedError(f"{path}: payload holds {len(buf) - head} bytes, header promises {need}")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=head)
    return arr.reshape((count,) + tuple(dims[1:])), dims[0]


def write_idx(path, arr):
    """Write a uint8 array as IDX (images if 3-D, labels if 1-D)."""
    a = np.asarray(arr, dtype=np.uint8)
    magic = {1: IDX_LABELS, 3: IDX_IMAGES}.get(a.ndim)
    if magic is None:
        raise ValidationError("IDX writer supports 1-D labels or 3-D images")
    head = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape)
    data = head + a.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


def _find(directory, keys):
    for name in sorted(p.name for p in Path(directory).iterdir()):
        if any(k in name for k in keys):
            return Path(directory) / name
    raise FormatError(f"{directory}: no file matching {keys}")


def load_idx_dataset(directory, split=None, limit=None) -> Dataset:
    """Load one image/label IDX pair from ``directory``.

    With ``split="test"`` (or ``"train"``) files are chosen by the MNIST naming
    convention (``t10k-*`` / ``train-*``); otherwise the first pair found is used.
    Pixels are scaled to [0, 1] and given a leading channel axis.
    """
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: not a directory")
    prefix = {"test": ["t10k-"], "train": ["train-"]}.get(split, [""])
    img = _find(d, [p + "images" for p in prefix] + [p + "images-idx3" for p in prefix])
    lab = _find(d, [p + "labels" for p in prefix])
    images, n_img = read_idx(img, IDX_IMAGES, limit)
    labels, n_lab = read_idx(lab, IDX_LABELS, limit)
    if n_img != n_lab:
        raise CountMismatchError(f"{n_img} images but {n_lab} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), split or "test", 10)


def synth_digits(n, seed=0):
    """Ten-class 28x28 uint8 images: each class is a stroke template plus jitter and noise.

    Stand-in for MNIST where the real files are not available.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:28, 0:28].astype(np.float64)
    templates = []
    for c in range(10):
        ang = np.pi * c / 10
        t = np.zeros((28, 28))
        # one oriented bar plus a class-dependent ring or dot
        d = np.abs((xx - 13.5) * np.sin(ang) - (yy - 13.5) * np.cos(ang))
        t += np.exp(-(d ** 2) / 4.0) * (np.hypot(xx - 13.5, yy - 13.5) < 11)
        r = 3 + (c % 5) * 1.6
        ring = np.exp(-((np.hypot(xx - 13.5, yy - 13.5) - r) ** 2) / 2.0)
        t += ring if c < 5 else 0.0
        if c >= 5:
            t += np.exp(-((xx - 8 - c) ** 2 + (yy - 20 + c) ** 2) / 6.0)
        templates.append(t / t.max())
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    imgs = np.empty((n, 28, 28), dtype=np.uint8)
    for i, c in enumerate(labels):
        dx, dy = rng.integers(-2, 3, size=2)
        img = np.roll(np.roll(templates[c], dy, axis=0), dx, axis=1)
        img = img * rng.uniform(0.7, 1.0) + rng.normal(0, 0.08, size=img.shape)
        imgs[i] = np.clip(img * 255, 0, 255).astype(np.uint8)
    return imgs, labels.astype(np.uint8)


def write_synth_idx(directory, n, seed=0, prefix="t10k"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    imgs, labels = synth_digits(n, seed)
    write_idx(d / f"{prefix}-images-idx3-ubyte", imgs)
    write_idx(d / f"{prefix}-labels-idx1-ubyte", labels)
    return d


# -- synthetic 2-D problems -----------------------------------------------------

# fixed affine maps into [0, 1]^2 so every split shares one scaling
_MOONS_BOX = (np.array([-1.6, -1.1]), np.array([2.6, 1.6]))
_GAUSS_BOX = (np.array([-4.0, -4.0]), np.array([4.0, 4.0]))


def gen_synthetic(kind, n, seed, noise=None, split="train") -> Dataset:
    """Two balanced classes in the unit square; deterministic in ``seed``.

    ``moons``: interleaved half circles; ``gaussians``: two isotropic blobs.
    Features are mapped into [0, 1] so they sit on an unsigned activation grid.
    """
    if n < 2:
        raise ValidationError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    n0 = (n + 1) // 2
    n1 = n - n0
    if kind == "moons":
        noise = 0.2 if noise is None else noise
        t0 = rng.uniform(0, np.pi, n0)
        t1 = rng.uniform(0, np.pi, n1)
        a = np.stack([np.cos(t0), np.sin(t0)], 1)
        b = np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], 1)
        box = _MOONS_BOX
    elif kind == "gaussians":
        noise = 1.0 if noise is None else noise
        a = np.zeros((n0, 2)) + [-1.0, -1.0]
        b = np.zeros((n1, 2)) + [1.0, 1.0]
        box = _GAUSS_BOX
    else:
        raise ValidationError(f"unknown synthetic dataset {kind!r}")
    x = np.concatenate([a, b]) + rng.normal(0.0, noise, size=(n, 2))
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    order = rng.permutation(n)
    x = np.clip((x[order] - box[0]) / (box[1] - box[0]), 0.0, 1.0)
    return Dataset(x, y[order], split, 2)


def train_test(kind, n_train, n_test, seed, noise=None):
    """Disjoint train/test draws of :func:`gen_synthetic` from one seed."""
    full = gen_synthetic(kind, n_train + n_test, seed, noise)
    tr = Dataset(full.samples[:n_train], full.labels[:n_train], "train", 2)
    te = Dataset(full.samples[n_train:], full.labels[n_train:], "test", 2)
    return tr, te

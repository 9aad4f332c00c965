"""Small image-classification datasets and stratified benchmark sampling.

Loaders keep raw 0-255 pixel values (as float32); rescaling belongs to the
model's preprocessing layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
CIFAR_RECORD = 3073


class DatasetFormatError(ValueError):
    pass


class ClassDeficitError(ValueError):
    def __init__(self, class_id: int, have: int, need: int):
        super().__init__(f"class {class_id} has {have} images, need {need}")
        self.class_id = class_id


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, H, W, C) float32 in [0, 255]
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        n = len(self.images)
        if n == 0:
            raise ValueError("image set is empty")
        if self.labels.shape != (n,):
            raise ValueError(f"{n} images but labels of shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.images.min() < 0 or self.images.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledImageSet":
        idx = np.asarray(idx)
        return LabeledImageSet(self.images[idx], self.labels[idx], self.class_count)

    def split(self, val_fraction: float, seed: int) -> tuple["LabeledImageSet", "LabeledImageSet"]:
        """Disjoint seeded (train, val) split."""
        if not 0 < val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        perm = np.random.default_rng(seed).permutation(len(self))
        nval = max(1, int(round(val_fraction * len(self))))
        return self.subset(np.sort(perm[nval:])), self.subset(np.sort(perm[:nval]))


@dataclass
class BenchmarkSample:
    images: np.ndarray
    labels: np.ndarray
    k_per_class: int
    seed: int
    indices: np.ndarray  # positions in the source set

    def __len__(self):
        return len(self.labels)


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset file not found: {path}") from None


def _idx_header(raw: bytes, path, magic: int, ndim: int):
    if len(raw) < 4 + 4 * ndim:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DatasetFormatError(f"{path}: IDX magic {got:#010x}, expected {magic:#010x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    need = int(np.prod(dims))
    if len(body) != need:
        raise DatasetFormatError(f"{path}: payload has {len(body)} bytes, header declares {need}")
    return dims, body


def load_idx(images_path, labels_path) -> LabeledImageSet:
    """Read an IDX image file (magic 0x803) and its label file (magic 0x801)."""
    (n, h, w), body = _idx_header(_read(images_path), images_path, IDX_IMAGES_MAGIC, 3)
    (nl,), lbody = _idx_header(_read(labels_path), labels_path, IDX_LABELS_MAGIC, 1)
    if n != nl:
        raise DatasetFormatError(f"{n} images but {nl} labels")
    images = np.frombuffer(body, dtype=np.uint8).reshape(n, h, w, 1).astype(np.float32)
    labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    return LabeledImageSet(images, labels, class_count=max(10, int(labels.max()) + 1))


def load_cifar_binary(paths, class_count: int = 10) -> LabeledImageSet:
    """Read CIFAR-10 binary batches: per record 1 label byte + 3x1024 planar pixels."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DatasetFormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0].astype(np.int64)
        if lab.max() >= class_count:
            bad = int(np.argmax(lab >= class_count))
            raise DatasetFormatError(f"{path}: record {bad} has label {lab[bad]} >= {class_count}")
        labels.append(lab)
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    return LabeledImageSet(
        np.concatenate(images).astype(np.float32), np.concatenate(labels), class_count
    )


def synth_blobs(
    class_count: int,
    per_class: int,
    resolution: int = 28,
    seed: int = 0,
    channels: int = 1,
    blobs_per_class: int = 3,
    noise: float = 16.0,
    texture: float = 0.0,
    jitter: float = 0.0,
    amplitude: float = 90.0,
    confusion: float = 0.0,
    texture_band: tuple[float, float] = (0.6, 1.4),
) -> LabeledImageSet:
    """Gaussian-blob class prototypes plus pixel noise, clamped to [0, 255].

    Each class owns ``blobs_per_class`` Gaussian bumps of random sign, position
    and colour around a mid-grey background. Per image the bumps are shifted
    by up to ``jitter`` pixels and their amplitude is rescaled, then i.i.d.
    Gaussian noise of std ``noise`` is added.

    ``confusion`` > 0 overlays the blobs of a random other class with gain
    drawn from U(0, confusion), which makes the blob features ambiguous for
    part of the set.

    ``texture`` > 0 adds a faint class-specific high-frequency grating of that
    peak amplitude (in pixels). It is highly predictive yet, for amplitudes
    around the attack budget, brittle: a useful stand-in for the non-robust
    features natural images carry. Its angular frequencies are drawn from
    ``texture_band`` (in units of pi radians per pixel).
    """
    if min(class_count, per_class, resolution, channels) < 1:
        raise ValueError("class_count, per_class, resolution and channels must be positive")
    proto_rng = np.random.default_rng([seed, 0])
    rng = np.random.default_rng([seed, 1])
    r = resolution
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64)

    centers = proto_rng.uniform(0.2 * r, 0.8 * r, size=(class_count, blobs_per_class, 2))
    widths = proto_rng.uniform(0.08 * r, 0.16 * r, size=(class_count, blobs_per_class))
    signs = proto_rng.choice([-1.0, 1.0], size=(class_count, blobs_per_class))
    colours = proto_rng.uniform(0.3, 1.0, size=(class_count, blobs_per_class, channels))
    freqs = proto_rng.uniform(*texture_band, size=(class_count, 2)) * np.pi * proto_rng.choice([-1, 1], size=(class_count, 2))
    phases = proto_rng.uniform(0, 2 * np.pi, size=(class_count, channels))

    n = class_count * per_class
    labels = np.repeat(np.arange(class_count), per_class)
    images = np.full((n, r, r, channels), 128.0)
    shifts = rng.uniform(-jitter, jitter, size=(n, 2)) if jitter > 0 else np.zeros((n, 2))
    gains = rng.uniform(0.7, 1.3, size=(n, blobs_per_class))
    others = (labels + rng.integers(1, class_count, size=n)) % class_count if class_count > 1 else labels
    mix = rng.uniform(0, confusion, size=n) if confusion > 0 else np.zeros(n)
    for i in range(n):
        c = labels[i]
        img = images[i]
        for cls, gain in ((c, gains[i]), (others[i], np.full(blobs_per_class, mix[i]))):
            if not gain.any():
                continue
            for b in range(blobs_per_class):
                cy, cx = centers[cls, b] + shifts[i]
                bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * widths[cls, b] ** 2))
                img += (signs[cls, b] * amplitude * gain[b] * bump)[:, :, None] * colours[cls, b]
        if texture > 0:
            wave = freqs[c, 0] * yy + freqs[c, 1] * xx
            img += texture * np.sin(wave[:, :, None] + phases[c])
    images += rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0, 255)
    return LabeledImageSet(images.astype(np.float32), labels, class_count)


def sample_benchmark(data: LabeledImageSet, k_per_class: int, seed: int) -> BenchmarkSample:
    """Exactly ``k_per_class`` images per class, class-major order, seeded."""
    if k_per_class < 1:
        raise ValueError("k_per_class must be >= 1 (empty benchmark)")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(data.class_count):
        members = np.flatnonzero(data.labels == c)
        if len(members) < k_per_class:
            raise ClassDeficitError(c, len(members), k_per_class)
        chosen.append(np.sort(rng.choice(members, size=k_per_class, replace=False)))
    idx = np.concatenate(chosen)
    return BenchmarkSample(data.images[idx].copy(), data.labels[idx].copy(), k_per_class, seed, idx)

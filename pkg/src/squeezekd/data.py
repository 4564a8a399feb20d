"""Dataset ingestion, synthesis, augmentation, and batch iteration.

Two on-disk layouts are supported:

* ``cifar-like``: one binary file of fixed-size records, each record being a
  single label byte followed by ``c*H*W`` pixel bytes in channel-major order.
* ``idx-like``: a directory holding ``images.idx`` and ``labels.idx`` in the
  big-endian IDX layout (magic ``0x00000803``/``0x00000801``-style headers);
  3-D image files are treated as single-channel.

Pixels are scaled into [0, 1] at load time.  Normalization statistics are
always computed from the training split and applied to every split; the
random-crop/horizontal-flip augmentation runs only on training batches, on a
stream separate from the batch-order stream so two runs that differ only in
loss composition still see identical sample order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

# stream tags for deriving independent per-purpose generators from a run seed
TAG_ORDER = 101
TAG_AUGMENT = 102
TAG_SAMPLES = 103
TAG_PATTERN = 104

STD_FLOOR = 1e-8


class DataFormatError(ValueError):
    """A dataset file violates its declared layout; carries the byte offset."""

    def __init__(self, message, path=None, offset=None):
        detail = message
        if path is not None:
            detail += f" (file {path}"
            if offset is not None:
                detail += f", byte offset {offset}"
            detail += ")"
        elif offset is not None:
            detail += f" (byte offset {offset})"
        super().__init__(detail)
        self.path = path
        self.offset = offset


def derive_rng(seed, *tags) -> np.random.Generator:
    """A generator on an independent stream keyed by (seed, *tags)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(t) for t in tags]))


@dataclass
class Dataset:
    """Images in [0,1], integer labels, and the training-split normalization stats."""

    images: np.ndarray  # [M, c, H, W], float32 in [0, 1]
    labels: np.ndarray  # [M], int64 in [0, num_classes)
    split: str
    num_classes: int
    mean: np.ndarray | None = None  # per-channel, from the training split
    std: np.ndarray | None = None

    def __post_init__(self):
        if len(self.labels) != len(self.images):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])


@dataclass(frozen=True)
class AugmentPolicy:
    """Reflect-pad + random crop + horizontal flip, training batches only."""

    pad: int = 4
    crop: tuple | None = None  # (H, W); defaults to the original size
    hflip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0,1], got {self.hflip_prob}")


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from and how big the task is."""

    kind: str = "synth"  # synth | cifar | idx
    path: str = ""
    num_classes: int = 4
    image_size: tuple = (1, 12, 12)  # (c, H, W)
    train_samples: int = 2000
    test_samples: int = 1000
    noise: float = 0.55
    jitter: int = 0  # max per-sample cyclic shift, pixels
    task_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synth", "cifar", "idx"):
            raise ValueError(f"dataset kind must be synth, cifar, or idx, got {self.kind!r}")
        if self.kind != "synth" and not self.path:
            raise ValueError("dataset.path is required for binary dataset kinds")
        if self.num_classes < 2:
            raise ValueError(f"dataset.num_classes must be >= 2, got {self.num_classes}")


# -- normalization -----------------------------------------------------------------


def compute_normalization(images: np.ndarray):
    """Per-channel mean/std over all pixels; std floored to stay positive."""
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.maximum(std, STD_FLOOR)
    return mean, std


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    return (images - mean[None, :, None, None]) / std[None, :, None, None]


# -- synthetic task ------------------------------------------------------------------


def _class_patterns(num_classes, image_size, task_seed):
    """One base pattern per class: an axis-aligned grating plus a placed blob.

    Classes cycle through horizontal/vertical orientation crossed with a
    frequency ladder, so they stay distinguishable when samples are
    cyclically shifted (jitter) and when training flips images horizontally
    (axis-aligned gratings map to themselves under a mirror).  Patterns
    depend only on (num_classes, image_size, task_seed), so train and test
    splits sampled with different seeds share the same task.
    """
    c, h, w = image_size
    ys, xs = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    patterns = np.empty((num_classes, c, h, w))
    for k in range(num_classes):
        rng = derive_rng(task_seed, TAG_PATTERN, k)
        coord = xs if k % 2 == 0 else ys
        freq = 1.5 + 1.4 * (k // 2)
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.sin(2 * np.pi * freq * coord + phase)
        cy, cx = rng.uniform(0.25, 0.75, size=2)
        blob = np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / 0.02))
        base = 0.5 + 0.22 * grating + 0.22 * blob
        for ch in range(c):
            shift = 0.05 * ch
            patterns[k, ch] = np.clip(base + shift * grating, 0.0, 1.0)
    return patterns


def synth_dataset(num_classes, num_samples, image_size=(1, 12, 12), seed=0,
                  noise=0.55, jitter=0, task_seed=0, split="train") -> Dataset:
    """Balanced class-conditional images: shared base pattern + pixel noise.

    ``jitter`` cyclically shifts each sample's pattern by up to that many
    pixels per axis before noise is added.  Shifted patterns defeat linear
    template matching, so raising jitter (like raising noise) lowers
    separability in a way that rewards deeper feature extractors.
    """
    if num_samples < num_classes:
        raise ValueError(
            f"need at least one sample per class: {num_samples} < {num_classes}"
        )
    patterns = _class_patterns(num_classes, image_size, task_seed)
    labels = (np.arange(num_samples) % num_classes).astype(np.int64)
    rng = derive_rng(seed, TAG_SAMPLES, 0 if split == "train" else 1)
    images = patterns[labels]
    if jitter > 0:
        shifts = rng.integers(-jitter, jitter + 1, size=(num_samples, 2))
        images = np.stack([
            np.roll(img, (dy, dx), axis=(1, 2))
            for img, (dy, dx) in zip(images, shifts)
        ])
    if noise > 0:
        images = images + noise * rng.normal(size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images=images, labels=labels, split=split, num_classes=num_classes)


# -- binary formats -----------------------------------------------------------------


def _load_cifar_like(path, num_classes, image_size):
    c, h, w = image_size
    record = 1 + c * h * w
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % record != 0:
        raise DataFormatError(
            f"file size {len(raw)} is not a multiple of the {record}-byte record "
            f"(1 label byte + {c}*{h}*{w} pixel bytes)",
            path=path,
            offset=(len(raw) // record) * record,
        )
    count = len(raw) // record
    data = np.frombuffer(raw, dtype=np.uint8).reshape(count, record)
    labels = data[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(
            f"record {i} has label {labels[i]} >= num_classes {num_classes}",
            path=path,
            offset=i * record,
        )
    images = data[:, 1:].reshape(count, c, h, w).astype(np.float32) / 255.0
    return images, labels


def _read_idx(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError("idx header truncated", path=path, offset=len(raw))
    zero1, zero2, code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0 or code != 0x08:
        raise DataFormatError(
            f"unsupported idx magic {raw[:4].hex()} (expecting unsigned-byte data)",
            path=path,
            offset=0,
        )
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError("idx dimension table truncated", path=path, offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DataFormatError(
            f"idx payload has {len(raw) - header} bytes, expected {expected - header}",
            path=path,
            offset=min(len(raw), expected),
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _load_idx_like(path, num_classes):
    root = Path(path)
    images_path, labels_path = root / "images.idx", root / "labels.idx"
    for p in (images_path, labels_path):
        if not p.is_file():
            raise DataFormatError(f"missing {p.name} in idx dataset directory", path=root)
    imgs = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if labels.ndim != 1:
        raise DataFormatError(f"labels.idx must be 1-D, got {labels.ndim}-D", path=labels_path)
    if imgs.ndim == 3:
        imgs = imgs[:, None, :, :]
    elif imgs.ndim != 4:
        raise DataFormatError(
            f"images.idx must be 3-D or 4-D, got {imgs.ndim}-D", path=images_path
        )
    if len(imgs) != len(labels):
        raise DataFormatError(
            f"{len(imgs)} images but {len(labels)} labels", path=root
        )
    labels = labels.astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(
            f"record {i} has label {labels[i]} >= num_classes {num_classes}",
            path=labels_path,
            offset=4 + 4 * 1 + i,
        )
    return imgs.astype(np.float32) / 255.0, labels


def load_binary_dataset(path, fmt, *, num_classes, image_size=None, split="train") -> Dataset:
    """Load a cifar-like record file or an idx-like directory."""
    if fmt == "cifar-like":
        if image_size is None:
            raise ValueError("cifar-like loading needs image_size=(c,H,W)")
        images, labels = _load_cifar_like(path, num_classes, image_size)
    elif fmt == "idx-like":
        images, labels = _load_idx_like(path, num_classes)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    return Dataset(images=images, labels=labels, split=split, num_classes=num_classes)


def load_datasets(spec: DatasetSpec, seed: int):
    """Build (train, test) per the spec; stats come from the train split only."""
    if spec.kind == "synth":
        train = synth_dataset(spec.num_classes, spec.train_samples, spec.image_size,
                              seed=seed, noise=spec.noise, jitter=spec.jitter,
                              task_seed=spec.task_seed, split="train")
        test = synth_dataset(spec.num_classes, spec.test_samples, spec.image_size,
                             seed=seed, noise=spec.noise, jitter=spec.jitter,
                             task_seed=spec.task_seed, split="test")
    else:
        fmt = "cifar-like" if spec.kind == "cifar" else "idx-like"
        root = Path(spec.path)
        if fmt == "cifar-like":
            train = load_binary_dataset(root / "train.bin", fmt, num_classes=spec.num_classes,
                                        image_size=spec.image_size, split="train")
            test = load_binary_dataset(root / "test.bin", fmt, num_classes=spec.num_classes,
                                       image_size=spec.image_size, split="test")
        else:
            train = load_binary_dataset(root / "train", fmt, num_classes=spec.num_classes,
                                        split="train")
            test = load_binary_dataset(root / "test", fmt, num_classes=spec.num_classes,
                                       split="test")
    mean, std = compute_normalization(train.images)
    train = replace(train, mean=mean, std=std)
    test = replace(test, mean=mean, std=std)
    return train, test


# -- augmentation ---------------------------------------------------------------------


def hflip(images: np.ndarray) -> np.ndarray:
    """Mirror along the width axis (an involution)."""
    return images[..., ::-1].copy()


def augment(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad, random-crop back to the target size, then random flips."""
    if not policy.enabled or (policy.pad == 0 and policy.hflip_prob == 0.0):
        return images.copy()
    b, c, h, w = images.shape
    crop_h, crop_w = policy.crop if policy.crop is not None else (h, w)
    if policy.pad:
        if crop_h > h + 2 * policy.pad or crop_w > w + 2 * policy.pad:
            raise ValueError(
                f"crop {crop_h}x{crop_w} exceeds padded size "
                f"{h + 2 * policy.pad}x{w + 2 * policy.pad}"
            )
        padded = np.pad(images, ((0, 0), (0, 0), (policy.pad, policy.pad),
                                 (policy.pad, policy.pad)), mode="reflect")
        out = np.empty((b, c, crop_h, crop_w), dtype=images.dtype)
        max_y = padded.shape[2] - crop_h
        max_x = padded.shape[3] - crop_w
        ys = rng.integers(0, max_y + 1, size=b)
        xs = rng.integers(0, max_x + 1, size=b)
        for i in range(b):
            out[i] = padded[i, :, ys[i] : ys[i] + crop_h, xs[i] : xs[i] + crop_w]
    else:
        out = images.copy()
    if policy.hflip_prob > 0:
        flips = rng.random(b) < policy.hflip_prob
        out[flips] = out[flips][..., ::-1]
    return out


# -- batch iteration ------------------------------------------------------------------


def epoch_batches(dataset: Dataset, batch_size: int, epoch: int, seed: int,
                  policy: AugmentPolicy | None = None, dtype=np.float32):
    """Shuffled, augmented, normalized batches covering each index exactly once.

    The shuffle order comes from the (seed, TAG_ORDER, epoch) stream and the
    augmentation noise from (seed, TAG_AUGMENT, epoch); changing augmentation
    or loss settings never perturbs the visit order.
    """
    if dataset.mean is None or dataset.std is None:
        raise ValueError("dataset has no normalization stats; load via load_datasets")
    order = derive_rng(seed, TAG_ORDER, epoch).permutation(len(dataset))
    aug_rng = derive_rng(seed, TAG_AUGMENT, epoch)
    for lo in range(0, len(order), batch_size):
        idx = order[lo : lo + batch_size]
        images = dataset.images[idx]
        if policy is not None and policy.enabled and dataset.split == "train":
            images = augment(images, policy, aug_rng)
        x = normalize(images, dataset.mean, dataset.std).astype(dtype)
        yield x, dataset.labels[idx]


def eval_batches(dataset: Dataset, batch_size: int, dtype=np.float32):
    """In-order, un-augmented, normalized batches for evaluation."""
    if dataset.mean is None or dataset.std is None:
        raise ValueError("dataset has no normalization stats; load via load_datasets")
    for lo in range(0, len(dataset), batch_size):
        images = dataset.images[lo : lo + batch_size]
        x = normalize(images, dataset.mean, dataset.std).astype(dtype)
        yield x, dataset.labels[lo : lo + batch_size]

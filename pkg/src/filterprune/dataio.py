"""CIFAR-10 binary loader, synthetic imbalanced image generator and batch sampling."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

# per-class training counts of the imbalanced and balanced presets
PRESETS = {
    "idrid": (177, 41, 195),
    "isic": (374, 254, 1372),
    "balanced3": (150, 150, 150),
}


class ConfigError(ValueError):
    """Unparseable key = value config."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N, C, H, W float32 in [0, 1]
    labels: np.ndarray  # N int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on N")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------- CIFAR-10


def read_cifar_binary(path):
    """Parse one CIFAR-10 binary batch file: 1 label byte + R, G, B planes per record."""
    size = os.path.getsize(path)
    if size % CIFAR_RECORD:
        raise ValueError(f"{path}: size {size} is not a multiple of {CIFAR_RECORD}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory):
    directory = Path(directory)
    parts = []
    for name in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]:
        p = directory / name
        if not p.exists():
            raise FileNotFoundError(f"missing CIFAR-10 batch file {p}")
        parts.append(read_cifar_binary(p))
    train_x = np.concatenate([p[0] for p in parts[:-1]])
    train_y = np.concatenate([p[1] for p in parts[:-1]])
    return (
        Dataset(train_x, train_y, 10, "train"),
        Dataset(parts[-1][0], parts[-1][1], 10, "validation"),
    )


def write_cifar_binary(path, images_u8, labels):
    """Inverse of read_cifar_binary; used to build fixtures."""
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    flat = np.asarray(images_u8, dtype=np.uint8).reshape(labels.shape[0], -1)
    with open(path, "wb") as fh:
        fh.write(np.concatenate([labels, flat], axis=1).tobytes())


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class Motif:
    """Oriented grating plus a Gaussian blob; one per class."""
    angle: float  # radians
    frequency: float  # cycles per image width
    blob: tuple = (0.5, 0.5)  # centre as fraction of H, W
    channel_gain: tuple = (1.0, 1.0, 1.0)


DEFAULT_MOTIFS = (
    Motif(0.0, 3.0, (0.3, 0.3), (1.0, 0.8, 0.6)),
    Motif(np.pi / 4, 5.0, (0.7, 0.6), (0.7, 1.0, 0.8)),
    Motif(np.pi / 2, 2.0, (0.5, 0.75), (0.6, 0.8, 1.0)),
    Motif(3 * np.pi / 4, 4.0, (0.25, 0.7), (0.9, 0.6, 0.9)),
    Motif(np.pi / 8, 6.0, (0.75, 0.25), (0.8, 0.9, 0.6)),
    Motif(5 * np.pi / 8, 3.5, (0.5, 0.5), (1.0, 1.0, 0.7)),
)


@dataclass(frozen=True)
class SyntheticSpec:
    per_class_counts: tuple = PRESETS["idrid"]
    image_size: tuple = (3, 32, 32)
    noise_std: float = 0.35
    contrast: float = 0.25
    seed: int = 0
    motifs: tuple = field(default=DEFAULT_MOTIFS, compare=False)
    val_fraction: float = 0.25

    def __post_init__(self):
        if len(self.per_class_counts) < 2:
            raise ValueError("a synthetic spec needs at least 2 classes")
        if any(int(c) < 1 for c in self.per_class_counts):
            raise ValueError(f"every class needs at least one sample, got {self.per_class_counts}")
        if len(self.per_class_counts) > len(self.motifs):
            raise ValueError(f"only {len(self.motifs)} motifs are defined")

    @property
    def validation_counts(self):
        return tuple(max(1, int(round(c * self.val_fraction))) for c in self.per_class_counts)


def motif_image(motif, image_size, contrast):
    c, h, w = image_size
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    phase = 2 * np.pi * motif.frequency * (xx * np.cos(motif.angle) + yy * np.sin(motif.angle))
    grating = np.sin(phase)
    cy, cx = motif.blob
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.12 ** 2))
    base = 0.6 * grating + 0.8 * blob - 0.4
    gains = np.resize(np.asarray(motif.channel_gain, dtype=np.float64), c)
    img = 0.5 + contrast * gains[:, None, None] * base[None]
    return img


def _render(spec, counts, rng):
    images, labels = [], []
    for k, n in enumerate(counts):
        base = motif_image(spec.motifs[k], spec.image_size, spec.contrast)
        noise = rng.standard_normal((int(n),) + tuple(spec.image_size)) * spec.noise_std
        images.append(np.clip(base[None] + noise, 0.0, 1.0))
        labels.append(np.full(int(n), k, dtype=np.int64))
    x = np.concatenate(images).astype(np.float32)
    y = np.concatenate(labels)
    order = rng.permutation(y.size)
    return x[order], y[order]


def generate_synthetic(spec):
    """Deterministic per-class motifs plus Gaussian pixel noise, clipped to [0, 1]."""
    train_seq, val_seq = np.random.SeedSequence(spec.seed).spawn(2)
    k = len(spec.per_class_counts)
    tx, ty = _render(spec, spec.per_class_counts, np.random.default_rng(train_seq))
    vx, vy = _render(spec, spec.validation_counts, np.random.default_rng(val_seq))
    return Dataset(tx, ty, k, "train"), Dataset(vx, vy, k, "validation")


def parse_kv(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _ints(value):
    return tuple(int(v) for v in value.replace(",", " ").split())


def synthetic_spec_from_dict(d):
    kwargs = {}
    try:
        for key, value in d.items():
            if key == "preset":
                kwargs["per_class_counts"] = PRESETS[value]
            elif key == "per_class_counts":
                kwargs["per_class_counts"] = _ints(value)
            elif key == "image_size":
                kwargs["image_size"] = _ints(value)
            elif key in ("noise_std", "contrast", "val_fraction"):
                kwargs[key] = float(value)
            elif key == "seed":
                kwargs["seed"] = int(value)
            else:
                raise ConfigError(f"unknown synthetic spec key {key!r}")
    except KeyError as e:
        raise ConfigError(f"unknown preset {e}") from None
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
    return SyntheticSpec(**kwargs)


def load_synthetic_spec(path):
    return synthetic_spec_from_dict(parse_kv(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- sampling


def sample_batch(dataset, batch_size, seed):
    """Uniform sample without replacement; returns (images, labels)."""
    n = len(dataset)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    idx = np.random.default_rng(seed).choice(n, size=batch_size, replace=False)
    return dataset.images[idx], dataset.labels[idx]


def augment(images, rng, pad=4):
    """Random horizontal flip and padded random crop."""
    n, c, h, w = images.shape
    flip = rng.random(n) < 0.5
    out = np.where(flip[:, None, None, None], images[..., ::-1], images)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    res = np.empty_like(images)
    for i in range(n):
        res[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return res

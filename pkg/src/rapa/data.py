"""ShapeSet: eight parametric 16x16 glyph classes with translation and noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container

SIZE = 16
N_CLASSES = 8
CLASS_NAMES = ("hbar", "vbar", "diagonal", "cross", "disk", "ring", "square", "checker")
MAGIC = b"RPDS"

# glyph intensity `contrast` over a flat `background`, before noise and clipping
DEFAULT_DATA = {"noise": 0.05, "max_translation": 1, "contrast": 0.15, "background": 0.425,
                "train_per_class": 512, "test_per_class": 128}


@dataclass(frozen=True)
class ShapeSetConfig:
    samples_per_class: int = DEFAULT_DATA["train_per_class"]
    noise: float = DEFAULT_DATA["noise"]
    max_translation: int = DEFAULT_DATA["max_translation"]
    seed: int = 0
    contrast: float = DEFAULT_DATA["contrast"]
    background: float = DEFAULT_DATA["background"]

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 <= self.max_translation <= 3:
            raise ValueError("max_translation must be in [0, 3]")
        if not 0 <= self.background <= self.background + self.contrast <= 1:
            raise ValueError("background and background + contrast must lie in [0, 1]")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 16, 16, 1) float64, values in [0, 1]
    labels: np.ndarray  # (N,) int64
    targets: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        tg = None if self.targets is None else self.targets[idx]
        return Dataset(self.images[idx], self.labels[idx], tg, dict(self.meta))


def _templates() -> np.ndarray:
    r, c = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    cy = cx = 7.5
    d = np.hypot(r - cy, c - cx)
    box = (r >= 3) & (r <= 12) & (c >= 3) & (c <= 12)
    hbar = box & (r >= 7) & (r <= 8)
    vbar = box & (c >= 7) & (c <= 8)
    diag = box & (np.abs(r - c) <= 1)
    cross = hbar | vbar
    disk = d <= 4.2
    ring = (d >= 3.0) & (d <= 4.6)
    inner = (r >= 4) & (r <= 11) & (c >= 4) & (c <= 11)
    square = inner & ~((r >= 5) & (r <= 10) & (c >= 5) & (c <= 10))
    checker = inner & ((((r - 4) // 2) + ((c - 4) // 2)) % 2 == 0)
    return np.stack([hbar, vbar, diag, cross, disk, ring, square, checker]).astype(np.float64)


TEMPLATES = _templates()


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def generate_shapeset(config: ShapeSetConfig) -> Dataset:
    """Balanced, shuffled, deterministic given ``config.seed``.

    Pixel values are rounded to float32 so a dataset file round-trips exactly.
    """
    rng = np.random.default_rng(config.seed)
    n = config.samples_per_class * N_CLASSES
    labels = np.repeat(np.arange(N_CLASSES), config.samples_per_class)
    labels = labels[rng.permutation(n)]
    t = config.max_translation
    shifts = rng.integers(-t, t + 1, size=(n, 2))
    noise = rng.normal(0.0, 1.0, size=(n, SIZE, SIZE)) * config.noise
    images = np.empty((n, SIZE, SIZE))
    for i in range(n):
        images[i] = _shift(TEMPLATES[labels[i]], *shifts[i])
    images = config.background + config.contrast * images
    images = np.clip(images + noise, 0.0, 1.0).astype(np.float32).astype(np.float64)
    meta = {"samples_per_class": config.samples_per_class, "noise": config.noise,
            "max_translation": config.max_translation, "seed": config.seed,
            "contrast": config.contrast, "background": config.background}
    return Dataset(images[..., None], labels.astype(np.int64), None, meta)


def default_splits(seed: int = 0, noise: float = DEFAULT_DATA["noise"],
                   max_translation: int = DEFAULT_DATA["max_translation"],
                   contrast: float = DEFAULT_DATA["contrast"],
                   background: float = DEFAULT_DATA["background"],
                   train_per_class: int = DEFAULT_DATA["train_per_class"],
                   test_per_class: int = DEFAULT_DATA["test_per_class"]):
    """4096/1024 train/test split from two independent seeds."""
    def make(per_class, s):
        return generate_shapeset(ShapeSetConfig(per_class, noise, max_translation, s,
                                                contrast, background))
    return make(train_per_class, 2 * seed), make(test_per_class, 2 * seed + 1)


def assign_targets(dataset: Dataset, rule: str = "next_class", seed: int = 0) -> Dataset:
    y = dataset.labels
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise ValueError("labels out of range")
    if rule == "next_class":
        tg = (y + 1) % N_CLASSES
    elif rule == "random_excluding_true":
        rng = np.random.default_rng(seed)
        off = rng.integers(1, N_CLASSES, size=len(y))
        tg = (y + off) % N_CLASSES
    else:
        raise ValueError(f"unknown target rule {rule!r}")
    meta = dict(dataset.meta, target_rule=rule, target_seed=seed)
    return Dataset(dataset.images, dataset.labels, tg.astype(np.int64), meta)


def save_dataset(dataset: Dataset, path) -> None:
    tensors = [("images", "f32", dataset.images), ("labels", "u8", dataset.labels)]
    if dataset.targets is not None:
        tensors.append(("targets", "u8", dataset.targets))
    header = {"kind": "shapeset", "count": len(dataset), "shape": [SIZE, SIZE, 1],
              "meta": dataset.meta}
    container.write(path, MAGIC, header, tensors)


def load_dataset(path) -> Dataset:
    header, arrays = container.read(path, MAGIC)
    tg = arrays.get("targets")
    return Dataset(arrays["images"].astype(np.float64), arrays["labels"].astype(np.int64),
                   None if tg is None else tg.astype(np.int64), header.get("meta", {}))

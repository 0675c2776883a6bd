"""Image datasets: class-folder and index-file ingestion, plus in-memory arrays."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".gif", ".tif", ".tiff", ".webp"}


@dataclass
class ImageDataset:
    """Images held in memory as uint8 arrays (H, W, C) with integer labels."""

    images: np.ndarray | list
    labels: np.ndarray
    paths: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx: int) -> np.ndarray:
        return self.images[idx]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        images = self.images[indices] if isinstance(self.images, np.ndarray) else [self.images[i] for i in indices]
        paths = [self.paths[i] for i in indices] if self.paths else []
        return ImageDataset(images, self.labels[indices], paths, list(self.class_names))

    def save_npz(self, path):
        np.savez_compressed(path, images=np.asarray(self.images), labels=self.labels, class_names=np.asarray(self.class_names))

    @classmethod
    def load_npz(cls, path) -> "ImageDataset":
        with np.load(path) as f:
            names = [str(n) for n in f["class_names"]] if "class_names" in f else []
            return cls(f["images"], f["labels"], [], names)


def _load_image(path, size: int | None, channels: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        if size is not None:
            w, h = im.size
            scale = size / min(w, h)
            if scale != 1:
                im = im.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return arr if arr.ndim == 3 else arr[:, :, None]


def load_image_folder(root, size: int | None = None, channels: int = 3) -> ImageDataset:
    """One subdirectory per class; classes are numbered in sorted name order."""
    root = Path(root)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise ValueError(f"no class subdirectories under {root}")
    images, labels, paths = [], [], []
    for label, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() in IMAGE_EXTENSIONS:
                images.append(_load_image(f, size, channels))
                labels.append(label)
                paths.append(str(f))
    if not images:
        raise ValueError(f"no images found under {root}")
    return ImageDataset(_maybe_stack(images), np.asarray(labels), paths, classes)


def load_index_file(index_path, size: int | None = None, channels: int = 3) -> ImageDataset:
    """Lines of ``<path> <integer label>``; relative paths resolve against the index file."""
    index_path = Path(index_path)
    images, labels, paths = [], [], []
    for lineno, line in enumerate(index_path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            path, label = line.rsplit(maxsplit=1)
            label = int(label)
        except ValueError:
            raise ValueError(f"{index_path}:{lineno}: expected '<path> <label>'") from None
        full = Path(path) if os.path.isabs(path) else index_path.parent / path
        images.append(_load_image(full, size, channels))
        labels.append(label)
        paths.append(str(full))
    if not images:
        raise ValueError(f"{index_path} lists no images")
    return ImageDataset(_maybe_stack(images), np.asarray(labels), paths)


def load_dataset(source, size: int | None = None, channels: int = 3) -> ImageDataset:
    """Class folder, index file, or a ``.npz`` archive written by :meth:`ImageDataset.save_npz`."""
    source = Path(source)
    if source.is_dir():
        return load_image_folder(source, size, channels)
    if source.suffix == ".npz":
        return ImageDataset.load_npz(source)
    return load_index_file(source, size, channels)


def _maybe_stack(images: list[np.ndarray]):
    shapes = {im.shape for im in images}
    return np.stack(images) if len(shapes) == 1 else images


def train_test_split(dataset: ImageDataset, test_fraction: float = 0.2, seed: int = 0):
    """Stratified split; every class keeps at least one training image."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(dataset.labels):
        idx = rng.permutation(np.nonzero(dataset.labels == c)[0])
        n_test = min(int(round(len(idx) * test_fraction)), len(idx) - 1)
        test_idx.extend(idx[:n_test].tolist())
        train_idx.extend(idx[n_test:].tolist())
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(test_idx))


SHAPES = ("disk", "square", "triangle", "ring", "plus", "star", "bar", "crescent", "frame", "ell")


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Boolean mask of a unit-size shape in rotated, centered coordinates (u, v)."""
    r = np.hypot(u, v)
    theta = np.arctan2(v, u)
    if kind == "disk":
        return r <= 0.9
    if kind == "square":
        return np.maximum(abs(u), abs(v)) <= 0.75
    if kind == "triangle":
        return (v >= -0.5) & (abs(u) <= 0.866 * (1.0 - v) / 1.5)
    if kind == "ring":
        return (r <= 1.0) & (r >= 0.6)
    if kind == "plus":
        return ((abs(u) <= 0.28) & (abs(v) <= 1.0)) | ((abs(v) <= 0.28) & (abs(u) <= 1.0))
    if kind == "star":
        return r <= 0.35 + 0.65 * ((np.cos(5 * theta) + 1) / 2) ** 3
    if kind == "bar":
        return (abs(u) <= 1.0) & (abs(v) <= 0.25)
    if kind == "crescent":
        return (r <= 1.0) & (np.hypot(u - 0.5, v) > 0.75)
    if kind == "frame":
        m = np.maximum(abs(u), abs(v))
        return (m <= 0.85) & (m >= 0.5)
    if kind == "ell":
        return ((abs(u + 0.6) <= 0.3) & (abs(v) <= 1.0)) | ((abs(v - 0.7) <= 0.3) & (abs(u) <= 0.9))
    raise ValueError(f"unknown shape {kind!r}")


def make_shapes_dataset(n_images: int = 5000, size: int = 64, seed: int = 0, n_classes: int = 10,
                        objects: tuple[int, int] = (2, 4), clutter: int = 3,
                        scale: tuple[float, float] = (0.16, 0.26)) -> ImageDataset:
    """Procedural images whose label is the shape class repeated across the scene.

    Each image holds a few dark or bright instances of its class shape at
    random positions, scales and rotations over a gray, softly shaded
    background, plus thin colored scratches as distractors. Class identity
    lives in shape alone; balanced classes, uint8 RGB.
    """
    if not 1 <= n_classes <= len(SHAPES):
        raise ValueError(f"n_classes must lie in [1, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    labels = np.arange(n_images) % n_classes
    rng.shuffle(labels)
    images = np.empty((n_images, size, size, 3), dtype=np.uint8)
    for n, label in enumerate(labels):
        c0 = np.full(3, rng.uniform(0.4, 0.6))
        c1 = c0 + rng.uniform(-0.1, 0.1)
        angle = rng.uniform(0, 2 * np.pi)
        t = ((xx - size / 2) * np.cos(angle) + (yy - size / 2) * np.sin(angle)) / size + 0.5
        img = c0 * (1 - t[..., None]) + c1 * t[..., None]
        for _ in range(clutter):
            px, py = rng.uniform(0, size, 2)
            ang = rng.uniform(0, np.pi)
            length = rng.uniform(0.1, 0.3) * size
            rx, ry = xx - px, yy - py
            along = rx * np.cos(ang) + ry * np.sin(ang)
            across = -rx * np.sin(ang) + ry * np.cos(ang)
            img[(abs(along) <= length / 2) & (abs(across) <= 0.8)] = rng.uniform(0.0, 1.0, size=3)
        for _ in range(rng.integers(objects[0], objects[1] + 1)):
            radius = rng.uniform(*scale) * size
            cy, cx = rng.uniform(radius, size - radius, 2)
            rot = rng.uniform(0, 2 * np.pi)
            du, dv = (xx - cx) / radius, (yy - cy) / radius
            u = du * np.cos(rot) + dv * np.sin(rot)
            v = -du * np.sin(rot) + dv * np.cos(rot)
            dark, bright = rng.uniform(0.0, 0.25), rng.uniform(0.75, 1.0)
            img[_shape_mask(SHAPES[label], u, v)] = rng.choice([dark, bright])
        img = img + rng.normal(0, 0.04, size=img.shape)
        images[n] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    return ImageDataset(images, labels, [], list(SHAPES[:n_classes]))

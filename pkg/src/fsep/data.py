"""Datasets: Omniglot-style image folders, rotation augmentation, synthetic Gaussians, splits."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import (
    EmptyDirectory,
    InvalidArgument,
    NonSquareImage,
    OverlappingSplits,
    UnknownLabel,
    UnreadableImage,
)

IMAGE_SIZE = 28
ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class ClassRecord:
    label: str
    examples: np.ndarray  # [n_examples, *feature_shape]

    def __post_init__(self):
        if len(self.examples) == 0:
            raise InvalidArgument(f"class {self.label!r} has no examples")

    def __len__(self):
        return len(self.examples)


@dataclass(frozen=True)
class Dataset:
    classes: tuple[ClassRecord, ...]
    feature_shape: tuple[int, ...]

    def __post_init__(self):
        seen = set()
        for rec in self.classes:
            if tuple(rec.examples.shape[1:]) != tuple(self.feature_shape):
                raise InvalidArgument(
                    f"class {rec.label!r} examples have shape {rec.examples.shape[1:]}, expected {self.feature_shape}"
                )
            if rec.label in seen:
                raise InvalidArgument(f"duplicate class label {rec.label!r}")
            seen.add(rec.label)

    def __len__(self):
        return len(self.classes)

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.classes]

    def counts(self) -> list[int]:
        return [len(c) for c in self.classes]


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    if h % size == 0 and w % size == 0:
        fh, fw = h // size, w // size
        return img.reshape(size, fh, size, fw).mean(axis=(1, 3))
    pil = Image.fromarray(img.astype(np.float32), mode="F")
    return np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float64)


def _read_png(path: str, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except Exception as exc:
        raise UnreadableImage(f"cannot read image {path}: {exc}") from exc
    return _resize(arr, size) / 255.0


def load_image_folder(path: str, size: int = IMAGE_SIZE) -> Dataset:
    """Load ``path/<class>/<image>.png`` as a dataset of [1, size, size] float arrays in [0, 1]."""
    if not os.path.isdir(path):
        raise EmptyDirectory(f"not a directory: {path}")
    class_dirs = sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))
    if not class_dirs:
        raise EmptyDirectory(f"no class directories in {path}")
    classes = []
    for name in class_dirs:
        cdir = os.path.join(path, name)
        files = sorted(f for f in os.listdir(cdir) if f.lower().endswith(".png"))
        if not files:
            raise EmptyDirectory(f"class directory {cdir} contains no PNG images")
        imgs = [_read_png(os.path.join(cdir, f), size) for f in files]
        arr = np.clip(np.stack(imgs)[:, None, :, :], 0.0, 1.0).astype(np.float32)
        classes.append(ClassRecord(name, arr))
    return Dataset(tuple(classes), (1, size, size))


def augment_rotations(d: Dataset) -> Dataset:
    """Quadruple the classes with 0/90/180/270 degree rotations, rotation-major order."""
    shape = d.feature_shape
    if len(shape) != 3 or shape[1] != shape[2]:
        raise NonSquareImage(f"rotation needs square [c, n, n] images, got {list(shape)}")
    out = []
    for q, deg in enumerate(ROTATIONS):
        for rec in d.classes:
            ex = rec.examples if q == 0 else np.ascontiguousarray(np.rot90(rec.examples, k=q, axes=(2, 3)))
            out.append(ClassRecord(f"{rec.label}_rot{deg}", ex))
    return Dataset(tuple(out), shape)


def synth_gaussians(L: int, H: int, dim: int, separation: float, noise: float, seed: int) -> Dataset:
    """Gaussian blobs whose means lie uniformly on a sphere of radius ``separation``."""
    if L < 2 or H < 2 or dim < 2:
        raise InvalidArgument("synth_gaussians needs L >= 2, H >= 2, dim >= 2")
    if not (separation > 0 and noise > 0):
        raise InvalidArgument("separation and noise must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((L, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    width = len(str(L - 1))
    classes = []
    for j in range(L):
        ex = means[j] + noise * rng.standard_normal((H, dim))
        classes.append(ClassRecord(f"c{j:0{width}d}", ex))
    return Dataset(tuple(classes), (dim,))


def subset(d: Dataset, labels) -> Dataset:
    index = {c.label: c for c in d.classes}
    missing = [lab for lab in labels if lab not in index]
    if missing:
        raise UnknownLabel(f"unknown class labels: {missing[:5]}")
    return Dataset(tuple(index[lab] for lab in labels), d.feature_shape)


def split(d: Dataset, train_labels, val_labels, test_labels) -> tuple[Dataset, Dataset, Dataset]:
    """Class-disjoint train/val/test restriction; each output keeps the listed order."""
    lists = [list(train_labels), list(val_labels), list(test_labels)]
    seen: dict[str, int] = {}
    for i, labels in enumerate(lists):
        for lab in labels:
            if lab in seen:
                raise OverlappingSplits(f"label {lab!r} appears in more than one split")
            seen[lab] = i
    return tuple(subset(d, labels) for labels in lists)  # type: ignore[return-value]

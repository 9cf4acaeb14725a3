"""Dataset registry and synthetic generators.

The registry maps names to DatasetHandle factories. Synthetic generators
ship in-repo so the whole pipeline runs offline; real datasets plug in
through `register_dataset` with a loader that yields labeled train/test
ImageBatches. Registered placeholders for the usual benchmark datasets
(cifar10, cifar100, fashion-mnist, ...) raise with instructions instead of
downloading anything.

Loader conventions for real datasets:
    - labels are class ids in [0, num_classes)
    - cifar100 uses the 20 coarse-grained classes
    - detection-style sources (e.g. DIOR) should be pre-cropped to their
      bounding boxes, keeping objects of at least 120 px per axis and classes
      with more than 50 images
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backbone import ImageBatch
from .exceptions import DataError


@dataclass
class DatasetHandle:
    name: str
    num_classes: int
    loader: Callable[[], tuple[ImageBatch, ImageBatch]]
    class_names: list[str]

    def load(self) -> tuple[ImageBatch, ImageBatch]:
        train, test = self.loader()
        for split_name, batch in (("train", train), ("test", test)):
            if batch.labels is None:
                raise DataError(f"{self.name} {split_name} split is missing labels")
            if batch.labels.min() < 0 or batch.labels.max() >= self.num_classes:
                raise DataError(f"{self.name} {split_name} labels outside "
                                f"[0, {self.num_classes})")
        return train, test


_REGISTRY: dict[str, Callable[..., DatasetHandle]] = {}


def register_dataset(name: str, factory: Callable[..., DatasetHandle]) -> None:
    _REGISTRY[name] = factory


def get_dataset(name: str, **kwargs) -> DatasetHandle:
    if name not in _REGISTRY:
        raise DataError(f"unknown dataset {name!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[name](**kwargs)


def list_datasets() -> list[str]:
    return sorted(_REGISTRY)


# ---------------------------------------------------------------------------
# synthetic image dataset: textured class templates + within-class texture jitter

def _texture_basis(rng: np.random.Generator, size: int, count: int,
                   tile: int) -> np.ndarray:
    """Orthonormal bank of tiled texture fields, (count, size, size, 3).

    Each basis element is one orthonormal tile x tile x 3 pattern repeated
    across the image. Class templates and within-class jitter are both drawn
    from this bank, so the whole class structure lives in one low-dimensional,
    well-conditioned pixel subspace that survives token averaging inside a
    transformer whose patch grid aligns with the tiling; the downstream
    explained-variance cutoff then keeps it nearly intact.
    """
    if size % tile != 0:
        raise ValueError(f"image size {size} not divisible by tile {tile}")
    dim = tile * tile * 3
    if count > dim:
        raise ValueError(f"basis_dim {count} exceeds tile capacity {dim}")
    raw = rng.normal(size=(count, dim))
    raw -= raw.mean(axis=1, keepdims=True)
    patterns, _ = np.linalg.qr(raw.T)
    patterns = patterns.T.reshape(count, tile, tile, 3)
    reps = size // tile
    return np.tile(patterns, (1, reps, reps, 1)) / reps  # unit L2 norm per field


def make_blob_image_dataset(num_classes: int = 4, train_per_class: int = 200,
                            test_per_class: int = 50, image_size: int = 32,
                            template_scale: float = 7.0, jitter_scale: float = 1.0,
                            noise: float = 0.01, overlap: float = 0.0,
                            basis_dim: int = 16, tile: int = 8,
                            seed: int = 0, name: str = "synthetic-blobs") -> DatasetHandle:
    """Image classes around distinct texture templates.

    Each class template is gray plus template_scale times one orthonormal
    texture; every sample adds jitter_scale-weighted random coefficients over
    the whole texture bank plus iid pixel noise. `overlap` in [0, 1] pulls
    the class templates toward their mean; 0 keeps them well separated, 1
    collapses them onto one texture.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if basis_dim < num_classes:
        raise ValueError("basis_dim must be >= num_classes")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must be in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E57]))
    basis = _texture_basis(rng, image_size, basis_dim, tile)
    class_tex = basis[:num_classes]
    class_tex = (1.0 - overlap) * class_tex + overlap * class_tex.mean(axis=0)
    templates = 0.5 + template_scale * class_tex

    def sample_split(split: str, per_class: int) -> ImageBatch:
        pixels, labels, ids = [], [], []
        for c in range(num_classes):
            coeff = rng.normal(0.0, jitter_scale, size=(per_class, basis_dim))
            jitter = np.tensordot(coeff, basis, axes=(1, 0))
            iid = rng.normal(0.0, noise, size=jitter.shape)
            pixels.append(np.clip(templates[c] + jitter + iid, 0.0, 1.0))
            labels.extend([c] * per_class)
            ids.extend(f"{name}-{split}-c{c}-{i:05d}" for i in range(per_class))
        return ImageBatch(np.concatenate(pixels), np.asarray(ids), np.asarray(labels))

    train = sample_split("train", train_per_class)
    test = sample_split("test", test_per_class)

    return DatasetHandle(
        name=name, num_classes=num_classes,
        loader=lambda: (train, test),
        class_names=[f"class-{c}" for c in range(num_classes)],
    )


# ---------------------------------------------------------------------------
# feature-space generators (density / diagnostics tests and demos)

def gaussian_blob_features(num_classes: int, per_class: int, dim: int = 2,
                           spread: float = 8.0, scale: float = 1.0, seed: int = 0,
                           centers: np.ndarray | None = None):
    """Labeled Gaussian clusters in feature space. Returns (values, labels,
    centers); spread controls inter-class distance, scale the cluster std."""
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = rng.normal(0.0, spread, size=(num_classes, dim))
    else:
        centers = np.asarray(centers, dtype=np.float64)
    labels = np.repeat(np.arange(num_classes), per_class)
    values = centers[labels] + rng.normal(0.0, scale, size=(labels.size, dim))
    return values, labels, centers


def spectrum_features(n: int, eigenvalues, seed: int = 0) -> np.ndarray:
    """Zero-mean Gaussian sample whose population covariance has the given
    eigenvalues (in a seeded random orthogonal basis)."""
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(eigenvalues < 0):
        raise ValueError("eigenvalues must be non-negative")
    d = eigenvalues.size
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    z = rng.normal(size=(n, d)) * np.sqrt(eigenvalues)
    return z @ q.T


# ---------------------------------------------------------------------------
# registry population

def _unavailable(name: str, note: str) -> Callable[..., DatasetHandle]:
    def factory(**_kw) -> DatasetHandle:
        raise DataError(
            f"dataset {name!r} has no bundled loader ({note}); register one "
            f"with dualspace.datasets.register_dataset")
    return factory


register_dataset("synthetic-blobs", make_blob_image_dataset)
for _name, _note in [
    ("cifar10", "10 classes, 32x32 color"),
    ("cifar100", "20 coarse classes"),
    ("fashion-mnist", "10 classes, 28x28 grayscale"),
    ("cats-vs-dogs", "2 classes"),
    ("dior", "19 classes after bbox cropping; see module docstring"),
]:
    register_dataset(_name, _unavailable(_name, _note))

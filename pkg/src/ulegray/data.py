"""Labeled image datasets in [0, 1] pixel space, subsetting, mixing and poisoning.

Dataset ids understood by :func:`load_dataset`:

``cifar10-train`` / ``cifar10-test``
    ``<root>/cifar-10-batches-py/{data_batch_1..5,test_batch}`` (the python
    pickle release).  Sample ids are record order: train 0..49999, test
    0..9999.  Pass ``download=True`` to fetch the archive into ``root``.
``synthetic-3class`` / ``synthetic-3class-test`` / ``synthetic-3class-val``
    Seeded 32x32 blob images, 3 classes; 5000 / 1500 / 1000 images.  Cached
    under ``<root>/synthetic-3class/<split>/`` as ``meta.json`` plus
    ``images.bin`` and ``labels.bin`` (16-byte shape header, see
    :mod:`ulegray.storage`).  Missing files are regenerated from the seed.
"""

from __future__ import annotations

import dataclasses
import json
import os
import pickle
from pathlib import Path

import numpy as np

from . import storage
from .errors import DatasetError, InvariantError

SPLITS = ("train", "test", "validation")
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
SYNTHETIC_SEED = 20220817
SYNTHETIC_SIZES = {"train": 5000, "test": 1500, "validation": 1000}
DATA_ROOT_ENV = "ULEGRAY_DATA"


@dataclasses.dataclass(eq=False)
class ImageDataset:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, class_count)
    sample_ids: np.ndarray  # (N,) int64, unique
    split_tag: str
    class_count: int
    provenance: np.ndarray | None = None  # (N,) bool, True = "added" in mixed sets
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.provenance is not None:
            self.provenance = np.asarray(self.provenance, dtype=bool)
        self.validate()

    def validate(self):
        n = len(self.images)
        if not (len(self.labels) == n == len(self.sample_ids)):
            raise InvariantError("images, labels and sample_ids must have equal length")
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise InvariantError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if self.split_tag not in SPLITS:
            raise InvariantError(f"unknown split tag {self.split_tag!r}")
        if n:
            if not np.isfinite(self.images).all() or self.images.min() < 0.0 or self.images.max() > 1.0:
                raise InvariantError("pixel values must lie in [0, 1]")
            if self.labels.min() < 0 or self.labels.max() >= self.class_count:
                raise InvariantError(f"labels must lie in [0, {self.class_count})")
        if len(np.unique(self.sample_ids)) != n:
            raise InvariantError("sample_ids must be unique")
        if self.provenance is not None and len(self.provenance) != n:
            raise InvariantError("provenance length mismatch")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def take(self, index, split_tag=None) -> "ImageDataset":
        index = np.asarray(index, dtype=np.int64)
        return ImageDataset(
            images=self.images[index], labels=self.labels[index], sample_ids=self.sample_ids[index],
            split_tag=split_tag or self.split_tag, class_count=self.class_count,
            provenance=None if self.provenance is None else self.provenance[index], name=self.name,
        )

    def equals(self, other: "ImageDataset") -> bool:
        return (np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.sample_ids, other.sample_ids) and self.class_count == other.class_count)


@dataclasses.dataclass
class MixSpec:
    original_fraction: float
    added_fraction: float
    added_kind: str = "clean"  # clean | poisoned

    def __post_init__(self):
        for name in ("original_fraction", "added_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.added_kind not in ("clean", "poisoned"):
            raise ValueError(f"added_kind must be 'clean' or 'poisoned', got {self.added_kind!r}")


def default_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def normalization_for(name: str):
    """Per-channel (mean, std) used inside the model input stage."""
    if name.startswith("cifar10"):
        return CIFAR10_MEAN, CIFAR10_STD
    return (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)


def load_dataset(name: str, root=None, download: bool = False) -> ImageDataset:
    root = Path(root) if root is not None else default_root()
    if name in ("cifar10-train", "cifar10-test"):
        return _load_cifar10(root, name.endswith("train"), download)
    if name.startswith("synthetic-3class"):
        split = {"synthetic-3class": "train", "synthetic-3class-test": "test",
                 "synthetic-3class-val": "validation"}.get(name)
        if split is None:
            raise DatasetError(f"unknown dataset id {name!r}")
        return _load_synthetic(root, split)
    raise DatasetError(f"unknown dataset id {name!r}")


# ------------------------------------------------------------------ CIFAR-10

_CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"


def _load_cifar10(root: Path, train: bool, download: bool) -> ImageDataset:
    base = root / "cifar-10-batches-py"
    files = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    if download and not all((base / f).exists() for f in files):
        from torchvision.datasets.utils import download_and_extract_archive
        download_and_extract_archive(_CIFAR_URL, str(root), filename="cifar-10-python.tar.gz")
    images, labels = [], []
    for fname in files:
        path = base / fname
        if not path.exists():
            raise DatasetError(f"missing CIFAR-10 file: {path}")
        try:
            with open(path, "rb") as fh:
                entry = pickle.load(fh, encoding="latin1")
            data = np.asarray(entry["data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
            lab = np.asarray(entry.get("labels", entry.get("fine_labels")), dtype=np.int64)
        except Exception as exc:  # noqa: BLE001 - any parse failure means a corrupt file
            raise DatasetError(f"corrupt CIFAR-10 file: {path} ({exc})") from None
        if len(lab) != len(data):
            raise DatasetError(f"corrupt CIFAR-10 file: {path} (label count mismatch)")
        images.append(data.transpose(0, 2, 3, 1))
        labels.append(lab)
    x = np.concatenate(images).astype(np.float32) / 255.0
    y = np.concatenate(labels)
    return ImageDataset(x, y, np.arange(len(y)), "train" if train else "test", 10,
                        name="cifar10-train" if train else "cifar10-test")


# ------------------------------------------------------------------ synthetic

SYNTHETIC_PARAMS = dict(tint=0.1, color_jitter=0.08, amp=(0.15, 0.3), noise=0.1, distractors=3,
                        distractor_amp=0.12)


def generate_synthetic(n: int, seed: int, size: int = 32, **params):
    """Three classes of noisy Gaussian blobs.

    Class identity is carried both by blob shape (round / horizontal bar /
    vertical bar, visible in luminance) and by a class tint of the blob color
    (only visible across channels).  Per-image jitter in position, scale,
    brightness and color, distractor blobs and pixel noise keep the task from
    being trivial.  ``params`` override entries of ``SYNTHETIC_PARAMS``.
    """
    p = {**SYNTHETIC_PARAMS, **params}
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 3
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    scale = size / 32.0
    shapes = scale * np.array([[4.0, 4.0], [7.5, 2.2], [2.2, 7.5]])  # (sigma_x, sigma_y) per class
    tints = p["tint"] * np.array([[1.0, -0.4, -0.6], [-0.6, 1.0, -0.4], [-0.4, -0.6, 1.0]])
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i, c in enumerate(labels):
        background = rng.uniform(0.25, 0.65) + rng.normal(0.0, 0.05, size=3)
        img = np.broadcast_to(background, (size, size, 3)).copy()
        for _ in range(p["distractors"]):
            cx, cy = rng.uniform(size / 8, size - size / 8, size=2)
            sx, sy = scale * rng.uniform(2.0, 6.0, size=2)
            g = np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
            img += g[..., None] * rng.normal(0.0, p["distractor_amp"], size=3)
        cx, cy = rng.uniform(0.3 * size, 0.7 * size, size=2)
        sx, sy = shapes[c] * rng.uniform(0.8, 1.25)
        g = np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
        amp = rng.uniform(*p["amp"]) * rng.choice([-1.0, 1.0])
        color = amp + tints[c] + rng.normal(0.0, p["color_jitter"], size=3)
        img += g[..., None] * color
        img += rng.normal(0.0, p["noise"], size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(np.int64)


def _synthetic_seed(split: str, base: int = SYNTHETIC_SEED) -> int:
    return base + SPLITS.index(split) * 7919


def _load_synthetic(root: Path, split: str) -> ImageDataset:
    folder = root / "synthetic-3class" / split
    meta_path = folder / "meta.json"
    n, seed = SYNTHETIC_SIZES[split], _synthetic_seed(split)
    name = {"train": "synthetic-3class", "test": "synthetic-3class-test",
            "validation": "synthetic-3class-val"}[split]
    params = json.loads(json.dumps(SYNTHETIC_PARAMS))
    cached = None
    if meta_path.exists():
        try:
            cached = json.loads(meta_path.read_text())
        except json.JSONDecodeError:
            raise DatasetError(f"corrupt synthetic dataset file: {meta_path}") from None
    # a cache written with other generator settings is stale, not corrupt
    if cached is not None and cached.get("params") == params and cached.get("seed") == seed:
        meta = cached
        try:
            images, img_hash = storage.read_raw16(folder / "images.bin")
            labels, lab_hash = storage.read_raw16(folder / "labels.bin", dtype="<i4")
        except FileNotFoundError as exc:
            raise DatasetError(f"missing synthetic dataset file: {exc.filename}") from None
        except Exception as exc:  # noqa: BLE001
            raise DatasetError(f"corrupt synthetic dataset in {folder}: {exc}") from None
        if meta.get("images_sha256") != img_hash:
            raise DatasetError(f"corrupt synthetic dataset file: {folder / 'images.bin'}")
        if meta.get("labels_sha256") != lab_hash:
            raise DatasetError(f"corrupt synthetic dataset file: {folder / 'labels.bin'}")
        labels = labels.reshape(-1).astype(np.int64)
    else:
        images, labels = generate_synthetic(n, seed)
        try:
            img_hash = storage.write_raw16(folder / "images.bin", images)
            lab_hash = storage.write_raw16(folder / "labels.bin", labels.astype(np.int32).reshape(-1, 1, 1, 1))
            meta = {"shape": list(images.shape), "seed": seed, "class_count": 3, "split": split, "params": params,
                    "images_sha256": img_hash, "labels_sha256": lab_hash}
            storage.atomic_write_text(meta_path, json.dumps(meta, indent=1))
        except OSError:
            pass  # read-only root: serve the in-memory copy
    return ImageDataset(images, labels, np.arange(len(labels)), split, 3, name=name)


# ------------------------------------------------------------------ subsetting

def _stratified_pick(labels: np.ndarray, pool: np.ndarray, total: int, class_count: int,
                     class_sizes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices into ``labels``: per-class floor share of ``total``, topped up round-robin."""
    per_class_pool = []
    for c in range(class_count):
        idx = pool[labels[pool] == c]
        per_class_pool.append(rng.permutation(idx))
    n_all = class_sizes.sum()
    want = np.floor(total * class_sizes / n_all).astype(np.int64)
    want = np.minimum(want, [len(p) for p in per_class_pool])
    c = 0
    while want.sum() < total:
        if all(want[k] >= len(per_class_pool[k]) for k in range(class_count)):
            raise ValueError("not enough samples left to reach the requested subset size")
        if want[c] < len(per_class_pool[c]):
            want[c] += 1
        c = (c + 1) % class_count
    chosen = np.concatenate([per_class_pool[k][:want[k]] for k in range(class_count)])
    return np.sort(chosen)


def subset(ds: ImageDataset, fraction: float, seed: int, exclude_ids=None) -> ImageDataset:
    """Class-stratified random subset of ``round(fraction * len(ds))`` samples.

    ``exclude_ids`` removes sample ids from the candidate pool, which is how
    disjoint subsets for mixing studies are drawn.  Sample order in the output
    follows the input order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(ds)
    total = int(round(fraction * n))
    if fraction * n < ds.class_count or total < ds.class_count:
        raise ValueError(f"fraction {fraction} of {n} samples is too small to stratify over "
                         f"{ds.class_count} classes")
    pool = np.arange(n)
    if exclude_ids is not None:
        pool = pool[~np.isin(ds.sample_ids, np.asarray(exclude_ids))]
    if total == n and len(pool) == n:
        return ds.take(pool)
    rng = np.random.default_rng(seed)
    sizes = np.bincount(ds.labels, minlength=ds.class_count)
    return ds.take(_stratified_pick(ds.labels, pool, total, ds.class_count, sizes, rng))


def holdout(ds: ImageDataset, fraction: float, seed: int) -> tuple[ImageDataset, ImageDataset]:
    """Split into (rest, held-out validation) with a stratified held-out part."""
    held = subset(ds, fraction, seed)
    keep = ~np.isin(ds.sample_ids, held.sample_ids)
    return ds.take(np.flatnonzero(keep)), held.take(np.arange(len(held)), split_tag="validation")


def assemble_poisoned(ds: ImageDataset, bank) -> ImageDataset:
    """Replace each image by ``clamp(x + delta, 0, 1)`` using the bank entry for its sample id."""
    if bank.epsilon is None:
        raise ValueError("bank.epsilon is not set")
    rows = bank.rows_for(ds.sample_ids)  # raises KeyError listing missing ids
    poisoned = np.clip(ds.images + bank.delta[rows], 0.0, 1.0).astype(np.float32)
    return dataclasses.replace(ds, images=poisoned, provenance=None if ds.provenance is None
                               else ds.provenance.copy())


def mix(original: ImageDataset, added: ImageDataset, spec: MixSpec, seed: int) -> ImageDataset:
    """Concatenate two disjoint datasets, flagging the ``added`` part in ``provenance``.

    The combined order is a seeded shuffle so the two parts interleave.
    """
    if original.class_count != added.class_count:
        raise ValueError("original and added datasets have different class counts")
    if original.image_shape != added.image_shape:
        raise ValueError("original and added datasets have different image shapes")
    overlap = np.intersect1d(original.sample_ids, added.sample_ids)
    if len(overlap):
        raise ValueError(f"original and added share sample ids: {overlap[:10].tolist()}")
    images = np.concatenate([original.images, added.images])
    labels = np.concatenate([original.labels, added.labels])
    ids = np.concatenate([original.sample_ids, added.sample_ids])
    flags = np.concatenate([np.zeros(len(original), bool), np.ones(len(added), bool)])
    order = np.random.default_rng(seed).permutation(len(labels))
    return ImageDataset(images[order], labels[order], ids[order], original.split_tag,
                        original.class_count, provenance=flags[order],
                        name=f"{original.name}+{spec.added_kind}")


def mixed_training_set(train: ImageDataset, spec: MixSpec, seed: int, bank=None) -> ImageDataset:
    """Original stratified fraction plus a disjoint added fraction (poisoned with ``bank`` if asked)."""
    original = subset(train, spec.original_fraction, seed)
    added = subset(train, spec.added_fraction, seed + 1, exclude_ids=original.sample_ids)
    if spec.added_kind == "poisoned":
        if bank is None:
            raise ValueError("added_kind='poisoned' requires a bank")
        added = assemble_poisoned(added, bank)
    return mix(original, added, spec, seed)

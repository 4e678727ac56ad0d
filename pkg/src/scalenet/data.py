"""Dataset ingestion and a procedural stand-in corpus.

Two on-disk formats are ingested fail-closed (any malformed file aborts the
whole load): the classic 5+1 pickled-batch CIFAR-10 layout, and a folder of
class subdirectories with image files. The synthetic corpus generates
CIFAR-shaped 32x32x3 scenes from ten glyph families; every glyph has a
canonical "upright" drawing and corner-rich junctions, so quarter-turn
prediction is learnable from the data and degrades when corners are whitened
out. Glyph and background colors are drawn independently of the class, which
keeps hue uninformative and forces classifiers onto shape.
"""

from __future__ import annotations

import colorsys
import os
import pickle
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LabeledImageDataset",
    "IngestionError",
    "ingest_dataset",
    "make_synthetic_dataset",
    "write_cifar10_archive",
    "SYNTHETIC_CLASS_NAMES",
]

CIFAR_TRAIN_BATCHES = [f"data_batch_{i}" for i in range(1, 6)]
CIFAR_TEST_BATCH = "test_batch"
CIFAR_HW = 32
CIFAR_ROW_BYTES = 3 * CIFAR_HW * CIFAR_HW

SYNTHETIC_CLASS_NAMES = [
    "triangle", "house", "tee", "ell", "stairs",
    "arrow", "flag", "arch", "comb", "tree",
]


class IngestionError(ValueError):
    """A dataset file is missing, truncated, or inconsistent."""


@dataclass
class LabeledImageDataset:
    """Raw-range float32 image stacks with integer labels and class names."""

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    class_names: list
    value_range: str = "raw_0_255"

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return int(self.train_images.shape[0])


def _load_cifar_batch(path) -> tuple:
    try:
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
    except (OSError, pickle.UnpicklingError, EOFError) as exc:
        raise IngestionError(f"cannot read batch file {path}: {exc}") from exc
    data = batch.get(b"data")
    labels = batch.get(b"labels", batch.get(b"fine_labels"))
    if data is None or labels is None:
        raise IngestionError(f"batch file {path} lacks data/labels entries")
    data = np.asarray(data, dtype=np.uint8)
    if data.ndim != 2 or data.shape[1] != CIFAR_ROW_BYTES:
        raise IngestionError(f"batch file {path} has row shape {data.shape}, expected (*, {CIFAR_ROW_BYTES})")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != data.shape[0]:
        raise IngestionError(f"batch file {path}: {data.shape[0]} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() > 9):
        raise IngestionError(f"batch file {path}: labels outside 0..9")
    images = data.reshape(-1, 3, CIFAR_HW, CIFAR_HW).transpose(0, 2, 3, 1).astype(np.float32)
    return images, labels


def _ingest_cifar10(path) -> LabeledImageDataset:
    base = os.path.join(path, "cifar-10-batches-py")
    root = base if os.path.isdir(base) else path
    for name in CIFAR_TRAIN_BATCHES + [CIFAR_TEST_BATCH]:
        if not os.path.exists(os.path.join(root, name)):
            raise IngestionError(f"missing batch file {os.path.join(root, name)}")
    train_parts = [_load_cifar_batch(os.path.join(root, n)) for n in CIFAR_TRAIN_BATCHES]
    test_images, test_labels = _load_cifar_batch(os.path.join(root, CIFAR_TEST_BATCH))
    class_names = [f"class_{i}" for i in range(10)]
    meta_path = os.path.join(root, "batches.meta")
    if os.path.exists(meta_path):
        try:
            with open(meta_path, "rb") as fh:
                meta = pickle.load(fh, encoding="bytes")
            names = meta.get(b"label_names")
            if names:
                class_names = [n.decode("utf-8") for n in names]
        except (OSError, pickle.UnpicklingError) as exc:
            raise IngestionError(f"cannot read {meta_path}: {exc}") from exc
    return LabeledImageDataset(
        train_images=np.concatenate([p[0] for p in train_parts]),
        train_labels=np.concatenate([p[1] for p in train_parts]),
        test_images=test_images,
        test_labels=test_labels,
        class_names=class_names,
    )


def _load_image_folder(root) -> tuple:
    from PIL import Image, UnidentifiedImageError

    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise IngestionError(f"no class subdirectories under {root}")
    images, labels = [], []
    shape = None
    for label, cls in enumerate(classes):
        files = sorted(
            f for f in os.listdir(os.path.join(root, cls))
            if f.lower().endswith((".png", ".jpg", ".jpeg", ".bmp", ".gif"))
        )
        if not files:
            raise IngestionError(f"class folder {os.path.join(root, cls)} is empty")
        for fname in files:
            fpath = os.path.join(root, cls, fname)
            try:
                with Image.open(fpath) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32)
            except (OSError, UnidentifiedImageError) as exc:
                raise IngestionError(f"cannot decode image {fpath}: {exc}") from exc
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise IngestionError(f"image {fpath} has shape {arr.shape}, expected {shape}")
            images.append(arr)
            labels.append(label)
    return np.stack(images), np.asarray(labels, dtype=np.int64), classes


def _ingest_image_folder(path) -> LabeledImageDataset:
    train_dir = os.path.join(path, "train")
    test_dir = os.path.join(path, "test")
    if os.path.isdir(train_dir):
        train = _load_image_folder(train_dir)
        if os.path.isdir(test_dir):
            test = _load_image_folder(test_dir)
            if test[2] != train[2]:
                raise IngestionError(f"train/test class folders differ: {train[2]} vs {test[2]}")
        else:
            test = (np.empty((0,) + train[0].shape[1:], np.float32), np.empty(0, np.int64), train[2])
    else:
        train = _load_image_folder(path)
        test = (np.empty((0,) + train[0].shape[1:], np.float32), np.empty(0, np.int64), train[2])
    return LabeledImageDataset(
        train_images=train[0], train_labels=train[1],
        test_images=test[0], test_labels=test[1],
        class_names=train[2],
    )


def ingest_dataset(spec) -> LabeledImageDataset:
    """Load a dataset described by a config mapping.

    ``spec`` needs ``kind`` in {"cifar10_archive", "image_folder", "synthetic"}
    plus ``path`` for the on-disk kinds or generator sizes for synthetic.
    """
    kind = spec.get("kind") if isinstance(spec, dict) else spec.kind
    if kind == "cifar10_archive":
        path = spec.get("path") if isinstance(spec, dict) else spec.path
        return _ingest_cifar10(path)
    if kind == "image_folder":
        path = spec.get("path") if isinstance(spec, dict) else spec.path
        return _ingest_image_folder(path)
    if kind == "synthetic":
        get = spec.get if isinstance(spec, dict) else lambda k, d=None: getattr(spec, k, d)
        return make_synthetic_dataset(
            n_train=int(get("n_train", 4000) or 4000),
            n_test=int(get("n_test", 2000) or 2000),
            seed=int(get("gen_seed", 0) or 0),
        )
    raise IngestionError(f"unknown dataset kind {kind!r}")


# --- synthetic corpus ------------------------------------------------------

def _glyph_mask(cls: int, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, s: float) -> np.ndarray:
    half = s / 2.0
    top, bot = cy - half, cy + half
    left, right = cx - half, cx + half
    bar = s / 5.0
    if cls == 0:    # triangle, apex up
        return (yy >= top) & (yy <= bot) & (np.abs(xx - cx) <= (yy - top) / 2.0)
    if cls == 1:    # house: body plus roof
        body = (np.abs(xx - cx) <= s / 3.0) & (yy >= cy - s / 6.0) & (yy <= bot)
        roof = (yy >= top) & (yy <= cy - s / 6.0) & (np.abs(xx - cx) <= (yy - top) * 1.1)
        return body | roof
    if cls == 2:    # tee: bar on top, stem down
        hbar = (yy >= top) & (yy <= top + bar) & (np.abs(xx - cx) <= half)
        stem = (np.abs(xx - cx) <= bar / 2.0) & (yy > top) & (yy <= bot)
        return hbar | stem
    if cls == 3:    # ell: left stroke, bottom stroke
        vert = (xx >= left) & (xx <= left + bar) & (yy >= top) & (yy <= bot)
        horz = (yy >= bot - bar) & (yy <= bot) & (xx >= left) & (xx <= right)
        return vert | horz
    if cls == 4:    # stairs ascending to the right
        step = s / 3.0
        m = np.zeros_like(yy, dtype=bool)
        for i in range(3):
            m |= (xx >= left + i * step) & (xx <= left + (i + 1) * step) \
                 & (yy >= bot - (i + 1) * step) & (yy <= bot)
        return m
    if cls == 5:    # arrow up
        headh = s * 0.45
        head = (yy >= top) & (yy <= top + headh) & (np.abs(xx - cx) <= (yy - top) * 0.9)
        stem = (np.abs(xx - cx) <= bar / 2.0) & (yy > top + headh) & (yy <= bot)
        return head | stem
    if cls == 6:    # flag: pole left, pennant at top pointing right
        pole = (xx >= left) & (xx <= left + bar * 0.8) & (yy >= top) & (yy <= bot)
        pennant = (yy >= top) & (yy <= cy) & (xx > left + bar * 0.8) \
            & (xx - (left + bar * 0.8) <= (cy - yy) * 1.2)
        return pole | pennant
    if cls == 7:    # arch: top bar with two legs down
        topbar = (yy >= top) & (yy <= top + bar) & (xx >= left) & (xx <= right)
        legl = (xx >= left) & (xx <= left + bar) & (yy > top) & (yy <= bot)
        legr = (xx >= right - bar) & (xx <= right) & (yy > top) & (yy <= bot)
        return topbar | legl | legr
    if cls == 8:    # comb: spine left, three teeth to the right
        spine = (xx >= left) & (xx <= left + bar) & (yy >= top) & (yy <= bot)
        m = spine
        for frac in (0.0, 0.4, 0.8):
            y0 = top + frac * s
            m |= (yy >= y0) & (yy <= y0 + bar) & (xx >= left) & (xx <= right)
        return m
    # tree: wide triangle over a trunk
    canopy = (yy >= top) & (yy <= cy + s / 6.0) & (np.abs(xx - cx) <= (yy - top) * 0.8)
    trunk = (np.abs(xx - cx) <= bar / 2.0) & (yy > cy + s / 6.0) & (yy <= bot)
    return canopy | trunk


def _smooth_field(rng: np.random.Generator, hw: int, cells: int = 4) -> np.ndarray:
    """Low-frequency field in [-1, 1]: a coarse grid upsampled bilinearly."""
    coarse = rng.uniform(-1.0, 1.0, (cells, cells, 3))
    pos = np.linspace(0, cells - 1, hw)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, cells - 1)
    w = pos - i0
    rows = coarse[i0] * (1 - w)[:, None, None] + coarse[i1] * w[:, None, None]
    return rows[:, i0] * (1 - w)[None, :, None] + rows[:, i1] * w[None, :, None]


def make_synthetic_dataset(n_train: int, n_test: int, seed: int = 0, hw: int = 32) -> LabeledImageDataset:
    """Generate a balanced 10-class, CIFAR-shaped scene corpus.

    Each image is a low-saturation textured background with one upright,
    corner-rich glyph; hue carries no class signal. Deterministic under seed.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)

    def render(cls: int) -> np.ndarray:
        bg_rgb = colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.05, 0.35), rng.uniform(0.30, 0.80))
        img = np.empty((hw, hw, 3), dtype=np.float64)
        img[:] = np.asarray(bg_rgb) * 255.0
        img += _smooth_field(rng, hw) * 25.0

        bg_value = sum(bg_rgb) / 3.0
        glyph_v = rng.uniform(0.70, 0.95) if bg_value < 0.5 else rng.uniform(0.10, 0.35)
        glyph_rgb = np.asarray(colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.3, 0.9), glyph_v)) * 255.0
        cy, cx = rng.uniform(11.5, 19.5, 2) * hw / 32.0
        s = rng.uniform(14.0, 24.0) * hw / 32.0
        mask = _glyph_mask(cls, yy, xx, cy, cx, s)
        img[mask] = glyph_rgb
        img += rng.normal(0.0, 7.0, img.shape)
        return np.clip(img, 0, 255)

    def batch(n: int) -> tuple:
        labels = np.tile(np.arange(10), n // 10 + 1)[:n].astype(np.int64)
        rng.shuffle(labels)
        images = np.empty((n, hw, hw, 3), dtype=np.float32)
        for i, cls in enumerate(labels):
            images[i] = render(int(cls))
        return images, labels

    train_images, train_labels = batch(n_train)
    test_images, test_labels = batch(n_test)
    return LabeledImageDataset(
        train_images=train_images, train_labels=train_labels,
        test_images=test_images, test_labels=test_labels,
        class_names=list(SYNTHETIC_CLASS_NAMES),
    )


def write_cifar10_archive(dataset: LabeledImageDataset, out_dir) -> str:
    """Write a dataset in the standard 5+1 pickled-batch layout.

    Train images are split evenly into five batches; rows are uint8 with the
    red plane first, then green, then blue, each row-major.
    """
    os.makedirs(out_dir, exist_ok=True)
    if dataset.train_images.shape[0] % 5:
        raise ValueError("train size must divide into 5 batches")

    def rows(images: np.ndarray) -> np.ndarray:
        clipped = np.clip(images, 0, 255).astype(np.uint8)
        return clipped.transpose(0, 3, 1, 2).reshape(images.shape[0], -1)

    per = dataset.train_images.shape[0] // 5
    for b in range(5):
        sl = slice(b * per, (b + 1) * per)
        payload = {
            b"batch_label": f"training batch {b + 1} of 5".encode(),
            b"labels": [int(v) for v in dataset.train_labels[sl]],
            b"data": rows(dataset.train_images[sl]),
            b"filenames": [f"img_{i}.png".encode() for i in range(sl.start, sl.stop)],
        }
        with open(os.path.join(out_dir, f"data_batch_{b + 1}"), "wb") as fh:
            pickle.dump(payload, fh)
    payload = {
        b"batch_label": b"testing batch 1 of 1",
        b"labels": [int(v) for v in dataset.test_labels],
        b"data": rows(dataset.test_images),
        b"filenames": [f"test_{i}.png".encode() for i in range(dataset.test_images.shape[0])],
    }
    with open(os.path.join(out_dir, CIFAR_TEST_BATCH), "wb") as fh:
        pickle.dump(payload, fh)
    with open(os.path.join(out_dir, "batches.meta"), "wb") as fh:
        pickle.dump({b"label_names": [n.encode() for n in dataset.class_names]}, fh)
    return out_dir

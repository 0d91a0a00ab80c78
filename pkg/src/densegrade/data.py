"""Dataset scanning, stratified splitting, task relabeling and batch loading."""
from __future__ import annotations

import csv
import enum
import logging
import math
import os
import re
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

FRUITS = ("Apple", "Banana", "Guava", "Lime", "Orange", "Pomegranate")
QUALITIES = ("Bad", "Good", "Mixed")
SPLITS = ("train", "val", "test")
IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff", ".webp"}

# published per-class image counts of the FruitNet corpus: (fruit, quality) -> count
FRUITNET_COUNTS = {
    ("Apple", "Good"): 1149, ("Apple", "Bad"): 1141, ("Apple", "Mixed"): 113,
    ("Banana", "Good"): 1113, ("Banana", "Bad"): 1087, ("Banana", "Mixed"): 285,
    ("Guava", "Good"): 1152, ("Guava", "Bad"): 1129, ("Guava", "Mixed"): 148,
    ("Lime", "Good"): 1094, ("Lime", "Bad"): 1085, ("Lime", "Mixed"): 278,
    ("Orange", "Good"): 1216, ("Orange", "Bad"): 1159, ("Orange", "Mixed"): 125,
    ("Pomegranate", "Good"): 5940, ("Pomegranate", "Bad"): 1187, ("Pomegranate", "Mixed"): 125,
}


class DatasetError(ValueError):
    pass


class TaskMode(str, enum.Enum):
    FINE18 = "fine18"
    FRUIT6 = "fruit6"
    QUALITY3 = "quality3"

    @classmethod
    def parse(cls, value) -> "TaskMode":
        if isinstance(value, TaskMode):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        aliases = {"fine18": cls.FINE18, "finegrained18": cls.FINE18, "fine": cls.FINE18,
                   "fruit6": cls.FRUIT6, "fruit": cls.FRUIT6,
                   "quality3": cls.QUALITY3, "quality": cls.QUALITY3}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown task {value!r}; use fine18, fruit6 or quality3") from None

    @property
    def num_classes(self) -> int:
        return {TaskMode.FINE18: 18, TaskMode.FRUIT6: 6, TaskMode.QUALITY3: 3}[self]

    def label(self, fruit: str, quality: str) -> int:
        f = FRUITS.index(fruit)
        q = QUALITIES.index(quality)
        if self is TaskMode.FINE18:
            return 3 * f + q
        return f if self is TaskMode.FRUIT6 else q

    def class_names(self) -> List[str]:
        if self is TaskMode.FINE18:
            return [f"{f}_{q}" for f in FRUITS for q in QUALITIES]
        return list(FRUITS) if self is TaskMode.FRUIT6 else list(QUALITIES)

    def project_fine(self, fine_labels: np.ndarray) -> np.ndarray:
        """Map 18-class labels onto this task's label space."""
        fine_labels = np.asarray(fine_labels)
        if self is TaskMode.FINE18:
            return fine_labels
        return fine_labels // 3 if self is TaskMode.FRUIT6 else fine_labels % 3

    def project_fine_scores(self, probs: np.ndarray) -> np.ndarray:
        """Sum 18-class probabilities into this task's classes."""
        if self is TaskMode.FINE18:
            return probs
        grid = probs.reshape(len(probs), 6, 3)
        return grid.sum(axis=2) if self is TaskMode.FRUIT6 else grid.sum(axis=1)


@dataclass(frozen=True)
class SampleRecord:
    path: str
    fruit: str
    quality: str
    split: Optional[str] = None

    @property
    def fine_label(self) -> int:
        return TaskMode.FINE18.label(self.fruit, self.quality)


# -- scanning -----------------------------------------------------------------

def _tokens(name: str) -> List[str]:
    return [t for t in re.split(r"[\s_\-.]+", name.lower()) if t]


def _match(tokens, vocab) -> Optional[str]:
    hits = {v for v in vocab for t in tokens if t == v.lower() or (len(t) >= 4 and v.lower().startswith(t))}
    return hits.pop() if len(hits) == 1 else None


def _parse_class_dir(name: str) -> Tuple[Optional[str], Optional[str]]:
    toks = _tokens(name)
    return _match(toks, FRUITS), _match(toks, QUALITIES)


def _image_files(folder: Path) -> List[Path]:
    return sorted(p for p in folder.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def scan_dataset(root, strict: bool = False) -> List[SampleRecord]:
    """Collect labelled image records under ``root``.

    Two layouts are recognised: flat ``<root>/<Fruit>_<Quality>/*`` and nested
    ``<root>/<Quality>/<Fruit>/*`` (quality folders may carry suffixes such as
    ``Good Quality_Fruits``). Folders whose names do not parse are reported
    with a warning, or raise with ``strict=True``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    records: List[SampleRecord] = []
    unknown: List[str] = []
    unreadable: List[str] = []

    def add_folder(folder: Path, fruit: str, quality: str):
        for p in _image_files(folder):
            if not os.access(p, os.R_OK):
                unreadable.append(str(p))
                continue
            records.append(SampleRecord(str(p), fruit, quality))

    for top in sorted(p for p in root.iterdir() if p.is_dir()):
        fruit, quality = _parse_class_dir(top.name)
        if fruit and quality:
            add_folder(top, fruit, quality)
        elif quality and not fruit and any(p.is_dir() for p in top.iterdir()):
            for sub in sorted(p for p in top.iterdir() if p.is_dir()):
                sub_fruit, sub_quality = _parse_class_dir(sub.name)
                if sub_fruit and sub_quality in (None, quality):
                    add_folder(sub, sub_fruit, quality)
                else:
                    unknown.append(f"{top.name}/{sub.name}")
        else:
            unknown.append(top.name)

    if unreadable:
        raise DatasetError("unreadable files: " + ", ".join(unreadable))
    if unknown:
        msg = "unrecognized class folder(s): " + ", ".join(unknown)
        if strict:
            raise DatasetError(msg)
        warnings.warn(msg, stacklevel=2)
        logger.warning(msg)
    if not records:
        raise DatasetError(f"no images found under {root}")
    return records


def class_counts(records: Sequence[SampleRecord]) -> Dict[Tuple[str, str], int]:
    counts = Counter((r.fruit, r.quality) for r in records)
    return {(f, q): counts.get((f, q), 0) for f in FRUITS for q in QUALITIES}


def format_counts(records: Sequence[SampleRecord]) -> str:
    counts = class_counts(records)
    lines = [f"{'Class':<13}" + "".join(f"{q:>8}" for q in QUALITIES) + f"{'Total':>8}"]
    for f in FRUITS:
        row = [counts[(f, q)] for q in QUALITIES]
        lines.append(f"{f:<13}" + "".join(f"{v:>8}" for v in row) + f"{sum(row):>8}")
    col = [sum(counts[(f, q)] for f in FRUITS) for q in QUALITIES]
    lines.append(f"{'Total':<13}" + "".join(f"{v:>8}" for v in col) + f"{sum(col):>8}")
    return "\n".join(lines)


# -- splitting ----------------------------------------------------------------

def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_sizes(n: int, ratios=(0.6, 0.2, 0.2)) -> Tuple[int, int, int]:
    n_test = round_half_up(n * ratios[2])
    n_val = round_half_up(n * ratios[1])
    return n - n_test - n_val, n_val, n_test


def stratified_split(records: Sequence[SampleRecord], ratios=(0.6, 0.2, 0.2),
                     seed: int = 0) -> List[SampleRecord]:
    """Assign train/val/test per (fruit, quality) class.

    Within a class the members are shuffled with a seed-keyed stream; the
    first ``round(0.2 n)`` go to test, the next ``round(0.2 n)`` to val and
    the rest to train. Input order is preserved in the output.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    by_class: Dict[Tuple[str, str], List[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault((r.fruit, r.quality), []).append(i)
    assigned: List[Optional[str]] = [None] * len(records)
    small = [f"{f}_{q} ({len(ix)})" for (f, q), ix in sorted(by_class.items()) if len(ix) < 3]
    if small:
        raise DatasetError("classes with fewer than 3 samples cannot fill all splits: " + ", ".join(small))
    for (f, q), idx in sorted(by_class.items()):
        rng = np.random.default_rng([int(seed), FRUITS.index(f), QUALITIES.index(q)])
        order = [idx[k] for k in rng.permutation(len(idx))]
        n_train, n_val, n_test = split_sizes(len(idx), ratios)
        for pos, i in enumerate(order):
            assigned[i] = "test" if pos < n_test else ("val" if pos < n_test + n_val else "train")
    return [replace(r, split=s) for r, s in zip(records, assigned)]


def select_split(records: Sequence[SampleRecord], split: str) -> List[SampleRecord]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return [r for r in records if r.split == split]


def write_split_manifest(records: Sequence[SampleRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path", "fruit", "quality", "split"])
        for r in records:
            w.writerow([r.path, r.fruit, r.quality, r.split or ""])


def read_split_manifest(path) -> List[SampleRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [SampleRecord(r["path"], r["fruit"], r["quality"], r["split"] or None) for r in rows]


def relabel(records: Sequence[SampleRecord], task) -> np.ndarray:
    task = TaskMode.parse(task)
    return np.array([task.label(r.fruit, r.quality) for r in records], dtype=np.int64)


# -- decoding -----------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize ``C x H x W`` with half-pixel-centre bilinear sampling, edges clamped."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    img = img.astype(np.float64)
    rows = img[:, y0, :] * (1.0 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1.0 - fx) + rows[:, :, x1] * fx
    return out


def load_image(path, resolution: Tuple[int, int]) -> np.ndarray:
    """Decode to float32 ``3 x H x W`` in [0, 1] at ``resolution`` (H, W)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    arr = arr.transpose(2, 0, 1)
    arr = resize_bilinear(arr, int(resolution[0]), int(resolution[1]))
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


@dataclass
class Normalization:
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]

    def apply(self, images: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean, dtype=images.dtype).reshape(1, -1, 1, 1)
        s = np.asarray(self.std, dtype=images.dtype).reshape(1, -1, 1, 1)
        return (images - m) / s

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d) -> Optional["Normalization"]:
        if not d:
            return None
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))

    @classmethod
    def from_images(cls, images: np.ndarray) -> "Normalization":
        imgs = images.astype(np.float64)
        mean = imgs.mean(axis=(0, 2, 3))
        std = np.maximum(imgs.std(axis=(0, 2, 3)), 1e-6)
        return cls(tuple(float(v) for v in mean), tuple(float(v) for v in std))


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    records: List[SampleRecord]


def load_images(records: Sequence[SampleRecord], resolution, workers: int = 1) -> np.ndarray:
    """Decode records in order; ``workers > 1`` decodes in threads, output order unchanged."""
    if not records:
        return np.zeros((0, 3, int(resolution[0]), int(resolution[1])), dtype=np.float32)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            imgs = list(ex.map(lambda r: load_image(r.path, resolution), records))
    else:
        imgs = [load_image(r.path, resolution) for r in records]
    return np.stack(imgs)


def load_batch(records: Sequence[SampleRecord], resolution=(256, 256),
               normalization: Optional[Normalization] = None, task=TaskMode.FINE18,
               workers: int = 1) -> Batch:
    records = list(records)
    images = load_images(records, resolution, workers)
    if normalization is not None:
        images = normalization.apply(images)
    return Batch(images, relabel(records, task), records)


class ArrayDataset:
    """In-memory images and labels with index-based batch access."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, records=None):
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)
        self.records = list(records) if records is not None else None

    def __len__(self):
        return len(self.labels)

    def get(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        indices = np.asarray(indices, dtype=np.int64)
        return self.images[indices], self.labels[indices]


class RecordDataset:
    """Decodes images on demand; for corpora too large to hold in memory."""

    def __init__(self, records: Sequence[SampleRecord], resolution, task=TaskMode.FINE18,
                 normalization: Optional[Normalization] = None, workers: int = 1):
        self.records = list(records)
        self.resolution = resolution
        self.normalization = normalization
        self.workers = workers
        self.labels = relabel(self.records, task)

    def __len__(self):
        return len(self.records)

    def get(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        b = load_batch([self.records[i] for i in indices], self.resolution,
                       self.normalization, workers=self.workers)
        return b.images, self.labels[np.asarray(indices, dtype=np.int64)]

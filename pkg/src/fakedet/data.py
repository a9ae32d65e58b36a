"""Dataset indexing, splitting, loading, augmentation, and synthesis.

Datasets follow the ImageFolder convention: class subdirectories named
``real`` (label 0) and ``fake`` (label 1), either flat under the root or
inside ``train``/``valid``/``test`` subtrees. Split assignments travel
in a tab-separated manifest (`path<TAB>label<TAB>split`, UTF-8, LF) with
paths relative to the dataset root, so a manifest is byte-reproducible
regardless of where the root lives.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import Tensor

LABEL_NAMES = {"real": 0, "fake": 1}
SPLIT_NAMES = ("train", "val", "test")
_SPLIT_DIRS = {"train": "train", "valid": "val", "val": "val", "test": "test"}
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DataError(Exception):
    """Dataset layout, decoding, or splitting problem."""


@dataclass(frozen=True)
class Record:
    path: str                 # POSIX-style, relative to the dataset root
    label: int                # 0 real, 1 fake
    split: str | None = None  # train/val/test once assigned


@dataclass(frozen=True)
class DatasetIndex:
    root: str
    records: tuple[Record, ...]
    seed: int | None = None   # split seed, None before splitting

    def subset(self, split: str) -> tuple[Record, ...]:
        return tuple(r for r in self.records if r.split == split)


@dataclass(frozen=True)
class Batch:
    images: Tensor            # [B, 3, H, W], values in [0, 1]
    labels: Tensor            # [B], values 0.0 or 1.0
    paths: tuple[str, ...]
    ordinal: int = 0          # position of this batch within its epoch


# ---- indexing ------------------------------------------------------------


def _class_records(class_dir: Path, root: Path, split: str | None) -> list[Record]:
    label = LABEL_NAMES[class_dir.name]
    records = []
    for p in sorted(class_dir.iterdir()):
        if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES:
            records.append(Record(p.relative_to(root).as_posix(), label, split))
    return records


def scan_directory(root) -> DatasetIndex:
    """Index a dataset tree; lexicographic path order, label from the
    class directory name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    subdirs = sorted(d for d in root.iterdir() if d.is_dir())
    names = {d.name for d in subdirs}
    records: list[Record] = []
    if names & set(LABEL_NAMES):
        for d in subdirs:
            if d.name not in LABEL_NAMES:
                raise DataError(f"unknown class directory {d.name!r} under {root}")
            records.extend(_class_records(d, root, None))
    elif names & set(_SPLIT_DIRS):
        for d in subdirs:
            if d.name not in _SPLIT_DIRS:
                raise DataError(f"unknown split directory {d.name!r} under {root}")
            for c in sorted(x for x in d.iterdir() if x.is_dir()):
                if c.name not in LABEL_NAMES:
                    raise DataError(f"unknown class directory {c.name!r} under {d}")
                records.extend(_class_records(c, root, _SPLIT_DIRS[d.name]))
    else:
        raise DataError(f"{root} has neither real/fake nor train/valid/test subdirectories")
    if not records:
        raise DataError(f"no images found under {root}")
    records.sort(key=lambda r: r.path)
    return DatasetIndex(str(root), tuple(records))


def split_dataset(index: DatasetIndex, fractions=(0.70, 0.15, 0.15),
                  seed: int = 0) -> DatasetIndex:
    """Stratified train/val/test split: per class, floor allocation with
    the remainder assigned to train, order shuffled by the seed."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise DataError(f"fractions must be three non-negative values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions sum to {sum(fractions)}, expected 1")
    split_records: list[Record] = []
    for name, label in sorted(LABEL_NAMES.items(), key=lambda kv: kv[1]):
        items = [r for r in index.records if r.label == label]
        n = len(items)
        if n == 0:
            raise DataError(f"class {name!r} has no samples")
        counts = [int(n * f) for f in fractions]
        counts[0] += n - sum(counts)
        for split_name, fraction, count in zip(SPLIT_NAMES, fractions, counts):
            if fraction > 0 and count == 0:
                raise DataError(
                    f"class {name!r} starved: {n} samples leave 0 for {split_name}")
        perm = np.random.default_rng([seed, label]).permutation(n)
        bounds = np.cumsum([0] + counts)
        for split_name, lo, hi in zip(SPLIT_NAMES, bounds[:-1], bounds[1:]):
            for k in perm[lo:hi]:
                split_records.append(replace(items[k], split=split_name))
    split_records.sort(key=lambda r: r.path)
    return DatasetIndex(index.root, tuple(split_records), seed)


def write_manifest(index: DatasetIndex, path) -> None:
    lines = []
    for r in index.records:
        if r.split is None:
            raise DataError(f"record {r.path} has no split; run split_dataset first")
        lines.append(f"{r.path}\t{r.label}\t{r.split}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(lines)


def read_manifest(path, root) -> DatasetIndex:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{i}: expected path<TAB>label<TAB>split")
            p, label, split = parts
            if label not in ("0", "1"):
                raise DataError(f"{path}:{i}: label must be 0 or 1, got {label!r}")
            if split not in SPLIT_NAMES:
                raise DataError(f"{path}:{i}: unknown split {split!r}")
            records.append(Record(p, int(label), split))
    if not records:
        raise DataError(f"manifest {path} is empty")
    return DatasetIndex(str(root), tuple(records))


# ---- loading -------------------------------------------------------------


def load_image(path, target: tuple[int, int]) -> np.ndarray:
    """Decode to float32 [3, H, W] in [0, 1]: RGB, bilinear resize, 1/255."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((target[1], target[0]), Image.BILINEAR)
    except Exception as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_batch(index: DatasetIndex, split: str, batch_size: int = 16,
               target: tuple[int, int] = (224, 224), shuffle_seed: int | None = None):
    """Yield Batches for one split; deterministic order, shuffled when a
    seed is given; the last batch may be short."""
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    records = index.subset(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
    root = Path(index.root)
    for ordinal, start in enumerate(range(0, len(records), batch_size)):
        chosen = [records[k] for k in order[start:start + batch_size]]
        images = np.stack([load_image(root / r.path, target) for r in chosen])
        labels = np.array([r.label for r in chosen], dtype=np.float32)
        yield Batch(Tensor(images), Tensor(labels),
                    tuple(r.path for r in chosen), ordinal)


# ---- augmentation --------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    """Declarative augmentation recipe, reproducible from its seed.

    ``basic`` = flip/rotate/scale with the explicit ranges below;
    ``rand_augment`` = n_ops draws from the fixed menu at the given
    magnitude (0-10); ``auto_lite`` = one transform pair from a fixed
    sub-policy list; ``combined`` = basic then rand_augment.
    """

    kind: str = "basic"
    rotation: float = 15.0          # degrees, sampled in [-rotation, rotation]
    scale: tuple[float, float] = (0.9, 1.1)
    flip_prob: float = 0.5
    n_ops: int = 2
    magnitude: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "basic", "rand_augment", "auto_lite", "combined"):
            raise ValueError(f"unknown augment kind {self.kind!r}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip probability must lie in [0, 1]")
        if not 0 < self.scale[0] <= self.scale[1]:
            raise ValueError(f"degenerate scale range {self.scale}")
        if not 0.0 <= self.magnitude <= 10.0:
            raise ValueError("magnitude uses a 0-10 scale")
        if self.n_ops < 1:
            raise ValueError("n_ops must be >= 1")


def _warp(img: np.ndarray, theta_deg: float, scale: float,
          shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Rotate/scale about the image center and translate, bilinear with
    edge replication; img is [3, H, W]."""
    if theta_deg == 0.0 and scale == 1.0 and shift == (0.0, 0.0):
        return img
    h, w = img.shape[1:]
    theta = np.deg2rad(theta_deg)
    c, s = np.cos(theta), np.sin(theta)
    inv = np.array([[c, -s], [s, c]]) / scale     # inverse of scale*rotation
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - inv @ (center + np.asarray(shift))
    out = np.empty_like(img)
    for ch in range(3):
        ndimage.affine_transform(img[ch], inv, offset=offset, output=out[ch],
                                 order=1, mode="nearest")
    return out


def _adjust(img: np.ndarray, contrast: float = 0.0, brightness: float = 0.0) -> np.ndarray:
    out = img
    if contrast != 0.0:
        mean = out.mean(axis=(1, 2), keepdims=True)
        out = (out - mean) * (1.0 + contrast) + mean
    if brightness != 0.0:
        out = out + brightness
    return out


# menu entry: name -> max strength at magnitude 10
_RAND_MENU = (
    ("rotate", 30.0),
    ("translate_x", 0.3),
    ("translate_y", 0.3),
    ("scale", 0.3),
    ("contrast", 0.5),
    ("brightness", 0.3),
    ("hflip", 1.0),
)

# auto_lite sub-policies: pairs of (op, fixed strength)
_AUTO_PAIRS = (
    (("contrast", 0.2), ("brightness", 0.1)),
    (("rotate", 10.0), ("translate_x", 0.1)),
    (("scale", 0.1), ("brightness", -0.1)),
    (("hflip", 1.0), ("contrast", -0.2)),
    (("rotate", -10.0), ("translate_y", 0.1)),
)


def _apply_op(img: np.ndarray, op: str, strength: float) -> np.ndarray:
    if op == "rotate":
        return _warp(img, strength, 1.0)
    if op == "translate_x":
        return _warp(img, 0.0, 1.0, (0.0, strength * img.shape[2]))
    if op == "translate_y":
        return _warp(img, 0.0, 1.0, (strength * img.shape[1], 0.0))
    if op == "scale":
        return _warp(img, 0.0, 1.0 + strength)
    if op == "contrast":
        return _adjust(img, contrast=strength)
    if op == "brightness":
        return _adjust(img, brightness=strength)
    if op == "hflip":
        return img[:, :, ::-1]
    raise ValueError(f"unknown op {op!r}")


def _augment_one(img: np.ndarray, policy: AugmentPolicy,
                 rng: np.random.Generator) -> np.ndarray:
    kinds = ("basic", "rand_augment") if policy.kind == "combined" else (policy.kind,)
    for kind in kinds:
        if kind == "basic":
            if rng.random() < policy.flip_prob:
                img = img[:, :, ::-1]
            theta = rng.uniform(-policy.rotation, policy.rotation)
            scale = rng.uniform(*policy.scale)
            img = _warp(img, theta, scale)
        elif kind == "rand_augment":
            for _ in range(policy.n_ops):
                op, max_strength = _RAND_MENU[rng.integers(len(_RAND_MENU))]
                strength = (policy.magnitude / 10.0) * max_strength
                if op != "hflip":
                    strength *= 1.0 if rng.random() < 0.5 else -1.0
                img = _apply_op(img, op, strength)
        elif kind == "auto_lite":
            for op, strength in _AUTO_PAIRS[rng.integers(len(_AUTO_PAIRS))]:
                img = _apply_op(img, op, strength)
    return img


def augment(batch: Batch, policy: AugmentPolicy) -> Batch:
    """Apply the policy image by image; shapes and labels unchanged,
    values clamped to [0, 1], deterministic under (seed, ordinal)."""
    if policy.kind == "none":
        return batch
    rng = np.random.default_rng([policy.seed, batch.ordinal])
    out = np.empty_like(batch.images.data)
    for i in range(out.shape[0]):
        img = _augment_one(batch.images.data[i], policy, rng)
        out[i] = np.clip(img, 0.0, 1.0)
    return Batch(Tensor(out), batch.labels, batch.paths, batch.ordinal)


# ---- histogram consistency ----------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class HistogramReport:
    histograms: dict            # split -> normalized 256-bin array
    distances: dict             # (split_a, split_b) -> L1 distance in [0, 2]
    threshold: float
    flagged: tuple[tuple[str, str], ...]


def histogram_check(index: DatasetIndex, threshold: float = 0.1) -> HistogramReport:
    """Per-split luma histograms plus pairwise L1 distances; pairs whose
    distance exceeds the threshold are flagged."""
    root = Path(index.root)
    histograms = {}
    for split in SPLIT_NAMES:
        records = index.subset(split)
        if not records:
            raise DataError(f"split {split!r} is empty")
        counts = np.zeros(256, dtype=np.int64)
        for r in records:
            try:
                with Image.open(root / r.path) as img:
                    rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
            except Exception as e:
                raise DataError(f"cannot decode image {root / r.path}: {e}") from e
            luma = rgb @ _LUMA
            counts += np.histogram(luma, bins=256, range=(0.0, 256.0))[0]
        histograms[split] = counts / counts.sum()
    distances = {}
    flagged = []
    for i, a in enumerate(SPLIT_NAMES):
        for b in SPLIT_NAMES[i + 1:]:
            d = float(np.abs(histograms[a] - histograms[b]).sum())
            distances[(a, b)] = d
            if d > threshold:
                flagged.append((a, b))
    return HistogramReport(histograms, distances, threshold, tuple(flagged))


# ---- synthetic dataset ---------------------------------------------------

CHECKER_AMPLITUDE = 0.2


def class_template(label: int, size: int) -> np.ndarray:
    """Noise-free [size, size] template: a 0.2..0.8 horizontal gradient,
    plus a (-1)^(i+j) checkerboard of amplitude 0.2 for the fake class."""
    template = np.broadcast_to(np.linspace(0.2, 0.8, size), (size, size)).copy()
    if label == 1:
        ij = np.indices((size, size)).sum(axis=0)
        template += CHECKER_AMPLITUDE * np.where(ij % 2 == 0, 1.0, -1.0)
    return template


def synth_dataset(root, n_per_class: int = 200, size: int = 32,
                  noise_level: float = 0.05, seed: int = 0) -> DatasetIndex:
    """Write a real/ + fake/ PNG tree of gradient images; the fake class
    carries a high-frequency checkerboard artifact. Deterministic under
    the seed (real images are drawn first, then fake)."""
    if size < 8:
        raise DataError(f"size must be >= 8, got {size}")
    if n_per_class < 1:
        raise DataError(f"n_per_class must be >= 1, got {n_per_class}")
    root = Path(root)
    rng = np.random.default_rng(seed)
    for name, label in sorted(LABEL_NAMES.items(), key=lambda kv: kv[1]):
        directory = root / name
        directory.mkdir(parents=True, exist_ok=True)
        template = class_template(label, size)
        for i in range(n_per_class):
            img = template[None, :, :] + noise_level * rng.standard_normal((3, size, size))
            img = np.clip(img, 0.0, 1.0)
            pixels = np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(pixels, mode="RGB").save(directory / f"{name}_{i:05d}.png")
    return scan_directory(root)

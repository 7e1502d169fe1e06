"""Dataset handling: label encoding, balancing, splitting, image IO, batching.

A :class:`LabeledDataset` is a flat list of (source, class_index) pairs plus
the ordered class-name table.  A source is either an image file path or an
in-memory float array in [0, 1] (the synthetic generator produces the
latter; ``save_as_pngs`` materialises them for the CLI).

Class indices always come from lexicographically sorted class names, so a
directory tree and a manifest that name the same classes agree on the
encoding.  Oversampling duplicates minority-class entries uniformly with
replacement until every class matches the majority count.  The stratified
split shuffles within each class and apportions by largest remainder, which
keeps every split within one sample of its target fraction per class.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, DimensionError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class LabeledDataset:
    samples: list  # [(source, class_index)]
    class_names: list

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.class_names), dtype=np.int64)
        for _, label in self.samples:
            counts[label] += 1
        return counts

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 or f >= 1 for f in fracs):
            raise DataError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {fracs}")


def encode_labels(names) -> tuple[list, dict]:
    """Distinct names sorted lexicographically -> (ordered names, name->index)."""
    ordered = sorted(set(names))
    if not ordered:
        raise DataError("cannot encode an empty label set")
    return ordered, {name: i for i, name in enumerate(ordered)}


def oversample(ds: LabeledDataset, seed: int) -> LabeledDataset:
    """Balance classes by duplicating minority samples with replacement."""
    counts = ds.class_counts()
    if (counts == 0).any():
        empty = ds.class_names[int(np.argmin(counts))]
        raise DataError(f"cannot oversample: class {empty!r} has no samples")
    rng = np.random.default_rng(seed)
    target = int(counts.max())
    samples = list(ds.samples)
    by_class = [[s for s in ds.samples if s[1] == k]
                for k in range(len(ds.class_names))]
    for k, members in enumerate(by_class):
        need = target - len(members)
        if need > 0:
            picks = rng.integers(0, len(members), size=need)
            samples.extend(members[i] for i in picks)
    return LabeledDataset(samples=samples, class_names=list(ds.class_names))


def stratified_split(ds: LabeledDataset, spec: SplitSpec,
                     seed: int) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Per-class shuffle + largest-remainder apportionment into three splits."""
    rng = np.random.default_rng(seed)
    fracs = (spec.train_frac, spec.val_frac, spec.test_frac)
    parts: list = [[], [], []]
    for k, name in enumerate(ds.class_names):
        members = [s for s in ds.samples if s[1] == k]
        n = len(members)
        if n < 3:
            raise DataError(
                f"class {name!r} has {n} samples; stratified split needs >= 3"
            )
        order = rng.permutation(n)
        ideal = np.array([f * n for f in fracs])
        base = np.floor(ideal).astype(np.int64)
        leftover = n - int(base.sum())
        # Largest remainders win the leftover units; ties go to the earlier
        # split (train, then val, then test).
        by_remainder = np.argsort(-(ideal - base), kind="stable")
        for idx in by_remainder[:leftover]:
            base[idx] += 1
        bounds = np.cumsum(base)
        chunks = (order[:bounds[0]], order[bounds[0]:bounds[1]],
                  order[bounds[1]:bounds[2]])
        for part, chunk in zip(parts, chunks):
            part.extend(members[i] for i in chunk)
    names = list(ds.class_names)
    return (LabeledDataset(parts[0], names), LabeledDataset(parts[1], names),
            LabeledDataset(parts[2], names))


# ---------------------------------------------------------------------------
# image loading


def load_image(source, channels: int | None = None) -> np.ndarray:
    """Decode an image file to a float32 [h, w, c] array in [0, 1].

    channels=1 forces grayscale, channels=3 forces RGB; None keeps the
    file's own layout (grayscale stays single-channel).
    """
    path = Path(source)
    try:
        with Image.open(path) as img:
            if channels == 1:
                img = img.convert("L")
            elif channels == 3:
                img = img.convert("RGB")
            elif img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centres and no antialias filter.

    Source coordinates are (dst + 0.5) * in/out - 0.5, clamped at the
    borders.  Interpolation uses the v0 + w*(v1 - v0) form so a constant
    image stays exactly constant; an identity resize returns a bitwise copy.
    """
    if img.ndim != 3:
        raise DimensionError(f"resize_bilinear expects [h, w, c], got {img.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target extents must be >= 1, got {out_h}x{out_w}")
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(src), 0, n_in - 1).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = np.clip(src - lo, 0.0, 1.0).astype(img.dtype)
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    top = img[y0][:, x0] + fx[None, :, None] * (img[y0][:, x1] - img[y0][:, x0])
    bot = img[y1][:, x0] + fx[None, :, None] * (img[y1][:, x1] - img[y1][:, x0])
    out = top + fy[:, None, None] * (bot - top)
    return np.clip(out, img.min(), img.max())


# ---------------------------------------------------------------------------
# batching


class BatchLoader:
    """Turns dataset samples into stacked input/label arrays.

    Handles decoding, channel adaptation, resizing and dtype; optionally
    caches decoded file sources (decided automatically from the projected
    in-memory size unless forced).
    """

    _CACHE_BUDGET_BYTES = 512 * 1024 * 1024

    def __init__(self, image_hw: tuple | None = None, channels: int | None = None,
                 dtype=np.float32, cache: bool | None = None):
        self.image_hw = image_hw
        self.channels = channels
        self.dtype = dtype
        self._cache_flag = cache
        self._cache: dict = {}

    def _cache_enabled(self, ds: LabeledDataset) -> bool:
        if self._cache_flag is not None:
            return self._cache_flag
        if self.image_hw is None:
            return False
        h, w = self.image_hw
        c = self.channels or 3
        return len(ds.samples) * h * w * c * 4 <= self._CACHE_BUDGET_BYTES

    def prepare(self, source) -> np.ndarray:
        if isinstance(source, np.ndarray):
            img = source if source.ndim == 3 else source[:, :, None]
        else:
            img = load_image(source, channels=self.channels)
        if self.channels is not None and img.shape[2] != self.channels:
            if img.shape[2] == 1 and self.channels == 3:
                img = np.repeat(img, 3, axis=2)
            elif img.shape[2] == 3 and self.channels == 1:
                img = img.mean(axis=2, keepdims=True)
            else:
                raise DataError(
                    f"cannot adapt image with {img.shape[2]} channels to "
                    f"{self.channels}"
                )
        if self.image_hw is not None and img.shape[:2] != tuple(self.image_hw):
            img = resize_bilinear(img, *self.image_hw)
        return img.astype(self.dtype, copy=False)

    def _fetch(self, source, use_cache: bool) -> np.ndarray:
        if not use_cache or isinstance(source, np.ndarray):
            return self.prepare(source)
        key = str(source)
        hit = self._cache.get(key)
        if hit is None:
            hit = self.prepare(source)
            self._cache[key] = hit
        return hit

    def batches(self, ds: LabeledDataset, batch_size: int, shuffle: bool = False,
                rng: np.random.Generator | int | None = None):
        """Yield (x [b, h, w, c], labels [b]) covering the dataset once."""
        if batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {batch_size}")
        n = len(ds.samples)
        order = np.arange(n)
        if shuffle:
            if rng is None:
                raise DataError("shuffled batching needs an rng or seed")
            if not isinstance(rng, np.random.Generator):
                rng = np.random.default_rng(rng)
            order = rng.permutation(n)
        use_cache = self._cache_enabled(ds)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xs = [self._fetch(ds.samples[i][0], use_cache) for i in idx]
            labels = np.array([ds.samples[i][1] for i in idx], dtype=np.int64)
            yield np.stack(xs), labels


def batches(ds: LabeledDataset, batch_size: int, shuffle: bool = False,
            seed: int | None = None):
    """Module-level convenience wrapper around a per-call BatchLoader."""
    loader = BatchLoader(cache=False)
    return loader.batches(ds, batch_size, shuffle=shuffle, rng=seed)


# ---------------------------------------------------------------------------
# directory / manifest scanning


def scan_directory(root) -> LabeledDataset:
    """Build a dataset from root/<class_name>/*.png|jpg|jpeg."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} contains no class directories")
    class_names, index = encode_labels(d.name for d in class_dirs)
    samples = []
    for d in class_dirs:
        files = sorted(p for p in d.iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class directory {d} contains no images")
        samples.extend((p, index[d.name]) for p in files)
    return LabeledDataset(samples=samples, class_names=class_names)


def load_manifest(csv_path) -> LabeledDataset:
    """Build a dataset from a CSV manifest with header ``path,label``.

    Relative paths resolve against the manifest's directory.
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise DataError(f"manifest not found: {csv_path}")
    rows = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise DataError(
                f"manifest {csv_path} must start with header 'path,label', "
                f"got {header!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"manifest {csv_path} line {lineno}: expected "
                                f"2 fields, got {len(row)}")
            rows.append((row[0].strip(), row[1].strip()))
    if not rows:
        raise DataError(f"manifest {csv_path} lists no samples")
    class_names, index = encode_labels(label for _, label in rows)
    base = csv_path.parent
    samples = [(base / p if not Path(p).is_absolute() else Path(p), index[label])
               for p, label in rows]
    return LabeledDataset(samples=samples, class_names=class_names)


# ---------------------------------------------------------------------------
# synthetic data


def make_synthetic(n_per_class: int, h: int, w: int, seed: int) -> LabeledDataset:
    """Two-class synthetic imagery held in memory.

    Class ``clean`` (0) is Gaussian background noise (mean 0.2, sigma 0.1);
    class ``lesion`` (1) adds a bright ellipse (pixel intensity 0.8 with
    sigma 0.1) at a random centre with random axes, kept inside the frame.
    All pixels are clipped to [0, 1].
    """
    if n_per_class < 1 or h < 1 or w < 1:
        raise DataError(
            f"synthetic dataset needs positive sizes, got n={n_per_class}, "
            f"{h}x{w}"
        )
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    samples = []
    for _ in range(n_per_class):
        img = np.clip(rng.normal(0.2, 0.1, (h, w)), 0.0, 1.0)
        samples.append((img.astype(np.float32)[:, :, None], 0))
    for _ in range(n_per_class):
        img = rng.normal(0.2, 0.1, (h, w))
        cx = rng.uniform(0.3, 0.7) * w
        cy = rng.uniform(0.3, 0.7) * h
        rx = rng.uniform(0.12, 0.3) * w
        ry = rng.uniform(0.12, 0.3) * h
        mask = (((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2) <= 1.0
        img[mask] = rng.normal(0.8, 0.1, int(mask.sum()))
        img = np.clip(img, 0.0, 1.0)
        samples.append((img.astype(np.float32)[:, :, None], 1))
    return LabeledDataset(samples=samples, class_names=["clean", "lesion"])


def save_as_pngs(ds: LabeledDataset, out_dir) -> int:
    """Materialise in-memory samples as 8-bit PNGs, one directory per class."""
    out_dir = Path(out_dir)
    counters = [0] * len(ds.class_names)
    for name in ds.class_names:
        (out_dir / name).mkdir(parents=True, exist_ok=True)
    for source, label in ds.samples:
        if not isinstance(source, np.ndarray):
            raise DataError("save_as_pngs expects in-memory array samples")
        name = ds.class_names[label]
        arr = np.round(source * 255.0).astype(np.uint8)
        if arr.shape[2] == 1:
            img = Image.fromarray(arr[:, :, 0], mode="L")
        else:
            img = Image.fromarray(arr, mode="RGB")
        img.save(out_dir / name / f"{name}_{counters[label]:05d}.png")
        counters[label] += 1
    return sum(counters)

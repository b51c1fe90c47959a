"""Manifests, preprocessing, online augmentation and batching.

A manifest is a UTF-8 CSV with header
``image_path,subject_id,gender,region,<AU columns...>``. Image paths are
resolved relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import functools
import io
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ContractError, ManifestError

IMAGE_SIZE = 64
BASE_COLUMNS = ("image_path", "subject_id", "gender", "region")
GENDERS = ("M", "F", "unknown")
LABEL_KINDS = ("binary", "intensity")
LUMA = (0.299, 0.587, 0.114)
POSITIVE_INTENSITY = 2


@dataclass(frozen=True)
class SampleRecord:
    image_ref: str
    subject_id: str
    gender: str
    region: str
    labels: tuple
    row: int = 0


@dataclass
class Manifest:
    au_columns: tuple
    label_kind: str
    records: list
    root: Path | None = None

    def __post_init__(self):
        self.au_columns = tuple(self.au_columns)
        if not self.au_columns:
            raise ManifestError("manifest declares no AU columns")
        if len(set(self.au_columns)) != len(self.au_columns):
            raise ManifestError("duplicate AU column names")
        if self.label_kind not in LABEL_KINDS:
            raise ConfigError(f"label_kind must be one of {LABEL_KINDS}, got {self.label_kind!r}")

    def __len__(self):
        return len(self.records)

    @functools.cached_property
    def labels(self):
        if not self.records:
            return np.zeros((0, len(self.au_columns)), dtype=np.int64)
        return np.array([r.labels for r in self.records], dtype=np.int64)

    @functools.cached_property
    def subject_ids(self):
        return np.array([r.subject_id for r in self.records], dtype=object)

    @functools.cached_property
    def genders(self):
        return np.array([r.gender for r in self.records], dtype=object)

    def subjects(self):
        """Distinct subject ids, sorted."""
        return sorted(set(self.subject_ids.tolist()))

    def subject_genders(self):
        out = {}
        for r in self.records:
            out.setdefault(r.subject_id, r.gender)
        return out

    def subset(self, indices):
        return Manifest(self.au_columns, self.label_kind, [self.records[int(i)] for i in indices], self.root)

    def select_columns(self, names):
        """Manifest restricted (and reordered) to the named AU columns."""
        try:
            idx = [self.au_columns.index(n) for n in names]
        except ValueError as exc:
            raise ConfigError(f"unknown AU column: {exc}") from None
        recs = [replace(r, labels=tuple(r.labels[i] for i in idx)) for r in self.records]
        return Manifest(tuple(names), self.label_kind, recs, self.root)

    def image_path(self, record):
        p = Path(record.image_ref)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def binarize_intensity(intensity):
    """1 if the coded intensity is at least 2, else 0."""
    v = int(intensity)
    if v != intensity or not 0 <= v <= 5:
        raise ContractError(f"intensity must be an integer in 0..5, got {intensity!r}")
    return int(v >= POSITIVE_INTENSITY)


def binarize_manifest(manifest):
    if manifest.label_kind == "binary":
        return manifest
    recs = [replace(r, labels=tuple(binarize_intensity(v) for v in r.labels)) for r in manifest.records]
    return Manifest(manifest.au_columns, "binary", recs, manifest.root)


def _parse_rows(reader, label_kind, source):
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{source}: empty file, header row missing", row=1) from None
    header = [h.strip() for h in header]
    for col in ("image_path", "subject_id"):
        if col not in header:
            raise ManifestError(f"{source}: missing required column", row=1, column=col)
    seen = set()
    for h in header:
        if h in seen:
            raise ManifestError(f"{source}: duplicate column", row=1, column=h)
        seen.add(h)
    au_cols = [h for h in header if h not in BASE_COLUMNS]
    if not au_cols:
        raise ManifestError(f"{source}: no AU label columns", row=1)
    pos = {h: i for i, h in enumerate(header)}
    hi = 1 if label_kind == "binary" else 5
    records = []
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ManifestError(f"{source}: expected {len(header)} fields, got {len(row)}", row=rownum)
        get = lambda c: row[pos[c]].strip() if c in pos else ""  # noqa: E731
        subject = get("subject_id")
        if not subject:
            raise ManifestError(f"{source}: empty subject_id", row=rownum, column="subject_id")
        image = get("image_path")
        if not image:
            raise ManifestError(f"{source}: empty image_path", row=rownum, column="image_path")
        gender = get("gender") or "unknown"
        if gender not in GENDERS:
            raise ManifestError(f"{source}: gender must be one of {GENDERS}", row=rownum, column="gender")
        labels = []
        for c in au_cols:
            cell = row[pos[c]].strip()
            try:
                v = int(cell)
            except ValueError:
                raise ManifestError(f"{source}: label {cell!r} is not an integer", row=rownum, column=c) from None
            if not 0 <= v <= hi:
                raise ManifestError(f"{source}: {label_kind} label {v} outside 0..{hi}", row=rownum, column=c)
            labels.append(v)
        records.append(SampleRecord(image, subject, gender, get("region"), tuple(labels), rownum))
    return au_cols, records


def load_manifest(path, label_kind="binary"):
    """Parse and validate a manifest CSV. Row numbers count the header as row 1."""
    if label_kind not in LABEL_KINDS:
        raise ConfigError(f"label_kind must be one of {LABEL_KINDS}, got {label_kind!r}")
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        au_cols, records = _parse_rows(csv.reader(fh), label_kind, path.name)
    return Manifest(tuple(au_cols), label_kind, records, path.parent)


def parse_manifest_text(text, label_kind="binary", root=None):
    au_cols, records = _parse_rows(csv.reader(io.StringIO(text)), label_kind, "<text>")
    return Manifest(tuple(au_cols), label_kind, records, Path(root) if root else None)


def write_manifest(manifest, path, image_root=None):
    """Write ``manifest`` as CSV. Image paths are made relative to ``path``'s directory when possible."""
    path = Path(path)
    out_dir = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(BASE_COLUMNS) + list(manifest.au_columns))
        for r in manifest.records:
            ref = r.image_ref
            if manifest.root is not None and not Path(ref).is_absolute():
                full = (Path(manifest.root) / ref).resolve()
                ref = os.path.relpath(full, out_dir)
            w.writerow([ref, r.subject_id, r.gender, r.region, *r.labels])


# -- preprocessing ---------------------------------------------------------

def bilinear_matrix(n_in, n_out):
    """Interpolation matrix (n_out, n_in) with half-pixel centres and edge clamping."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    return m


def resize_bilinear(image, height, width):
    """Resize a 2-D array or (H, W, C) array with separable bilinear interpolation."""
    a = np.asarray(image, dtype=np.float64)
    ry = bilinear_matrix(a.shape[0], height)
    rx = bilinear_matrix(a.shape[1], width)
    if a.ndim == 2:
        return ry @ a @ rx.T
    return np.einsum("ih,hwc,jw->ijc", ry, a, rx)


def pad_to_square(image):
    """Zero-pad the shorter side so the image becomes square (centred)."""
    h, w = image.shape[:2]
    side = max(h, w)
    top, left = (side - h) // 2, (side - w) // 2
    pads = [(top, side - h - top), (left, side - w - left)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pads)


def to_unit_range(image):
    a = np.asarray(image)
    if a.dtype.kind in "ui":
        return a.astype(np.float64) / np.iinfo(a.dtype).max
    if a.dtype == bool:
        return a.astype(np.float64)
    return np.clip(a.astype(np.float64), 0.0, 1.0)


def preprocess(image, in_channels=1, pad_square=True, size=IMAGE_SIZE):
    """Raster -> (C, size, size) float32 tensor with zero mean.

    Steps: scale to [0, 1], optional square zero-padding, luma grayscale
    conversion (when ``in_channels`` is 1), bilinear resize, per-image mean
    subtraction.
    """
    a = np.asarray(image)
    if a.ndim not in (2, 3) or 0 in a.shape:
        raise ContractError(f"expected a non-empty 2-D or 3-D raster, got dims {a.shape}")
    if a.ndim == 3 and a.shape[2] == 4:
        a = a[:, :, :3]
    if a.ndim == 3 and a.shape[2] not in (1, 3):
        raise ContractError(f"unsupported channel count {a.shape[2]}")
    a = to_unit_range(a)
    if pad_square:
        a = pad_to_square(a)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if in_channels == 1:
        if a.ndim == 3:
            a = a @ np.asarray(LUMA)
        out = resize_bilinear(a, size, size)[None]
    elif in_channels == 3:
        if a.ndim == 2:
            a = np.repeat(a[:, :, None], 3, axis=2)
        out = resize_bilinear(a, size, size).transpose(2, 0, 1)
    else:
        raise ConfigError(f"in_channels must be 1 or 3, got {in_channels}")
    out = out - out.mean()
    return out.astype(np.float32)


def load_image(path):
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im)


# -- augmentation ----------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    max_shear: float = 0.1
    scale_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        lo, hi = self.scale_range
        vals = (self.flip_prob, self.max_rotation_deg, self.max_shear, lo, hi)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("augmentation parameters must be finite")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0 < lo <= 1.0 <= hi:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= 1 <= hi, got {self.scale_range}")
        if self.max_rotation_deg < 0 or self.max_shear < 0:
            raise ConfigError("rotation and shear magnitudes must be non-negative")


@dataclass(frozen=True)
class AffineParams:
    flip: bool
    rotation_deg: float
    shear: float
    scale: float


def sample_affine(cfg, rng):
    """Draw one set of transform parameters; always consumes four draws."""
    u = rng.random(4)
    lo, hi = cfg.scale_range
    return AffineParams(
        flip=bool(u[0] < cfg.flip_prob),
        rotation_deg=float((2.0 * u[1] - 1.0) * cfg.max_rotation_deg),
        shear=float((2.0 * u[2] - 1.0) * cfg.max_shear),
        scale=float(lo + u[3] * (hi - lo)),
    )


def affine_matrix(params):
    """Forward 2x2 map in (row, col) coordinates about the image centre."""
    t = math.radians(params.rotation_deg)
    c, s = math.cos(t), math.sin(t)
    flip = np.diag([1.0, -1.0 if params.flip else 1.0])
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, 0.0], [params.shear, 1.0]])
    return params.scale * shear @ rot @ flip


def hflip(sample):
    return np.ascontiguousarray(sample[..., ::-1])


def apply_affine(sample, params):
    """Warp a (C, H, W) sample with bilinear resampling and zero fill."""
    if params.rotation_deg == 0.0 and params.shear == 0.0 and params.scale == 1.0:
        return hflip(sample) if params.flip else sample.copy()
    fwd = affine_matrix(params)
    inv = np.linalg.inv(fwd)
    h, w = sample.shape[-2:]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - inv @ centre
    out = np.empty_like(sample)
    for ch in range(sample.shape[0]):
        ndimage.affine_transform(
            sample[ch], inv, offset=offset, output=out[ch], order=1, mode="grid-constant", cval=0.0, prefilter=False
        )
    return out


def augment(sample, labels, cfg, rng):
    """Randomly flip/rotate/shear/scale ``sample``; labels pass through unchanged."""
    params = sample_affine(cfg, rng)
    return apply_affine(np.asarray(sample), params), labels


# -- batching --------------------------------------------------------------

def sample_rng(seed, epoch, index):
    """Generator keyed by (seed, epoch, sample index), independent of worker order."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def batch_indices(n, batch_size, seed=0, epoch=0, shuffle=True):
    """Index arrays for one epoch; the final batch may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be at least 1, got {batch_size}")
    if n < 1:
        raise ConfigError("cannot batch an empty dataset")
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n) if shuffle else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


class ArrayDataset:
    """Preprocessed images held in memory: X of dims (N, C, 64, 64), Y of dims (N, L)."""

    def __init__(self, X, Y, subject_ids=None, augment=None, seed=0):
        self.X = np.asarray(X, dtype=np.float32)
        self.Y = np.asarray(Y)
        if len(self.X) != len(self.Y):
            raise ConfigError(f"{len(self.X)} images but {len(self.Y)} label rows")
        self.subject_ids = (
            np.asarray(subject_ids, dtype=object) if subject_ids is not None else np.arange(len(self.X)).astype(object)
        )
        self.augment = augment
        self.seed = seed

    def __len__(self):
        return len(self.X)

    @property
    def labels(self):
        return self.Y

    @property
    def in_channels(self):
        return self.X.shape[1]

    def image(self, i):
        return self.X[i]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return ArrayDataset(self.X[idx], self.Y[idx], self.subject_ids[idx], self.augment, self.seed)

    def batch(self, indices, epoch=0, training=False):
        xs = []
        for i in indices:
            img = self.image(int(i))
            if training and self.augment is not None:
                img, _ = augment(img, None, self.augment, sample_rng(self.seed, epoch, i))
            xs.append(img)
        return np.stack(xs).astype(np.float32), self.labels[np.asarray(indices)].astype(np.float32)


class ManifestDataset(ArrayDataset):
    """Images decoded from a manifest on first use, then kept preprocessed in memory."""

    def __init__(self, manifest, in_channels=1, augment=None, seed=0, pad_square=True, cache=None):
        if len(manifest) == 0:
            raise ConfigError("manifest has no records")
        if manifest.label_kind != "binary":
            manifest = binarize_manifest(manifest)
        self.manifest = manifest
        self._in_channels = in_channels
        self.augment = augment
        self.seed = seed
        self.pad_square = pad_square
        self.Y = manifest.labels
        self.subject_ids = manifest.subject_ids
        # shared across datasets built from the same images
        self.cache = cache if cache is not None else {}

    def __len__(self):
        return len(self.manifest)

    @property
    def in_channels(self):
        return self._in_channels

    def image(self, i):
        path = self.manifest.image_path(self.manifest.records[i])
        key = (str(path), self._in_channels, self.pad_square)
        img = self.cache.get(key)
        if img is None:
            img = preprocess(load_image(path), self._in_channels, self.pad_square)
            self.cache[key] = img
        return img

    def subset(self, indices):
        return ManifestDataset(
            self.manifest.subset(indices), self._in_channels, self.augment, self.seed, self.pad_square, self.cache
        )


def as_dataset(data, in_channels=1, augment=None, seed=0, cache=None):
    if isinstance(data, ArrayDataset):
        return data
    if isinstance(data, Manifest):
        return ManifestDataset(data, in_channels, augment, seed, cache=cache)
    raise ConfigError(f"expected a Manifest or dataset, got {type(data).__name__}")


def iterate_batches(data, batch_size, shuffle_seed=0, training=True, epoch=0, augment=None, in_channels=1):
    """Yield ``(images, labels)`` batches covering every record once.

    Order is shuffled by ``(shuffle_seed, epoch)`` when training; augmentation
    is applied only when training.
    """
    ds = as_dataset(data, in_channels, augment, shuffle_seed)
    if len(ds) == 0:
        raise ConfigError("cannot batch an empty dataset")
    for idx in batch_indices(len(ds), batch_size, shuffle_seed, epoch, shuffle=training):
        yield ds.batch(idx, epoch, training)

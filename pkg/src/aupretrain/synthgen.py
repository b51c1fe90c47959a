"""Synthetic face-like images with planted, locally rendered labels.

Each subject has persistent identity factors: skin tone and tint, face
ellipse geometry, a low-frequency texture, a per-subject offset and
contrast for the label glyphs. Label ``l`` is drawn as a small glyph at its
own location on the face when the true label is present. Recorded labels
are the true labels with each entry flipped independently at
``label_noise_rate``, standing in for an imperfect automatic annotator.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .datapipe import Manifest, SampleRecord, load_manifest, write_manifest
from .errors import ConfigError

# presence AUs of the automatic annotator, AU45 excluded
AU_NAMES = (
    "AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU10", "AU12",
    "AU14", "AU15", "AU17", "AU20", "AU23", "AU25", "AU26", "AU28",
)
# the 12 manually coded AUs of the fine-tuning corpus
FINETUNE_AUS = ("AU01", "AU02", "AU04", "AU05", "AU06", "AU09", "AU12", "AU15", "AU17", "AU20", "AU25", "AU26")
REGIONS = ("N. America / Europe", "S. Asia", "N.E. Asia", "S.E. Asia", "Central / South America", "Africa")
GLYPH_RADIUS = 3
SHIFT_MAX = 2  # per-image translation, pixels
OFFSET_MAX = 2  # per-subject glyph displacement, pixels
_GRID_COLS = 5


def label_names(n_labels):
    if n_labels <= len(AU_NAMES):
        return AU_NAMES[:n_labels]
    return tuple(f"L{i + 1:02d}" for i in range(n_labels))


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 400
    images_per_subject: int = 20
    n_labels: int = 17
    label_noise_rate: float = 0.2
    image_size: int = 64
    seed: int = 0
    first_subject: int = 0
    label_prevalence: float = 0.35

    def __post_init__(self):
        if self.n_subjects < 1 or self.images_per_subject < 1 or self.n_labels < 1:
            raise ConfigError("n_subjects, images_per_subject and n_labels must be positive")
        if not 0.0 <= self.label_noise_rate < 0.5:
            raise ConfigError(f"label_noise_rate must lie in [0, 0.5), got {self.label_noise_rate}")
        if self.image_size < 32:
            raise ConfigError(f"image_size must be at least 32, got {self.image_size}")
        if self.n_labels > 20:
            raise ConfigError("at most 20 glyph slots are available")
        if not 0.0 < self.label_prevalence < 1.0:
            raise ConfigError("label_prevalence must lie in (0, 1)")


@dataclass(frozen=True)
class SubjectFactors:
    subject_index: int
    gender: str
    region: str
    skin: float
    tint: tuple
    centre: tuple  # face centre (row, col) as fractions of the image size
    axes: tuple  # ellipse semi-axes (row, col) as fractions
    texture: tuple  # ((amplitude, freq_row, freq_col, phase), ...)
    glyph_offset: tuple  # (row, col) pixels
    glyph_contrast: float


def subject_factors(seed, subject_index):
    rng = np.random.default_rng([int(seed), int(subject_index), 0])
    waves = tuple(
        (float(rng.uniform(0.05, 0.12)), float(rng.uniform(-0.35, 0.35)), float(rng.uniform(-0.35, 0.35)),
         float(rng.uniform(0, 2 * np.pi)))
        for _ in range(3)
    )
    return SubjectFactors(
        subject_index=int(subject_index),
        gender="M" if subject_index % 2 == 0 else "F",
        region=REGIONS[int(rng.integers(len(REGIONS)))],
        skin=float(rng.uniform(0.45, 0.8)),
        tint=tuple(float(v) for v in rng.uniform(0.8, 1.0, size=3)),
        centre=(float(rng.uniform(0.47, 0.53)), float(rng.uniform(0.47, 0.53))),
        axes=(float(rng.uniform(0.40, 0.46)), float(rng.uniform(0.34, 0.42))),
        texture=waves,
        glyph_offset=(int(rng.integers(-OFFSET_MAX, OFFSET_MAX + 1)), int(rng.integers(-OFFSET_MAX, OFFSET_MAX + 1))),
        glyph_contrast=float(rng.uniform(0.22, 0.4)),
    )


def glyph_centre(factors, label, size, shift=(0, 0)):
    """Pixel centre (row, col) of glyph ``label`` for a given per-image shift."""
    row, col = divmod(label, _GRID_COLS)
    cy = factors.centre[0] * size + (row - 1.5) * 0.16 * size
    cx = factors.centre[1] * size + (col - 2) * 0.12 * size
    return (
        int(round(cy)) + factors.glyph_offset[0] + int(shift[0]),
        int(round(cx)) + factors.glyph_offset[1] + int(shift[1]),
    )


def _glyph_mask(kind, dy, dx):
    r = np.hypot(dy, dx)
    shapes = (
        (np.abs(dy) <= 0.5) & (np.abs(dx) <= 3),  # horizontal bar
        (np.abs(dx) <= 0.5) & (np.abs(dy) <= 3),  # vertical bar
        (np.abs(dy + dx) <= 0.7) & (r <= 3.2),  # diagonal
        (np.abs(dy - dx) <= 0.7) & (r <= 3.2),  # anti-diagonal
        np.abs(r - 2.5) <= 0.6,  # ring
        (np.maximum(np.abs(dy), np.abs(dx)) <= 1.5),  # block
        (np.abs(dy - 0.25 * dx * dx + 1.5) <= 0.6) & (np.abs(dx) <= 3),  # cup
        (np.abs(dy + 0.25 * dx * dx - 1.5) <= 0.6) & (np.abs(dx) <= 3),  # cap
        ((np.abs(dy) <= 0.5) | (np.abs(dx) <= 0.5)) & (np.maximum(np.abs(dy), np.abs(dx)) <= 3),  # cross
        (np.abs(np.maximum(np.abs(dy), np.abs(dx)) - 2.5) <= 0.5),  # square outline
    )
    return shapes[kind % len(shapes)]


def render_image(factors, true_labels, rng, size=64):
    """Render one RGB uint8 raster.

    All random draws happen before labels are consulted, so two renders with
    generators in the same state differ only inside the glyphs whose labels
    differ.
    """
    labels = np.asarray(true_labels).astype(bool)
    n = len(labels)
    shift = rng.integers(-SHIFT_MAX, SHIFT_MAX + 1, size=2)
    brightness = rng.uniform(-0.05, 0.05)
    glyph_gain = rng.uniform(0.8, 1.2, size=n)
    noise = rng.normal(0.0, 0.03, size=(size, size))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = factors.centre[0] * size + shift[0]
    cx = factors.centre[1] * size + shift[1]
    ay, ax = factors.axes[0] * size, factors.axes[1] * size
    face = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    texture = np.zeros((size, size))
    for amp, fy, fx, phase in factors.texture:
        texture += amp * np.sin(fy * (yy - shift[0]) + fx * (xx - shift[1]) + phase)
    img = np.where(face, factors.skin + texture, 0.12) + brightness

    for label in np.flatnonzero(labels):
        gy, gx = glyph_centre(factors, int(label), size, shift)
        y0, y1 = max(gy - GLYPH_RADIUS, 0), min(gy + GLYPH_RADIUS + 1, size)
        x0, x1 = max(gx - GLYPH_RADIUS, 0), min(gx + GLYPH_RADIUS + 1, size)
        mask = _glyph_mask(int(label), yy[y0:y1, x0:x1] - gy, xx[y0:y1, x0:x1] - gx)
        img[y0:y1, x0:x1] -= mask * factors.glyph_contrast * glyph_gain[label]

    img = img + noise
    rgb = np.clip(img[:, :, None] * np.asarray(factors.tint), 0.0, 1.0)
    return np.round(rgb * 255).astype(np.uint8)


def image_rng(seed, subject_index, image_index):
    return np.random.default_rng([int(seed), int(subject_index), int(image_index), 1])


def sample_labels(rng, n_labels, prevalence, noise_rate):
    """(true, recorded) binary label vectors for one image."""
    true = (rng.random(n_labels) < prevalence).astype(np.int64)
    flips = rng.random(n_labels) < noise_rate
    return true, np.where(flips, 1 - true, true)


def generate_dataset(spec, out_dir):
    """Render images and write ``manifest.csv`` plus the ``true_labels.csv`` sidecar.

    Returns the manifest of recorded (noisy) labels.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    names = label_names(spec.n_labels)
    recorded, truth = [], []
    for s in range(spec.first_subject, spec.first_subject + spec.n_subjects):
        factors = subject_factors(spec.seed, s)
        sid = f"S{s:04d}"
        for i in range(spec.images_per_subject):
            lab_rng = np.random.default_rng([int(spec.seed), s, i, 2])
            true, noisy = sample_labels(lab_rng, spec.n_labels, spec.label_prevalence, spec.label_noise_rate)
            raster = render_image(factors, true, image_rng(spec.seed, s, i), spec.image_size)
            ref = f"images/{sid}_{i:03d}.png"
            Image.fromarray(raster, mode="RGB").save(out / ref, optimize=False)
            recorded.append(SampleRecord(ref, sid, factors.gender, factors.region, tuple(int(v) for v in noisy)))
            truth.append(SampleRecord(ref, sid, factors.gender, factors.region, tuple(int(v) for v in true)))
    manifest = Manifest(names, "binary", recorded, out)
    write_manifest(manifest, out / "manifest.csv")
    write_manifest(Manifest(names, "binary", truth, out), out / "true_labels.csv")
    return manifest


def clean_manifest(out_dir):
    """Manifest of the true labels written next to a generated dataset."""
    return load_manifest(Path(out_dir) / "true_labels.csv", "binary")

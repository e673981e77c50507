"""Dataset ingestion, preprocessing, stratified splits, synthetic data.

Samples are 128x128: RGB images scaled to [0,1] (bilinear, half-pixel
centers), binary masks (nearest neighbor, then the >127 cutoff), and a class
label from the fixed four-class map. Manifests are CSV with header
``image_path,mask_path,class_name``; paths resolve relative to the manifest.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError, ShapeError
from .tensor import Rng

IMAGE_SIZE = 128

CLASS_NAMES = ("foot_ulcer", "infected_wound", "leg_ulcer", "pressure_ulcer")
CLASS_TO_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}


@dataclass
class Sample:
    image: np.ndarray  # [3,128,128] float32 in [0,1]
    mask: np.ndarray   # [1,128,128] float32 in {0,1}
    label: int


@dataclass
class Dataset:
    samples: list[Sample]
    train_idx: list[int] = field(default_factory=list)
    val_idx: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# resizing

def _src_coords(n_src: int, n_dst: int) -> np.ndarray:
    # half-pixel-center mapping: src = (dst + 0.5) * (n_src / n_dst) - 0.5
    return (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5


def resize_image(pixels: np.ndarray) -> np.ndarray:
    """8-bit HxWx3 (or HxW grayscale) -> [3,128,128] float32 in [0,1].

    Bilinear interpolation: each target pixel center maps back to source
    coordinates via the half-pixel formula, clamped at the borders, and blends
    the four surrounding pixels. A same-size image passes through unchanged.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = np.stack([pixels] * 3, axis=-1)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 or HxW pixels, got {pixels.shape}")
    h, w = pixels.shape[:2]
    if h < 1 or w < 1:
        raise ShapeError("empty image")

    sy = np.clip(_src_coords(h, IMAGE_SIZE), 0, h - 1)
    sx = np.clip(_src_coords(w, IMAGE_SIZE), 0, w - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]

    src = pixels.astype(np.float64)
    out = ((1 - fy) * (1 - fx) * src[y0[:, None], x0[None, :]]
           + (1 - fy) * fx * src[y0[:, None], x1[None, :]]
           + fy * (1 - fx) * src[y1[:, None], x0[None, :]]
           + fy * fx * src[y1[:, None], x1[None, :]])
    return (out.transpose(2, 0, 1) / 255.0).astype(np.float32)


def binarize_mask(pixels: np.ndarray) -> np.ndarray:
    """8-bit HxW mask -> [1,128,128] float32 in {0,1}.

    Nearest-neighbor resize (no interpolation, so no in-between values),
    then the fixed midpoint cutoff: value > 127 -> 1.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim == 3:  # tolerate RGB-saved masks, use first channel
        pixels = pixels[..., 0]
    if pixels.ndim != 2:
        raise ShapeError(f"expected HxW mask pixels, got {pixels.shape}")
    h, w = pixels.shape
    if h < 1 or w < 1:
        raise ShapeError("empty mask")
    ys = np.clip(np.floor((np.arange(IMAGE_SIZE) + 0.5) * (h / IMAGE_SIZE)), 0, h - 1).astype(np.intp)
    xs = np.clip(np.floor((np.arange(IMAGE_SIZE) + 0.5) * (w / IMAGE_SIZE)), 0, w - 1).astype(np.intp)
    near = pixels[ys[:, None], xs[None, :]]
    return (near > 127).astype(np.float32)[None, :, :]


# ---------------------------------------------------------------------------
# manifest I/O

MANIFEST_HEADER = ["image_path", "mask_path", "class_name"]


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im)


def load_manifest(path) -> Dataset:
    """Read a CSV manifest and decode every referenced image/mask pair."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    samples: list[Sample] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)!r}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path} line {lineno}: expected 3 columns, got {len(row)}")
            image_rel, mask_rel, class_name = (c.strip() for c in row)
            if class_name not in CLASS_TO_INDEX:
                raise ManifestError(
                    f"{path} line {lineno}: unknown class {class_name!r}, "
                    f"expected one of {CLASS_NAMES}")
            image_path = root / image_rel
            mask_path = root / mask_rel
            if not image_path.is_file():
                raise FileNotFoundError(f"{path} line {lineno}: missing image file {image_path}")
            if not mask_path.is_file():
                raise FileNotFoundError(f"{path} line {lineno}: missing mask file {mask_path}")
            samples.append(Sample(image=resize_image(_read_png(image_path)),
                                  mask=binarize_mask(_read_png(mask_path)),
                                  label=CLASS_TO_INDEX[class_name]))
    return Dataset(samples=samples)


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write samples as PNGs plus a manifest.csv; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for i, s in enumerate(dataset.samples):
            img_rel = f"images/img_{i:04d}.png"
            mask_rel = f"masks/mask_{i:04d}.png"
            rgb = np.rint(s.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(rgb, mode="RGB").save(out_dir / img_rel)
            gray = (s.mask[0] * 255).astype(np.uint8)
            Image.fromarray(gray, mode="L").save(out_dir / mask_rel)
            writer.writerow([img_rel, mask_rel, CLASS_NAMES[s.label]])
    return manifest


# ---------------------------------------------------------------------------
# splitting

def split_dataset(dataset: Dataset, val_fraction: float, seed: int) -> Dataset:
    """Per-class shuffled split; val takes round(count * val_fraction) of each class."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0,1), got {val_fraction}")
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(dataset.samples):
        by_class.setdefault(s.label, []).append(i)
    for label, idxs in sorted(by_class.items()):
        if len(idxs) < 2:
            raise ValueError(f"class {CLASS_NAMES[label]} has {len(idxs)} sample(s), need >= 2")
    rng = Rng(seed)
    train_idx: list[int] = []
    val_idx: list[int] = []
    for label in sorted(by_class):
        idxs = by_class[label]
        perm = rng.permutation(len(idxs))
        n_val = round(len(idxs) * val_fraction)
        val_idx.extend(idxs[p] for p in perm[:n_val])
        train_idx.extend(idxs[p] for p in perm[n_val:])
    return Dataset(samples=dataset.samples, train_idx=sorted(train_idx), val_idx=sorted(val_idx))


# ---------------------------------------------------------------------------
# synthetic data (desk-scale stand-in for the unavailable wound corpus)

@dataclass(frozen=True)
class BlobSpec:
    """One synthetic sample: an elliptical 'wound' on a textured background.
    Classes are separable by blob hue band and background texture frequency."""

    label: int
    cx: float
    cy: float
    ax: float
    ay: float
    theta: float
    phase_x: float
    phase_y: float
    noise_seed: int


# per-class blob fill color (hue band) and background stripe frequency
_CLASS_COLOR = ((200, 70, 60), (70, 190, 80), (70, 90, 210), (210, 190, 60))
_CLASS_FREQ = (2.0, 4.0, 6.0, 8.0)


def synth_specs(n_per_class: int, seed: int) -> list[BlobSpec]:
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = Rng(seed)
    specs = []
    for label in range(len(CLASS_NAMES)):
        for _ in range(n_per_class):
            cx, cy = rng.uniform(44.0, 84.0, 2)
            ax, ay = rng.uniform(16.0, 30.0, 2)
            theta = float(rng.uniform(0.0, math.pi, 1)[0])
            phase_x, phase_y = rng.uniform(0.0, 2 * math.pi, 2)
            noise_seed = int(rng.next_uint64(1)[0])
            specs.append(BlobSpec(label=label, cx=float(cx), cy=float(cy),
                                  ax=float(ax), ay=float(ay), theta=theta,
                                  phase_x=float(phase_x), phase_y=float(phase_y),
                                  noise_seed=noise_seed))
    return specs


def rasterize_ellipse(spec: BlobSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the rotated ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xx - spec.cx
    dy = yy - spec.cy
    u = (dx * math.cos(spec.theta) + dy * math.sin(spec.theta)) / spec.ax
    v = (-dx * math.sin(spec.theta) + dy * math.cos(spec.theta)) / spec.ay
    return u * u + v * v <= 1.0


def render_sample(spec: BlobSpec, size: int = IMAGE_SIZE) -> Sample:
    inside = rasterize_ellipse(spec, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    freq = _CLASS_FREQ[spec.label]
    stripes = np.sin(2 * math.pi * freq * xx / size + spec.phase_x) \
        * np.cos(2 * math.pi * freq * yy / size + spec.phase_y)
    bg = 110.0 + 35.0 * stripes
    img = np.stack([bg * 0.92, bg, bg * 1.08], axis=-1)

    color = np.array(_CLASS_COLOR[spec.label], dtype=np.float64)
    img[inside] = color

    nrng = Rng(spec.noise_seed)
    img += nrng.uniform(-8.0, 8.0, (size, size, 3))
    u8 = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    image = (u8.transpose(2, 0, 1).astype(np.float64) / 255.0).astype(np.float32)
    mask = inside.astype(np.float32)[None, :, :]
    return Sample(image=image, mask=mask, label=spec.label)


def synth_generate(n_per_class: int, seed: int) -> Dataset:
    """Deterministic synthetic dataset, n_per_class samples of each class."""
    return Dataset(samples=[render_sample(s) for s in synth_specs(n_per_class, seed)])

"""Tissue tiling: HSV segmentation and fixed-grid patch extraction.

A flat RGB raster (one magnification level of a slide, typically x20) is
segmented into tissue vs. background by Otsu-thresholding the HSV
saturation channel: glass background is near-white and has near-zero
saturation, stained tissue does not. The image is then cut into a
non-overlapping grid of p x p patches and patches with less than the
minimum tissue coverage are dropped.

Degenerate case: on a constant image every candidate threshold gives zero
between-class variance, so Otsu returns level 0 by tie-break. The mask is
then all-tissue when the constant color has nonzero saturation and
all-background for a white/gray image (saturation quantizes to 0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_PATCH_SIZE = 256
DEFAULT_MIN_COVERAGE = 0.5


@dataclass(frozen=True)
class PatchRecord:
    """One retained grid patch and its tissue coverage.

    Origins are pixel offsets of the patch's top-left corner and are
    always multiples of ``size``; ``coverage`` is the fraction of mask
    pixels inside the patch footprint that are tissue.
    """

    row: int
    col: int
    origin_x: int
    origin_y: int
    size: int
    coverage: float
    pixels: np.ndarray  # (size, size, 3) uint8


def validate_rgb_image(image: np.ndarray) -> np.ndarray:
    """Check an (H, W, 3) uint8 RGB array and return it as C-contiguous."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB array, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"image dimensions must be >= 1, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {image.dtype}")
    return np.ascontiguousarray(image)


def load_image(path: str | Path) -> np.ndarray:
    """Load a PNG or TIFF raster as an (H, W, 3) uint8 RGB array."""
    with Image.open(path) as handle:
        return validate_rgb_image(np.asarray(handle.convert("RGB")))


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV conversion.

    Returns a float64 array of the same spatial shape with H in [0, 360),
    S in [0, 1] and V in [0, 1]. Achromatic pixels (including black) get
    H = 0 and S = 0 by convention.
    """
    image = validate_rgb_image(image)
    rgb = image.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]

    value = rgb.max(axis=-1)
    chroma = value - rgb.min(axis=-1)

    with np.errstate(invalid="ignore", divide="ignore"):
        saturation = np.where(value > 0.0, chroma / value, 0.0)
        hue = np.select(
            [chroma == 0.0, value == r, value == g],
            [
                0.0,
                (g - b) / chroma % 6.0,
                (b - r) / chroma + 2.0,
            ],
            default=(r - g) / chroma + 4.0,
        )
    hue = hue * 60.0 % 360.0

    return np.stack([hue, saturation, value], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`, back to (H, W, 3) uint8."""
    hsv = np.asarray(hsv, dtype=np.float64)
    hue, saturation, value = hsv[..., 0], hsv[..., 1], hsv[..., 2]

    chroma = value * saturation
    sector = (hue / 60.0) % 6.0
    x = chroma * (1.0 - np.abs(sector % 2.0 - 1.0))
    zero = np.zeros_like(chroma)

    sector_idx = np.floor(sector).astype(np.int64) % 6
    r = np.choose(sector_idx, [chroma, x, zero, zero, x, chroma])
    g = np.choose(sector_idx, [x, chroma, chroma, x, zero, zero])
    b = np.choose(sector_idx, [zero, zero, x, chroma, chroma, x])

    rgb = np.stack([r, g, b], axis=-1) + (value - chroma)[..., None]
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def otsu_threshold(histogram: np.ndarray) -> int:
    """Otsu's threshold for a 256-bin intensity histogram.

    Returns the level t in [0, 255] maximizing the between-class variance
    of the split [0..t] vs [t+1..255]; ties resolve to the smallest
    qualifying level. Raises ValueError on an all-zero histogram.
    """
    histogram = np.asarray(histogram, dtype=np.float64)
    if histogram.shape != (256,):
        raise ValueError(f"expected a 256-bin histogram, got shape {histogram.shape}")
    if np.any(histogram < 0):
        raise ValueError("histogram counts must be nonnegative")
    total = histogram.sum()
    if total == 0:
        raise ValueError("no pixels: histogram is empty")

    levels = np.arange(256, dtype=np.float64)
    weight_lo = np.cumsum(histogram)
    mass_lo = np.cumsum(histogram * levels)
    weight_hi = total - weight_lo
    mass_total = mass_lo[-1]

    # sigma_b^2(t) = w0 * w1 * (mu0 - mu1)^2; zero when either class is empty.
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_lo = mass_lo / weight_lo
        mean_hi = (mass_total - mass_lo) / weight_hi
        variance = weight_lo * weight_hi * (mean_lo - mean_hi) ** 2
    variance = np.nan_to_num(variance, nan=0.0)

    return int(np.argmax(variance))


def quantize_saturation(image: np.ndarray) -> np.ndarray:
    """Saturation channel of an RGB image, rounded to uint8 [0, 255]."""
    saturation = rgb_to_hsv(image)[..., 1]
    return np.round(saturation * 255.0).astype(np.uint8)


def segment_tissue(image: np.ndarray) -> np.ndarray:
    """Tissue mask by Otsu on the quantized saturation channel.

    A pixel is tissue iff its quantized saturation is strictly above the
    Otsu level. Returns an (H, W) bool array matching the image.
    """
    saturation = quantize_saturation(image)
    histogram = np.bincount(saturation.ravel(), minlength=256)
    level = otsu_threshold(histogram)
    return saturation > level


def patch_grid_shape(height: int, width: int, patch_size: int) -> tuple[int, int]:
    """(rows, cols) of the non-overlapping patch grid; border strips drop."""
    return height // patch_size, width // patch_size


def extract_patches(
    image: np.ndarray,
    mask: np.ndarray,
    patch_size: int = DEFAULT_PATCH_SIZE,
    min_coverage: float = DEFAULT_MIN_COVERAGE,
) -> list[PatchRecord]:
    """Cut the image into grid patches and keep those with enough tissue.

    Iterates the floor(H/p) x floor(W/p) grid in row-major order and
    retains a patch iff its tissue coverage is >= ``min_coverage``
    (i.e. patches with *less* than the minimum are excluded). Partial
    border strips narrower than ``patch_size`` are discarded.
    """
    image = validate_rgb_image(image)
    mask = np.asarray(mask)
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    if mask.shape != image.shape[:2]:
        raise ValueError(
            f"mask shape {mask.shape} does not match image shape {image.shape[:2]}"
        )
    mask = mask.astype(bool)

    rows, cols = patch_grid_shape(image.shape[0], image.shape[1], patch_size)
    area = float(patch_size * patch_size)

    patches = []
    for row in range(rows):
        y = row * patch_size
        for col in range(cols):
            x = col * patch_size
            footprint = mask[y : y + patch_size, x : x + patch_size]
            coverage = float(footprint.sum()) / area
            if coverage < min_coverage:
                continue
            patches.append(
                PatchRecord(
                    row=row,
                    col=col,
                    origin_x=x,
                    origin_y=y,
                    size=patch_size,
                    coverage=coverage,
                    pixels=image[y : y + patch_size, x : x + patch_size].copy(),
                )
            )
    return patches


def tile_slide(
    image: np.ndarray,
    patch_size: int = DEFAULT_PATCH_SIZE,
    min_coverage: float = DEFAULT_MIN_COVERAGE,
) -> tuple[np.ndarray, list[PatchRecord]]:
    """Segment then extract; returns (mask, retained patches)."""
    mask = segment_tissue(image)
    return mask, extract_patches(image, mask, patch_size, min_coverage)


# --------------------------------------------------------------------------
# Patch manifest serialization
# --------------------------------------------------------------------------

PATCH_MANIFEST_VERSION = 1


def patch_manifest_dict(
    slide_id: str,
    patches: list[PatchRecord],
    patch_size: int,
    min_coverage: float,
    magnification: str = "x20",
    image_path: str | None = None,
) -> dict:
    """JSON-ready manifest for one slide's retained patches."""
    return {
        "format": "milfuse-patch-manifest",
        "version": PATCH_MANIFEST_VERSION,
        "slide_id": slide_id,
        "patch_size": patch_size,
        "min_coverage": min_coverage,
        "magnification": magnification,
        "image": image_path,
        "patches": [
            {
                "row": p.row,
                "col": p.col,
                "origin_x": p.origin_x,
                "origin_y": p.origin_y,
                "coverage": p.coverage,
            }
            for p in patches
        ],
    }


def write_patch_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_patch_manifest(path: str | Path) -> dict:
    manifest = json.loads(Path(path).read_text())
    if manifest.get("format") != "milfuse-patch-manifest":
        raise ValueError(f"{path}: not a patch manifest")
    if manifest.get("version") != PATCH_MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


def write_patch_images(out_dir: str | Path, slide_id: str, patches: list[PatchRecord]) -> list[Path]:
    """Write each patch as ``<slide>_<row>_<col>.png``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for patch in patches:
        path = out_dir / f"{slide_id}_{patch.row}_{patch.col}.png"
        Image.fromarray(patch.pixels).save(path, format="PNG")
        paths.append(path)
    return paths

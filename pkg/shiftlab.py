#!/usr/bin/env python3
"""
shiftlab.py

Target domain construction from clean images (uint8 H x W x 3 arrays):

  A  stylization         recursive edge-preserving filter + edge re-darkening
  B  pencil sketch       grayscale, edge-preserving filter, edge tone map
  C  gray-dodge          g * 255 / (255 - blur(255 - g))
  D  natural corruptions contrast, defocus_blur, motion_blur, fog, frost, snow

sigma_s lives in (0, 200] and sigma_r in (0, 1], the ranges OpenCV accepts.
Corruption constants are the small-image (32 px) table.
"""

from typing import Dict, Literal, Optional, Tuple

import cv2
import numpy as np
from PIL import Image
from pydantic import BaseModel, Field, model_validator
from scipy import ndimage
from tqdm import tqdm

from sista_common import QUIET, ConfigurationError, ContractViolation, console, derive_seed
from toybench import ImageSet

CORRUPTIONS = ("contrast", "defocus_blur", "motion_blur", "fog", "frost", "snow")
DOMAIN_DEFAULTS = {"A": (40.0, 0.2), "B": (60.0, 0.04)}
DODGE_BLUR_SIGMA = 10.0
DODGE_BLUR_TRUNCATE = 1.0  # 21-pixel kernel at sigma=10
PENCIL_SHADE = 0.015
PENCIL_EDGE_GAIN = 4.0
SIGMA_S_MAX = 200.0
SIGMA_R_MAX = 1.0
FROST_SEED = 20230
FROST_TILE = 128


class ShiftConfig(BaseModel):
    domain: Literal["A", "B", "C", "D"]
    sigma_s: Optional[float] = Field(None, gt=0.0, le=SIGMA_S_MAX)
    sigma_r: Optional[float] = Field(None, gt=0.0, le=SIGMA_R_MAX)
    blur_sigma: float = Field(DODGE_BLUR_SIGMA, gt=0.0)
    corruption: Optional[Literal["contrast", "defocus_blur", "motion_blur", "fog", "frost", "snow"]] = None
    severity: int = Field(3, ge=1, le=5)
    seed: int = 0

    @model_validator(mode="after")
    def _domain_fields(self):
        if self.domain in DOMAIN_DEFAULTS:
            s, r = DOMAIN_DEFAULTS[self.domain]
            if self.sigma_s is None:
                self.sigma_s = s
            if self.sigma_r is None:
                self.sigma_r = r
        if self.domain == "D" and self.corruption is None:
            raise ValueError("domain D needs a corruption name")
        return self

    def label(self) -> str:
        if self.domain == "D":
            return f"D-{self.corruption}-{self.severity}"
        return self.domain


# -----------------------------
# helpers
# -----------------------------
def _check_image(img: np.ndarray) -> None:
    if not isinstance(img, np.ndarray) or img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"expected an RGB uint8 H x W x 3 array, got {getattr(img, 'dtype', type(img))} {getattr(img, 'shape', '')}")


def _to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _gray(img: np.ndarray) -> np.ndarray:
    return np.asarray(Image.fromarray(img).convert("L"), dtype=np.uint8)


def _gray_float(x: np.ndarray) -> np.ndarray:
    return x @ np.array([0.299, 0.587, 0.114])


def _check_sigmas(sigma_s: float, sigma_r: float) -> None:
    if sigma_s is None or sigma_r is None or not (0 < sigma_s <= SIGMA_S_MAX) or not (0 < sigma_r <= SIGMA_R_MAX):
        raise ConfigurationError(f"need 0 < sigma_s <= {SIGMA_S_MAX:g} and 0 < sigma_r <= {SIGMA_R_MAX:g}, got {sigma_s}, {sigma_r}")


def _gradient_magnitude(g: np.ndarray) -> np.ndarray:
    """Per-pixel intensity slope (Sobel, normalised to unit step)."""
    g = np.ascontiguousarray(g, dtype=np.float64)
    gx = cv2.Sobel(g, cv2.CV_64F, 1, 0, ksize=3, borderType=cv2.BORDER_REPLICATE) / 4.0
    gy = cv2.Sobel(g, cv2.CV_64F, 0, 1, ksize=3, borderType=cv2.BORDER_REPLICATE) / 4.0
    return np.hypot(gx, gy)


def edge_preserving_smooth(img: np.ndarray, sigma_s: float, sigma_r: float) -> np.ndarray:
    """Recursive domain-transform filter on an RGB uint8 image; float result in [0, 1]."""
    _check_sigmas(sigma_s, sigma_r)
    bgr = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    out = cv2.edgePreservingFilter(bgr, flags=cv2.RECURS_FILTER, sigma_s=float(sigma_s), sigma_r=float(sigma_r))
    return _to_float(cv2.cvtColor(out, cv2.COLOR_BGR2RGB))


# -----------------------------
# Domains A, B, C
# -----------------------------
def apply_stylization(img: np.ndarray, sigma_s: float = 40.0, sigma_r: float = 0.2) -> np.ndarray:
    _check_image(img)
    smooth = edge_preserving_smooth(img, sigma_s, sigma_r)
    edges = np.clip(_gradient_magnitude(_gray_float(smooth)), 0.0, 1.0)
    # edge darkening fades out as the range kernel collapses
    strength = 0.25 * sigma_r / (sigma_r + 0.05)
    return _to_uint8(smooth * (1.0 - strength * edges)[..., None])


def apply_pencil_sketch(img: np.ndarray, sigma_s: float = 60.0, sigma_r: float = 0.04) -> np.ndarray:
    _check_image(img)
    gray = np.repeat(_gray(img)[..., None], 3, axis=2)
    smooth = edge_preserving_smooth(gray, sigma_s, sigma_r)[..., 0]
    darkness = np.clip(_gradient_magnitude(smooth) * PENCIL_EDGE_GAIN, 0.0, 1.0)
    tone = (1.0 - PENCIL_SHADE) * (1.0 - darkness)
    return np.repeat(_to_uint8(tone)[..., None], 3, axis=2)


def apply_gray_dodge(img: np.ndarray, blur_sigma: float = DODGE_BLUR_SIGMA) -> np.ndarray:
    _check_image(img)
    g = _gray(img).astype(np.int64)
    ksize = 2 * int(DODGE_BLUR_TRUNCATE * blur_sigma + 0.5) + 1
    blurred = cv2.GaussianBlur((255 - g).astype(np.float64), (ksize, ksize), sigmaX=blur_sigma, borderType=cv2.BORDER_REFLECT)
    b = np.floor(blurred + 0.5).astype(np.int64)
    denom = 255 - b
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.floor(g * 255.0 / np.where(denom == 0, 1, denom) + 0.5)
    out = np.where(denom == 0, 255, np.minimum(255, ratio))
    out = np.where(g == 0, 0, out).astype(np.uint8)
    return np.repeat(out[..., None], 3, axis=2)


# -----------------------------
# Domain D
# -----------------------------
_CONTRAST = (0.75, 0.5, 0.4, 0.3, 0.15)
_DEFOCUS = ((0.3, 0.4), (0.4, 0.5), (0.5, 0.6), (1.0, 0.2), (1.5, 0.1))
_MOTION = ((10, 1.0), (10, 1.5), (10, 2.0), (10, 2.5), (12, 3.0))
_FOG = ((0.2, 3.0), (0.5, 3.0), (0.75, 2.5), (1.0, 2.0), (1.5, 1.75))
_FROST = ((1.0, 0.2), (1.0, 0.3), (0.9, 0.4), (0.85, 0.4), (0.75, 0.45))
_SNOW = (
    (0.1, 0.2, 1.0, 0.6, 8, 3, 0.95),
    (0.1, 0.2, 1.0, 0.5, 10, 4, 0.9),
    (0.15, 0.3, 1.75, 0.55, 10, 4, 0.9),
    (0.25, 0.3, 2.25, 0.6, 12, 6, 0.85),
    (0.3, 0.3, 1.25, 0.65, 14, 12, 0.8),
)


def _convolve_channels(x: np.ndarray, kernel: np.ndarray, mode: str = "reflect") -> np.ndarray:
    return np.stack([ndimage.convolve(x[..., c], kernel, mode=mode) for c in range(x.shape[2])], axis=2)


def _disk_kernel(radius: float, alias_blur: float) -> np.ndarray:
    span = np.arange(-8, 9) if radius <= 8 else np.arange(-radius, radius + 1)
    X, Y = np.meshgrid(span, span)
    disk = ((X ** 2 + Y ** 2) <= radius ** 2).astype(np.float64)
    disk /= disk.sum()
    # 3x3 anti-alias blur on the kernel itself
    disk = ndimage.gaussian_filter(disk, sigma=alias_blur, truncate=1.0 / alias_blur, mode="constant")
    rows, cols = np.nonzero(disk > 1e-12)
    disk = disk[rows.min(): rows.max() + 1, cols.min(): cols.max() + 1]
    return disk / disk.sum()


def _motion_kernel(radius: int, sigma: float, angle_deg: float) -> np.ndarray:
    """One-sided trail of Gaussian weights along `angle_deg`."""
    size = 2 * radius + 1
    kernel = np.zeros((size, size))
    theta = np.deg2rad(angle_deg)
    for t in range(radius + 1):
        r = radius + int(round(t * np.sin(theta)))
        c = radius + int(round(t * np.cos(theta)))
        kernel[r, c] += np.exp(-(t ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def plasma_fractal(mapsize: int, wibble_decay: float, rng: np.random.Generator) -> np.ndarray:
    """Diamond-square height map in [0, 1]; mapsize must be a power of two."""
    if mapsize & (mapsize - 1):
        raise ContractViolation(f"plasma map size {mapsize} is not a power of two")
    grid = np.zeros((mapsize, mapsize))
    step = mapsize
    wibble = 100.0

    def wibbled_mean(a):
        return a / 4 + wibble * rng.uniform(-wibble, wibble, a.shape)

    while step >= 2:
        half = step // 2
        corners = grid[0:mapsize:step, 0:mapsize:step]
        squares = corners + np.roll(corners, -1, axis=0)
        squares = squares + np.roll(squares, -1, axis=1)
        grid[half:mapsize:step, half:mapsize:step] = wibbled_mean(squares)

        centres = grid[half:mapsize:step, half:mapsize:step]
        corners = grid[0:mapsize:step, 0:mapsize:step]
        left = centres + np.roll(centres, 1, axis=0) + corners + np.roll(corners, -1, axis=1)
        grid[0:mapsize:step, half:mapsize:step] = wibbled_mean(left)
        top = centres + np.roll(centres, 1, axis=1) + corners + np.roll(corners, -1, axis=0)
        grid[half:mapsize:step, 0:mapsize:step] = wibbled_mean(top)

        step //= 2
        wibble /= wibble_decay
    grid -= grid.min()
    return grid / grid.max()


def _clipped_zoom(x: np.ndarray, zoom: float) -> np.ndarray:
    h, w = x.shape[:2]
    ch, cw = int(np.ceil(h / zoom)), int(np.ceil(w / zoom))
    top, left = (h - ch) // 2, (w - cw) // 2
    zoomed = ndimage.zoom(x[top: top + ch, left: left + cw], zoom, order=1)
    trim_top, trim_left = (zoomed.shape[0] - h) // 2, (zoomed.shape[1] - w) // 2
    return zoomed[trim_top: trim_top + h, trim_left: trim_left + w]


_frost_tile_cache: Optional[np.ndarray] = None


def frost_texture() -> np.ndarray:
    """Procedural ice texture (fixed seed), values in [0, 1], FROST_TILE square."""
    global _frost_tile_cache
    if _frost_tile_cache is None:
        rng = np.random.default_rng(FROST_SEED)
        layers = [ndimage.gaussian_filter(rng.random((FROST_TILE, FROST_TILE)), sigma=s, mode="wrap") for s in (0.8, 2.0, 5.0)]
        tex = sum(w * (l - l.min()) / (l.max() - l.min()) for w, l in zip((0.5, 0.3, 0.2), layers))
        # crystalline streaks
        streaks = ndimage.convolve(rng.random((FROST_TILE, FROST_TILE)) ** 8, _motion_kernel(6, 3.0, 35.0), mode="wrap")
        tex = np.clip(tex ** 1.5 + 2.0 * streaks, 0.0, 1.0)
        _frost_tile_cache = np.repeat(tex[..., None], 3, axis=2) * np.array([0.92, 0.96, 1.0])
    return _frost_tile_cache


def _contrast(x, severity, rng):
    c = _CONTRAST[severity - 1]
    means = x.mean(axis=(0, 1), keepdims=True)
    return (x - means) * c + means


def _defocus_blur(x, severity, rng):
    radius, alias = _DEFOCUS[severity - 1]
    return _convolve_channels(x, _disk_kernel(radius, alias))


def _motion_blur(x, severity, rng):
    radius, sigma = _MOTION[severity - 1]
    return _convolve_channels(x, _motion_kernel(radius, sigma, rng.uniform(-45, 45)), mode="nearest")


def _fog(x, severity, rng):
    strength, decay = _FOG[severity - 1]
    h, w = x.shape[:2]
    size = 1 << int(np.ceil(np.log2(max(h, w, 2))))
    max_val = x.max()
    x = x + strength * plasma_fractal(size, decay, rng)[:h, :w][..., None]
    return x * max_val / (max_val + strength)


def _frost(x, severity, rng):
    keep, amount = _FROST[severity - 1]
    h, w = x.shape[:2]
    tex = frost_texture()
    reps = (int(np.ceil(h / FROST_TILE)) + 1, int(np.ceil(w / FROST_TILE)) + 1, 1)
    tiled = np.tile(tex, reps)
    top = int(rng.integers(0, FROST_TILE))
    left = int(rng.integers(0, FROST_TILE))
    return keep * x + amount * tiled[top: top + h, left: left + w]


def _snow(x, severity, rng):
    loc, scale, zoom, threshold, radius, sigma, blend = _SNOW[severity - 1]
    h, w = x.shape[:2]
    flakes = rng.normal(loc=loc, scale=scale, size=(h, w))
    flakes = _clipped_zoom(flakes, zoom)
    flakes[flakes < threshold] = 0
    flakes = ndimage.convolve(flakes, _motion_kernel(int(radius), float(sigma), rng.uniform(-135, -45)), mode="nearest")
    x = blend * x + (1 - blend) * np.maximum(x, _gray_float(x)[..., None] * 1.5 + 0.5)
    return x + flakes[..., None] + np.rot90(flakes, k=2)[..., None]


_CORRUPTION_FNS = {
    "contrast": _contrast,
    "defocus_blur": _defocus_blur,
    "motion_blur": _motion_blur,
    "fog": _fog,
    "frost": _frost,
    "snow": _snow,
}


def apply_corruption(img: np.ndarray, name: str, severity: int = 3, seed: int = 0) -> np.ndarray:
    _check_image(img)
    if name not in _CORRUPTION_FNS:
        raise ConfigurationError(f"unknown corruption {name!r}; choose one of: {', '.join(CORRUPTIONS)}")
    if not 1 <= int(severity) <= 5:
        raise ConfigurationError(f"severity must be in [1, 5], got {severity}")
    # same random draws at every severity for a given seed
    rng = np.random.default_rng(derive_seed(seed, CORRUPTIONS.index(name)))
    return _to_uint8(_CORRUPTION_FNS[name](_to_float(img), int(severity), rng))


def apply_shift(img: np.ndarray, cfg: ShiftConfig, seed: Optional[int] = None) -> np.ndarray:
    if cfg.domain == "A":
        return apply_stylization(img, cfg.sigma_s, cfg.sigma_r)
    if cfg.domain == "B":
        return apply_pencil_sketch(img, cfg.sigma_s, cfg.sigma_r)
    if cfg.domain == "C":
        return apply_gray_dodge(img, cfg.blur_sigma)
    return apply_corruption(img, cfg.corruption, cfg.severity, cfg.seed if seed is None else seed)


def build_target_split(source: ImageSet, cfg: ShiftConfig, out_dir=None) -> Tuple[ImageSet, Dict]:
    """Shift every image, keep labels; optionally write the set to `out_dir`."""
    if len(source) == 0:
        raise ContractViolation("cannot shift an empty dataset")
    shifted = np.stack([
        apply_shift(img, cfg, seed=derive_seed(cfg.seed, i))
        for i, img in enumerate(tqdm(source.images, desc=f"shift {cfg.label()}", leave=False, disable=QUIET))
    ])
    target = source.with_images(shifted, meta={**source.meta, "shift": cfg.model_dump(mode="json")})
    manifest = {"shift": cfg.model_dump(mode="json"), "count": len(target), "source_hash": source.hash(), "dataset_hash": target.hash()}
    if out_dir is not None:
        target.save(out_dir)
        console.print(f"[+] wrote {len(target)} {cfg.label()} images -> {out_dir}")
    return target, manifest

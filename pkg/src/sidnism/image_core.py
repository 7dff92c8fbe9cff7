"""Pixel plumbing shared by the decomposition, enhancement and metrics code.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in
{1, 3} and float samples in [0, 1]. Nothing here is differentiable; the
autodiff engine mirrors the few operations it needs (gradients, hue).
"""

from __future__ import annotations

import os
import zlib

import numpy as np
import png

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ImageError(Exception):
    """Base class for image I/O failures."""


class UnsupportedImageError(ImageError):
    """PNG is readable but uses a bit depth or color type we do not handle."""


class CorruptImageError(ImageError):
    """PNG stream could not be decoded."""


def validate_image(img) -> np.ndarray:
    """Return ``img`` as a float64 (H, W, C) array, raising if it is not a valid image."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected an (H, W, 1|3) image, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("image is empty")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image samples must be finite and within [0, 1]")
    return arr


def quantize(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] samples to integer levels 0..255, rounding half away from zero."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)


def load_png(path) -> np.ndarray:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    try:
        reader = png.Reader(filename=path)
        width, height, rows, info = reader.read()
        if info.get("palette"):
            raise UnsupportedImageError(f"{path}: palette PNGs are not supported")
        bitdepth = info["bitdepth"]
        if bitdepth not in (8, 16):
            raise UnsupportedImageError(f"{path}: unsupported bit depth {bitdepth}")
        planes = info["planes"]
        data = np.array([np.asarray(row) for row in rows], dtype=np.float64)
    except png.FormatError as exc:
        raise CorruptImageError(f"{path}: {exc}") from exc
    except (png.ChunkError, zlib.error, ValueError) as exc:
        raise CorruptImageError(f"{path}: {exc}") from exc

    data = data.reshape(height, width, planes)
    if info.get("alpha"):
        data = data[:, :, :-1]
    if data.shape[2] not in (1, 3):
        raise UnsupportedImageError(f"{path}: unsupported channel count {data.shape[2]}")
    return data / (255.0 if bitdepth == 8 else 65535.0)


def save_png(img, path) -> None:
    """Write an 8-bit gray or RGB PNG; samples are clamped to [0, 1] first."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected an (H, W, 1|3) image, got shape {arr.shape}")
    levels = quantize(arr).astype(np.uint8)
    height, width, channels = levels.shape
    writer = png.Writer(width, height, greyscale=channels == 1, bitdepth=8)
    with open(path, "wb") as fh:
        writer.write(fh, levels.reshape(height, width * channels))


def to_grayscale(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"to_grayscale needs a 3-channel image, got shape {arr.shape}")
    return (arr @ LUMA_WEIGHTS)[:, :, None]


def gray_of(img) -> np.ndarray:
    """Gray (H, W, 1) view of any image: luma for RGB, passthrough for gray."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr[:, :, None]
    return arr if arr.shape[2] == 1 else to_grayscale(arr)


def hist_equalize(img) -> np.ndarray:
    """Per-channel histogram equalization on 256 quantized levels.

    Each channel is remapped with ``(cdf(v) - cdf_min) / (n - cdf_min)`` and the
    result snapped back onto the 1/255 grid. Channels holding a single level
    are returned untouched.
    """
    arr = np.asarray(img, dtype=np.float64)
    levels = quantize(arr)
    out = arr.copy()
    n = levels.shape[0] * levels.shape[1]
    for ch in range(arr.shape[2]):
        q = levels[:, :, ch]
        hist = np.bincount(q.ravel(), minlength=256)
        if np.count_nonzero(hist) <= 1:
            continue
        cdf = np.cumsum(hist)
        cdf_min = cdf[hist > 0][0]
        lut = (cdf - cdf_min) / (n - cdf_min)
        out[:, :, ch] = np.floor(np.clip(lut, 0.0, 1.0) * 255.0 + 0.5)[q] / 255.0
    return out


def hue_from_rgb(r, g, b):
    """Hue angle in (-pi, pi] from the chroma-plane form; 0 where achromatic."""
    hue = np.arctan2(np.sqrt(3.0) * (g - b), 2.0 * r - g - b)
    return np.where(hue <= -np.pi, np.pi, hue)


def rgb_to_hue(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"rgb_to_hue needs a 3-channel image, got shape {arr.shape}")
    return hue_from_rgb(arr[:, :, 0], arr[:, :, 1], arr[:, :, 2])


def spatial_gradients(img):
    """Forward differences (horizontal, vertical); last column/row is zero."""
    arr = np.asarray(img, dtype=np.float64)
    gh = np.zeros_like(arr)
    gv = np.zeros_like(arr)
    gh[:, :-1] = arr[:, 1:] - arr[:, :-1]
    gv[:-1] = arr[1:] - arr[:-1]
    return gh, gv


def to_chw(img) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(np.asarray(img, dtype=np.float64), (2, 0, 1)))


def to_hwc(arr) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(np.asarray(arr, dtype=np.float64), (1, 2, 0)))

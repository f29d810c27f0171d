"""Reading and writing rasters and masks.

Multi-band GeoTIFF goes through tifffile; PNG through Pillow. GeoTIFF
georeferencing tags are returned with the pixels and written back
unchanged, so derived rasters stay georeferenced.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

TIFF_SUFFIXES = {".tif", ".tiff"}
# ModelPixelScale, ModelTiepoint, ModelTransformation, GeoKeyDirectory, GeoDoubleParams, GeoAsciiParams
GEO_TAGS = (33550, 33922, 34264, 34735, 34736, 34737)


def _to_chw(a: np.ndarray, interleaved: bool) -> np.ndarray:
    if a.ndim == 2:
        return a[None]
    if a.ndim != 3:
        raise ValueError(f"unsupported raster shape {a.shape}")
    return np.moveaxis(a, -1, 0) if interleaved else a


def read_raster(path: str | Path) -> tuple[np.ndarray, dict]:
    """Return ``(pixels as (C, H, W) float32, geo)``; ``geo`` maps tag codes to values."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    geo: dict = {}
    if path.suffix.lower() in TIFF_SUFFIXES:
        with tifffile.TiffFile(path) as tf:
            page = tf.pages[0]
            for code in GEO_TAGS:
                tag = page.tags.get(code)
                if tag is not None:
                    geo[code] = (tag.dtype, tag.count, tag.value)
            a = page.asarray()
            interleaved = page.samplesperpixel > 1 and page.planarconfig == tifffile.PLANARCONFIG.CONTIG
    else:
        with Image.open(path) as im:
            a = np.asarray(im)
        interleaved = True
    return _to_chw(np.asarray(a), interleaved).astype(np.float32), geo


def write_raster(path: str | Path, raster: np.ndarray, geo: dict | None = None) -> Path:
    """Write a (C, H, W) or (H, W) raster; ``.png`` only for 8-bit 1- or 3-band data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.asarray(raster)
    if path.suffix.lower() in TIFF_SUFFIXES:
        extratags = []
        for code, (dtype, count, value) in (geo or {}).items():
            extratags.append((int(code), dtype, count, value, True))
        planar = a.ndim == 3
        tifffile.imwrite(
            path, a, photometric="minisblack", planarconfig="separate" if planar else None,
            extratags=extratags or None,
        )
    else:
        if a.ndim == 3:
            a = np.moveaxis(a, 0, -1) if a.shape[0] in (1, 3, 4) else a
            if a.shape[-1] == 1:
                a = a[..., 0]
        Image.fromarray(a).save(path)
    return path


def read_mask(path: str | Path) -> np.ndarray:
    """Single-band 8-bit mask with values {0, 255} (or {0, 1}) mapped to {0, 1}."""
    a, _ = read_raster(path)
    a = a[0]
    values = set(np.unique(a).tolist())
    if not values <= {0.0, 1.0, 255.0}:
        raise ValueError(f"{path}: mask values must be 0/255 (or 0/1), found {sorted(values)[:8]}")
    return (a > 0).astype(np.uint8)


def write_mask(path: str | Path, mask: np.ndarray) -> Path:
    mask = np.asarray(mask)
    if not bool(((mask == 0) | (mask == 1)).all()):
        raise ValueError("mask must be binary")
    return write_raster(path, (mask.astype(np.uint8) * 255))


def read_reference(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a change reference as ``(change, valid)``.

    Single-band references are 0/255 masks with every pixel valid
    (``valid`` is None). Three-band references follow the red-changed /
    green-unchanged convention; any other colour is unlabeled.
    """
    a, _ = read_raster(path)
    if a.shape[0] == 1:
        return read_mask(path), None
    r, g = a[0] > 127, a[1] > 127
    changed = r & ~g
    unchanged = g & ~r
    if len(a) >= 3:
        b = a[2] > 127
        changed &= ~b
        unchanged &= ~b
    return changed.astype(np.uint8), (changed | unchanged)

"""Raster preprocessing, tiling, supervision derivation and dataset manifests."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

STD_FLOOR = 1e-6


# -- normalization ----------------------------------------------------------

@dataclass(frozen=True)
class BandStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @property
    def bands(self) -> int:
        return len(self.mean)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "BandStats":
        return cls(tuple(d["mean"]), tuple(d["std"]))


def band_stats(rasters: np.ndarray | Iterable[np.ndarray]) -> BandStats:
    """Per-band mean and std over one (C, H, W) raster or a collection of them."""
    if isinstance(rasters, np.ndarray) and rasters.ndim == 3:
        rasters = [rasters]
    total = sq = None
    n = 0
    for r in rasters:
        r = np.asarray(r, dtype=np.float64)
        flat = r.reshape(r.shape[0], -1)
        s, s2 = flat.sum(axis=1), (flat * flat).sum(axis=1)
        total = s if total is None else total + s
        sq = s2 if sq is None else sq + s2
        n += flat.shape[1]
    if n == 0:
        raise ValueError("no rasters to compute statistics from")
    mean = total / n
    var = np.maximum(sq / n - mean * mean, 0.0)
    return BandStats(tuple(mean.tolist()), tuple(np.sqrt(var).tolist()))


def normalize(raster: np.ndarray, stats: BandStats | None = None, scope: str = "per_image") -> np.ndarray:
    """Per-band standardization ``(x - mean) / std`` with a std floor of 1e-6.

    ``per_image`` computes statistics from ``raster`` itself (``stats`` may
    still be passed to override); ``global`` requires precomputed training-set
    ``stats``.
    """
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim != 3:
        raise ValueError(f"expected a (C, H, W) raster, got shape {raster.shape}")
    if scope not in ("per_image", "global"):
        raise ValueError(f"unknown normalization scope {scope!r}")
    if stats is None:
        if scope == "global":
            raise ValueError("global normalization needs precomputed training-set band statistics")
        flat = raster.reshape(raster.shape[0], -1)
        mean = flat.mean(axis=1)
        # two-pass std keeps already-standardized input within rounding of itself
        std = np.sqrt(((flat - mean[:, None]) ** 2).mean(axis=1))
    else:
        if stats.bands != raster.shape[0]:
            raise ValueError(f"stats cover {stats.bands} bands, raster has {raster.shape[0]}")
        mean, std = np.asarray(stats.mean), np.asarray(stats.std)
    low = std < STD_FLOOR
    if low.any():
        warnings.warn(f"constant band(s) {np.flatnonzero(low).tolist()}: std floored to {STD_FLOOR}", stacklevel=2)
        std = np.where(low, STD_FLOOR, std)
    return (raster - mean[:, None, None]) / std[:, None, None]


# -- tiling -----------------------------------------------------------------

@dataclass(frozen=True)
class TileGrid:
    """Overlap tiling geometry: each input tile is a core plus a context border."""

    input_size: int = 220
    core_size: int = 200
    context: int = 10

    def __post_init__(self):
        if self.core_size < 1 or self.context < 0:
            raise ValueError(f"invalid tile geometry {self}")
        if self.input_size != self.core_size + 2 * self.context:
            raise ValueError(
                f"input_size ({self.input_size}) must equal core_size + 2*context ({self.core_size + 2 * self.context})"
            )

    def axis_starts(self, n: int) -> list[int]:
        """Core origins along one axis; the last core is shifted flush to the edge."""
        if n < self.core_size:
            raise ValueError(f"raster extent {n} is smaller than the core size {self.core_size}")
        count = math.ceil(n / self.core_size)
        starts = [i * self.core_size for i in range(count)]
        starts[-1] = min(starts[-1], n - self.core_size)
        return starts

    def origins(self, h: int, w: int) -> list[tuple[int, int]]:
        return [(r, c) for r in self.axis_starts(h) for c in self.axis_starts(w)]


@dataclass(frozen=True)
class CorePlacement:
    row: int
    col: int
    size: int


def _pad_spatial(raster: np.ndarray, pad: int) -> np.ndarray:
    widths = [(0, 0)] * (raster.ndim - 2) + [(pad, pad), (pad, pad)]
    h, w = raster.shape[-2:]
    mode = "reflect" if pad < min(h, w) else "symmetric"
    return np.pad(raster, widths, mode=mode)


def tile(raster: np.ndarray, grid: TileGrid = TileGrid()) -> list[tuple[np.ndarray, CorePlacement]]:
    """Cut ``raster`` (``(..., H, W)``) into ``input_size`` tiles, one per core cell.

    Border tiles get their context by reflect padding.
    """
    h, w = raster.shape[-2:]
    origins = grid.origins(h, w)
    padded = _pad_spatial(raster, grid.context) if grid.context else raster
    n = grid.input_size
    return [
        (padded[..., r : r + n, c : c + n], CorePlacement(r, c, grid.core_size))
        for r, c in origins
    ]


def core_of(tile_out: np.ndarray, grid: TileGrid) -> np.ndarray:
    """Crop a tile-sized output to its central core."""
    k = grid.context
    return tile_out[..., k : k + grid.core_size, k : k + grid.core_size]


def stitch(items: Sequence[tuple[np.ndarray, CorePlacement]], h: int, w: int, return_counts: bool = False):
    """Reassemble core outputs into an ``(..., h, w)`` map; later placements overwrite."""
    if not items:
        raise ValueError("nothing to stitch")
    first = np.asarray(items[0][0])
    out = np.zeros(first.shape[:-2] + (h, w), dtype=first.dtype)
    counts = np.zeros((h, w), dtype=np.int32)
    for core, p in items:
        core = np.asarray(core)
        if core.shape[-2:] != (p.size, p.size):
            raise ValueError(f"core of shape {core.shape[-2:]} does not match placement size {p.size}")
        if p.row < 0 or p.col < 0 or p.row + p.size > h or p.col + p.size > w:
            raise ValueError(f"placement {p} falls outside a {h}x{w} map")
        out[..., p.row : p.row + p.size, p.col : p.col + p.size] = core
        counts[p.row : p.row + p.size, p.col : p.col + p.size] += 1
    if (counts == 0).any():
        raise ValueError(f"{int((counts == 0).sum())} pixel(s) not covered by any placement")
    return (out, counts) if return_counts else out


# -- supervision derivation -------------------------------------------------

def _check_binary(a, what: str):
    if not bool(((a == 0) | (a == 1)).all()):
        raise ValueError(f"{what} must be binary (0/1)")


@dataclass
class Slice:
    row: int
    col: int
    x: np.ndarray
    y: np.ndarray
    reference: np.ndarray
    label: str


def make_wscd_dataset(x: np.ndarray, y: np.ndarray, pixel_ref: np.ndarray, slice_size: int = 200) -> list[Slice]:
    """Slice a large pair into non-overlapping tiles with image-level labels.

    A tile is ``"changed"`` iff any of its reference pixels is 1. Partial
    tiles at the right/bottom edges are dropped. The pixel reference is kept
    on each slice for evaluation only.
    """
    if x.shape != y.shape:
        raise ValueError(f"pair rasters differ in shape: {x.shape} vs {y.shape}")
    if pixel_ref.shape != x.shape[-2:]:
        raise ValueError(f"reference {pixel_ref.shape} is not aligned with the {x.shape[-2:]} pair")
    _check_binary(pixel_ref, "pixel reference")
    h, w = pixel_ref.shape
    s = slice_size
    out = []
    for r in range(0, h - s + 1, s):
        for c in range(0, w - s + 1, s):
            ref = pixel_ref[r : r + s, c : c + s]
            out.append(Slice(
                r, c, x[..., r : r + s, c : c + s], y[..., r : r + s, c : c + s], ref,
                "changed" if ref.any() else "unchanged",
            ))
    return out


EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def make_region_reference(pixel_ref: np.ndarray, expansion: int = 10) -> np.ndarray:
    """Union of the 8-connected components' bounding boxes, grown by ``expansion`` per edge."""
    pixel_ref = np.asarray(pixel_ref)
    _check_binary(pixel_ref, "pixel reference")
    h, w = pixel_ref.shape
    labels, _ = ndimage.label(pixel_ref, structure=EIGHT_CONNECTED)
    region = np.zeros((h, w), dtype=np.uint8)
    for sl in ndimage.find_objects(labels):
        rs, cs = sl
        region[
            max(rs.start - expansion, 0) : min(rs.stop + expansion, h),
            max(cs.start - expansion, 0) : min(cs.stop + expansion, w),
        ] = 1
    return region


def simulate_unchanged(x, y, region):
    """Take ``x`` inside the region and ``y`` outside it (numpy or torch).

    ``region`` broadcasts against the rasters, e.g. (H, W) against (C, H, W)
    or (B, 1, H, W) against (B, C, H, W).
    """
    if x.shape != y.shape:
        raise ValueError(f"simulate_unchanged: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    _check_binary(region, "region reference")
    if tuple(region.shape[-2:]) != tuple(x.shape[-2:]):
        raise ValueError(f"region {tuple(region.shape)} does not match rasters {tuple(x.shape)}")
    try:
        import torch

        if isinstance(x, torch.Tensor):
            return torch.where(region.to(torch.bool), x, y)
    except ImportError:  # pragma: no cover
        pass
    return np.where(np.asarray(region).astype(bool), x, y)


def oversample_changed(changed_ids: Sequence, unchanged_ids: Sequence, seed: int | np.random.Generator) -> list[tuple]:
    """Pair every unchanged id once with a changed id for one epoch.

    The changed list is shuffled repeatedly and concatenated until it is as
    long as the unchanged list, then truncated. Pairing is positional after
    the unchanged list is shuffled too.
    """
    if len(changed_ids) == 0 or len(unchanged_ids) == 0:
        raise ValueError("oversampling needs non-empty changed and unchanged lists")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(unchanged_ids)
    reps = math.ceil(n / len(changed_ids))
    changed = [changed_ids[i] for _ in range(reps) for i in rng.permutation(len(changed_ids))][:n]
    unchanged = [unchanged_ids[i] for i in rng.permutation(n)]
    return list(zip(changed, unchanged))


# -- manifests --------------------------------------------------------------

REGIME_REQUIREMENTS = {"uscd": None, "wscd": "label", "rscd": "region_ref", "fscd": "pixel_ref"}


@dataclass
class SampleRecord:
    x: str
    y: str
    pixel_ref: str | None = None
    region_ref: str | None = None
    label: str | None = None

    def __post_init__(self):
        if self.label not in (None, "changed", "unchanged"):
            raise ValueError(f"pair label must be 'changed' or 'unchanged', got {self.label!r}")


@dataclass
class DatasetManifest:
    """Dataset index written as JSON; sample paths are relative to the manifest file.

    Schema::

        {"version": 1, "bands": 4, "normalization": "per_image",
         "stats": {"mean": [...], "std": [...]} | null,
         "records": [{"x": "x/0000.tif", "y": "y/0000.tif",
                      "pixel_ref": "ref/0000.png" | null,
                      "region_ref": "region/0000.png" | null,
                      "label": "changed" | "unchanged" | null}, ...]}
    """

    bands: int
    records: list[SampleRecord] = field(default_factory=list)
    normalization: str = "per_image"
    stats: BandStats | None = None
    root: Path | None = None
    VERSION = 1

    def validate_for(self, regime: str):
        if regime not in REGIME_REQUIREMENTS:
            raise ValueError(f"unknown regime {regime!r}")
        if not self.records:
            raise ValueError("manifest has no records")
        need = REGIME_REQUIREMENTS[regime]
        if need is not None:
            missing = [i for i, r in enumerate(self.records) if getattr(r, need) is None]
            if missing:
                raise ValueError(f"{regime} needs '{need}' on every record; missing on {len(missing)} record(s)")

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        return (self.root or Path(".")) / rel

    def to_dict(self) -> dict:
        return {
            "version": self.VERSION,
            "bands": self.bands,
            "normalization": self.normalization,
            "stats": self.stats.to_dict() if self.stats else None,
            "records": [asdict(r) for r in self.records],
        }

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("version") != cls.VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')!r}")
        return cls(
            bands=int(d["bands"]),
            records=[SampleRecord(**r) for r in d["records"]],
            normalization=d.get("normalization", "per_image"),
            stats=BandStats.from_dict(d["stats"]) if d.get("stats") else None,
            root=path.parent,
        )


def sliding_crops(raster: np.ndarray, size: int, stride: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Overlapping ``size`` crops of a ``(..., H, W)`` raster at ``stride``; the last row/column is flush."""
    h, w = raster.shape[-2:]
    if size > min(h, w) or stride < 1:
        raise ValueError(f"cannot crop {size}px windows at stride {stride} from a {h}x{w} raster")

    def starts(n):
        s = list(range(0, n - size + 1, stride))
        if s[-1] != n - size:
            s.append(n - size)
        return s

    origins = [(r, c) for r in starts(h) for c in starts(w)]
    crops = np.stack([raster[..., r : r + size, c : c + size] for r, c in origins])
    return crops, origins

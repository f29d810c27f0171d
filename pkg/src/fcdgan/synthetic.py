"""Synthetic bi-temporal pairs with planted rectangular changes.

The unchanged relation is affine per band (``y = gain * x + offset`` plus
Gaussian noise) with one gain/offset per case, like a fixed sensor pair.
Planted rectangles get independent content with a shifted spectral
signature, so they are changes no affine map can predict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import make_region_reference

REGIMES = ("uscd", "wscd", "rscd", "fscd")


@dataclass
class SyntheticCase:
    regime: str
    x: np.ndarray  # (N, C, H, W) float32
    y: np.ndarray
    reference: np.ndarray  # (N, H, W) uint8, hidden ground truth
    labels: np.ndarray | None  # (N,) 1 = changed; wscd
    regions: np.ndarray | None  # (N, H, W) uint8; rscd
    rectangles: list[list[tuple[int, int, int, int]]]  # per pair (row, col, h, w)
    fractions: list[float]  # requested change fraction per pair (0 when unchanged)
    gain: np.ndarray
    offset: np.ndarray
    test: "SyntheticCase | None" = None

    def __len__(self):
        return len(self.x)

    @property
    def changed(self) -> np.ndarray:
        return np.flatnonzero(self.reference.reshape(len(self), -1).any(axis=1))


def smooth_field(rng: np.random.Generator, bands: int, size: int, sigma: float) -> np.ndarray:
    """Spatially smooth noise, unit variance per band, with a shared cross-band component."""
    def one():
        f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        return (f - f.mean()) / f.std()

    common = one()
    return np.stack([0.6 * common + 0.8 * one() for _ in range(bands)])


def plant_rectangles(rng: np.random.Generator, size: int, count: int, fraction: float, max_tries: int = 200):
    """Place ``count`` non-overlapping rectangles covering about ``fraction`` of the image."""
    target = fraction * size * size / count
    for _ in range(max_tries):
        mask = np.zeros((size, size), dtype=bool)
        rects = []
        for _ in range(count):
            placed = False
            for _ in range(max_tries):
                aspect = rng.uniform(0.5, 2.0)
                h = int(np.clip(round(np.sqrt(target * aspect)), 2, size))
                w = int(np.clip(round(target / h), 2, size))
                r = int(rng.integers(0, size - h + 1))
                c = int(rng.integers(0, size - w + 1))
                if not mask[r : r + h, c : c + w].any():
                    mask[r : r + h, c : c + w] = True
                    rects.append((r, c, h, w))
                    placed = True
                    break
            if not placed:
                break
        if len(rects) == count:
            return mask, rects
    raise RuntimeError(f"could not place {count} rectangles covering {fraction:.3f} of a {size}x{size} image")


def _draw_pair(rng, size, bands, gain, offset, noise, smooth, n_rects, fraction):
    x = smooth_field(rng, bands, size, smooth)
    y = gain[:, None, None] * x + offset[:, None, None]
    ref = np.zeros((size, size), dtype=np.uint8)
    rects = []
    if n_rects:
        mask, rects = plant_rectangles(rng, size, n_rects, fraction)
        z = smooth_field(rng, bands, size, smooth)
        for r, c, h, w in rects:
            signature = rng.choice([-1.0, 1.0], bands) * rng.uniform(1.0, 2.0, bands)
            patch = z[:, r : r + h, c : c + w] + signature[:, None, None]
            y[:, r : r + h, c : c + w] = gain[:, None, None] * patch + offset[:, None, None]
        ref[mask] = 1
    y = y + noise * rng.standard_normal(y.shape)
    return x.astype(np.float32), y.astype(np.float32), ref, rects


def gen_synthetic_case(
    seed: int,
    size: int = 64,
    bands: int = 4,
    regime: str = "uscd",
    n_changed: int | None = None,
    n_unchanged: int | None = None,
    n_test: int = 0,
    noise: float = 0.02,
    rects: tuple[int, int] = (1, 3),
    area: tuple[float, float] = (0.02, 0.10),
    smooth: float = 2.0,
    expansion: int = 4,
) -> SyntheticCase:
    """Generate a deterministic synthetic case for ``regime``.

    Defaults: ``uscd`` is one changed pair; the other regimes get 60 changed
    and 200 unchanged pairs. ``rects`` bounds the number of rectangles per
    changed pair (use ``(0, 0)`` for no change) and ``area`` the total change
    fraction per pair. ``n_test`` extra changed pairs sharing the same
    relation are returned in ``case.test``.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if size < 32:
        raise ValueError(f"synthetic size must be >= 32, got {size}")
    if bands < 3:
        raise ValueError(f"synthetic band count must be >= 3, got {bands}")
    if not 0 <= rects[0] <= rects[1]:
        raise ValueError(f"invalid rectangle count range {rects}")
    if not 0 < area[0] <= area[1] < 0.5:
        raise ValueError(f"invalid area fraction range {area}")
    if regime == "uscd":
        n_changed = 1 if n_changed is None else n_changed
        n_unchanged = 0 if n_unchanged is None else n_unchanged
    else:
        n_changed = 60 if n_changed is None else n_changed
        n_unchanged = 200 if n_unchanged is None else n_unchanged

    relation_rng, pairs_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    gain = relation_rng.uniform(0.6, 1.4, bands)
    offset = relation_rng.uniform(-0.5, 0.5, bands)

    def build(rng, nc, nu):
        xs, ys, refs, all_rects, fracs = [], [], [], [], []
        # changed pairs first, then unchanged; order is irrelevant to trainers
        for i in range(nc + nu):
            k = int(rng.integers(rects[0], rects[1] + 1)) if i < nc else 0
            f = float(rng.uniform(*area)) if k else 0.0
            x, y, ref, rr = _draw_pair(rng, size, bands, gain, offset, noise, smooth, k, f)
            xs.append(x)
            ys.append(y)
            refs.append(ref)
            all_rects.append(rr)
            fracs.append(f)
        ref = np.stack(refs) if refs else np.zeros((0, size, size), np.uint8)
        labels = ref.reshape(len(ref), -1).any(axis=1).astype(np.uint8)
        regions = np.stack([make_region_reference(r, expansion) for r in ref]) if regime == "rscd" and len(ref) else None
        return SyntheticCase(
            regime=regime,
            x=np.stack(xs) if xs else np.zeros((0, bands, size, size), np.float32),
            y=np.stack(ys) if ys else np.zeros((0, bands, size, size), np.float32),
            reference=ref,
            labels=labels if regime == "wscd" else None,
            regions=regions,
            rectangles=all_rects,
            fractions=fracs,
            gain=gain,
            offset=offset,
        )

    case = build(pairs_rng, n_changed, n_unchanged)
    if n_test:
        case.test = build(test_rng, n_test, 0)
    return case

"""Overlapping crop pairs and pixel correspondence between the two crop frames."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MAX_REJECTIONS = 256


@dataclass(frozen=True)
class Rect:
    x0: int
    y0: int
    w: int
    h: int

    @property
    def x1(self) -> int:
        return self.x0 + self.w

    @property
    def y1(self) -> int:
        return self.y0 + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def shift(self, dx: int, dy: int) -> "Rect":
        return Rect(self.x0 + dx, self.y0 + dy, self.w, self.h)

    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)


@dataclass(frozen=True)
class CropPair:
    crop_a: Rect
    crop_b: Rect
    overlap_in_a: Rect
    overlap_in_b: Rect

    def swapped(self) -> "CropPair":
        return CropPair(self.crop_b, self.crop_a, self.overlap_in_b, self.overlap_in_a)

    @property
    def overlap_in_image(self) -> Rect:
        return self.overlap_in_a.shift(self.crop_a.x0, self.crop_a.y0)


def _intersect(a: Rect, b: Rect) -> Rect | None:
    x0, y0 = max(a.x0, b.x0), max(a.y0, b.y0)
    x1, y1 = min(a.x1, b.x1), min(a.y1, b.y1)
    if x1 <= x0 or y1 <= y0:
        return None
    return Rect(x0, y0, x1 - x0, y1 - y0)


def make_pair(crop_a: Rect, crop_b: Rect) -> CropPair:
    inter = _intersect(crop_a, crop_b)
    if inter is None:
        raise ValueError("crops do not overlap")
    return CropPair(crop_a, crop_b,
                    inter.shift(-crop_a.x0, -crop_a.y0),
                    inter.shift(-crop_b.x0, -crop_b.y0))


def _as_rng(rng_state):
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def sample_crop_pair(image_h: int, image_w: int, crop_size: int,
                     min_overlap_fraction: float = 0.25, rng_state=None) -> CropPair:
    """Draw two equal square crops whose overlap covers at least the given
    fraction of a crop.

    ``crop_a`` is uniform over all valid positions. ``crop_b`` is uniform over
    positions inside the image that satisfy the overlap constraint: rejection
    sampling within the window of positions that touch ``crop_a``, falling
    back to exact enumeration when the acceptance rate is low.
    """
    c = int(crop_size)
    if c < 1 or c > min(image_h, image_w):
        raise ValueError(f"crop_size {crop_size} does not fit in a {image_h}x{image_w} image")
    if not 0.0 < min_overlap_fraction <= 1.0:
        raise ValueError(f"min_overlap_fraction must be in (0, 1], got {min_overlap_fraction}")
    rng = _as_rng(rng_state)
    ya = int(rng.integers(0, image_h - c + 1))
    xa = int(rng.integers(0, image_w - c + 1))
    need = min_overlap_fraction * c * c

    # b positions that overlap a at all, clipped to the image
    ylo, yhi = max(0, ya - c + 1), min(image_h - c, ya + c - 1)
    xlo, xhi = max(0, xa - c + 1), min(image_w - c, xa + c - 1)
    for _ in range(_MAX_REJECTIONS):
        yb = int(rng.integers(ylo, yhi + 1))
        xb = int(rng.integers(xlo, xhi + 1))
        if (c - abs(xb - xa)) * (c - abs(yb - ya)) >= need:
            break
    else:
        ys = np.arange(ylo, yhi + 1)[:, None]
        xs = np.arange(xlo, xhi + 1)[None, :]
        ok = (c - np.abs(xs - xa)) * (c - np.abs(ys - ya)) >= need
        cand = np.argwhere(ok)
        yb, xb = (int(v) for v in cand[rng.integers(len(cand))])
        yb, xb = yb + ylo, xb + xlo
    return make_pair(Rect(xa, ya, c, c), Rect(xb, yb, c, c))


def paired_index_arrays(pair: CropPair, stride: int = 1):
    """Vectorised correspondence: two ``(N, 2)`` int arrays of (row, col)
    feature indices in crop a and crop b.

    The image-frame overlap is tiled by ``stride``-sized cells starting at
    its top-left corner; only whole cells count. Each cell is represented by
    its centre pixel, which is mapped into each crop's feature grid by floor
    division.
    """
    s = int(stride)
    if s < 1:
        raise ValueError("stride must be >= 1")
    ov = pair.overlap_in_image
    n_rows, n_cols = ov.h // s, ov.w // s
    if n_rows == 0 or n_cols == 0:
        empty = np.zeros((0, 2), dtype=np.int64)
        return empty, empty.copy()
    off = (s - 1) // 2
    yy, xx = np.meshgrid(ov.y0 + off + s * np.arange(n_rows),
                         ov.x0 + off + s * np.arange(n_cols), indexing="ij")
    yy, xx = yy.ravel(), xx.ravel()
    idx_a = np.stack([(yy - pair.crop_a.y0) // s, (xx - pair.crop_a.x0) // s], axis=1)
    idx_b = np.stack([(yy - pair.crop_b.y0) // s, (xx - pair.crop_b.x0) // s], axis=1)
    return idx_a, idx_b


def paired_pixel_indices(pair: CropPair, stride: int = 1):
    idx_a, idx_b = paired_index_arrays(pair, stride)
    return [((int(a[0]), int(a[1])), (int(b[0]), int(b[1]))) for a, b in zip(idx_a, idx_b)]


def crop(array: np.ndarray, rect: Rect) -> np.ndarray:
    return array[rect.slices()]

"""Run-length encoded binary masks and the overlap arithmetic built on them.

Masks are stored as row-major run lengths that alternate background and
foreground, starting with a (possibly empty) background run.  Intersection
areas are computed by merging foreground intervals, never by decoding.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

GRID_SIZE = 10
DEFAULT_PADDING = 16


class MaskFormatError(ValueError):
    """Raised for run lists that violate the canonical encoding."""


class UndefinedInputError(ValueError):
    """Raised when a ratio would have an empty denominator."""


@dataclass(frozen=True)
class BinaryMask:
    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self):
        runs = tuple(int(r) for r in self.runs)
        object.__setattr__(self, "runs", runs)
        if self.width < 0 or self.height < 0:
            raise MaskFormatError(f"negative mask size {self.width}x{self.height}")
        if any(r < 0 for r in runs):
            raise MaskFormatError("negative run length")
        total = self.width * self.height
        if sum(runs) != total:
            raise MaskFormatError(
                f"run lengths sum to {sum(runs)}, expected {total} "
                f"({self.width}x{self.height})"
            )
        if total == 0:
            if runs not in ((), (0,)):
                raise MaskFormatError("empty image must have runs [] or [0]")
            return
        if not runs:
            raise MaskFormatError("missing runs")
        if any(r == 0 for r in runs[1:]):
            raise MaskFormatError("only the first run may be zero")

    @classmethod
    def from_array(cls, grid) -> "BinaryMask":
        return rle_encode(grid)

    def to_array(self) -> np.ndarray:
        return rle_decode(self)

    @cached_property
    def intervals(self) -> np.ndarray:
        """Foreground ``[start, stop)`` intervals in flat row-major indices."""
        ends = np.cumsum(self.runs, dtype=np.int64)
        starts = ends - np.asarray(self.runs, dtype=np.int64)
        return np.stack([starts[1::2], ends[1::2]], axis=1)

    @cached_property
    def area(self) -> int:
        return int(sum(self.runs[1::2]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def is_empty(self) -> bool:
        return self.area == 0

    def to_json(self) -> dict:
        return {"w": self.width, "h": self.height, "runs": list(self.runs)}

    @classmethod
    def from_json(cls, obj: dict) -> "BinaryMask":
        try:
            return cls(int(obj["w"]), int(obj["h"]), tuple(obj["runs"]))
        except (KeyError, TypeError) as exc:
            raise MaskFormatError(f"bad mask record: {exc}") from exc


@dataclass(frozen=True)
class PixelBox:
    """Inclusive pixel box."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def padded(self, padding: int, width: int, height: int) -> "PixelBox":
        """Grow by ``padding`` on every side, clipped to a ``width`` x ``height`` image."""
        x0 = max(0, self.x0 - padding)
        y0 = max(0, self.y0 - padding)
        x1 = min(width - 1, self.x1 + padding)
        y1 = min(height - 1, self.y1 + padding)
        if x0 > x1 or y0 > y1:
            raise ValueError(f"box {self} does not intersect a {width}x{height} image")
        return PixelBox(x0, y0, x1, y1)

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True, eq=False)
class SuperpixelMap:
    """Per-pixel superpixel ids in ``[0, K)``; every id must occur."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError("superpixel labels must be 2-D")
        if labels.size and labels.min() < 0:
            raise ValueError("superpixel ids must be non-negative")
        labels = labels.astype(np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        k = int(labels.max()) + 1 if labels.size else 0
        if k and np.bincount(labels.ravel(), minlength=k).min() == 0:
            raise ValueError("superpixel ids must be contiguous: some id in [0, K) is unused")

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @cached_property
    def num_superpixels(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.num_superpixels)

    def __eq__(self, other):
        if not isinstance(other, SuperpixelMap):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)

    def mask_of(self, keep) -> BinaryMask:
        """Mask formed by the union of superpixels where ``keep[k]`` is true."""
        keep = np.asarray(keep, dtype=bool)
        return rle_encode(keep[self.labels])

    def fraction_inside(self, mask: BinaryMask) -> np.ndarray:
        """Fraction of each superpixel's pixels that are foreground in ``mask``."""
        _check_same_size(self, mask)
        fg = np.bincount(
            self.labels.ravel(), weights=rle_decode(mask).ravel(), minlength=self.num_superpixels
        )
        return fg / self.sizes

    @classmethod
    def tiles(cls, width: int, height: int, tile: int) -> "SuperpixelMap":
        """Regular ``tile`` x ``tile`` blocks, numbered row-major."""
        cols = -(-width // tile)
        ys, xs = np.mgrid[0:height, 0:width]
        return cls((ys // tile) * cols + xs // tile)


def rle_encode(grid) -> BinaryMask:
    grid = np.asarray(grid, dtype=bool)
    if grid.ndim != 2:
        raise ValueError("mask grid must be 2-D")
    height, width = grid.shape
    flat = grid.ravel()
    if flat.size == 0:
        return BinaryMask(width, height, ())
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return BinaryMask(width, height, tuple(runs))


def rle_decode(mask: BinaryMask) -> np.ndarray:
    values = np.zeros(len(mask.runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, mask.runs)
    return flat.reshape(mask.height, mask.width)


def area(mask: BinaryMask) -> int:
    return mask.area


def _check_same_size(a, b):
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(
            f"dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def intersection_area(a: BinaryMask, b: BinaryMask) -> int:
    """Count shared foreground pixels by a two-pointer sweep over intervals."""
    _check_same_size(a, b)
    ia = a.intervals.tolist()
    ib = b.intervals.tolist()
    i = j = total = 0
    while i < len(ia) and j < len(ib):
        s0, e0 = ia[i]
        s1, e1 = ib[j]
        lo = s0 if s0 > s1 else s1
        hi = e0 if e0 < e1 else e1
        if hi > lo:
            total += hi - lo
        if e0 <= e1:
            i += 1
        else:
            j += 1
    return total


def overlap(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union.  Two empty masks have overlap 0."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


def pixel_precision(det: BinaryMask, gt: BinaryMask) -> float:
    """Fraction of the detection that lies inside the ground truth."""
    if det.area == 0:
        raise UndefinedInputError("pixel precision of an empty detection")
    return intersection_area(det, gt) / det.area


def pixel_recall(det: BinaryMask, gt: BinaryMask) -> float:
    """Fraction of the ground truth covered by the detection."""
    if gt.area == 0:
        raise UndefinedInputError("pixel recall against an empty ground truth")
    return intersection_area(det, gt) / gt.area


def bbox(mask: BinaryMask) -> PixelBox:
    if mask.area == 0:
        raise UndefinedInputError("bounding box of an empty mask")
    iv = mask.intervals
    w = mask.width
    first_row = iv[:, 0] // w
    last_row = (iv[:, 1] - 1) // w
    y0, y1 = int(first_row.min()), int(last_row.max())
    # an interval spanning a row boundary touches both image edges
    wraps = first_row != last_row
    starts = iv[:, 0] % w
    stops = (iv[:, 1] - 1) % w
    x0 = 0 if wraps.any() else int(starts.min())
    x1 = w - 1 if wraps.any() else int(stops.max())
    return PixelBox(x0, y0, x1, y1)


def box_iou(a: PixelBox, b: PixelBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0) + 1
    ih = min(a.y1, b.y1) - max(a.y0, b.y0) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _cell_starts(n: int) -> np.ndarray:
    return np.array([(i * n) // GRID_SIZE for i in range(GRID_SIZE + 1)])


def _pixel_cells(n: int) -> np.ndarray:
    """Grid cell index for each of ``n`` pixels along one axis of a padded box."""
    starts = _cell_starts(n)[:-1]
    return np.searchsorted(starts, np.arange(n), side="right") - 1


def discretize_to_grid(mask: BinaryMask, box: PixelBox, padding: int = DEFAULT_PADDING) -> np.ndarray:
    """Foreground fraction of each cell of a 10x10 grid laid over the padded box.

    Cell ``(i, j)`` covers rows ``floor(i*H/10) .. floor((i+1)*H/10) - 1`` of the
    padded box.  Boxes thinner than 10 pixels leave some cells without pixels;
    those take the value of the pixel under the cell centre.
    """
    pbox = box.padded(padding, mask.width, mask.height)
    crop = rle_decode(mask)[pbox.y0 : pbox.y1 + 1, pbox.x0 : pbox.x1 + 1].astype(np.float64)
    return _grid_average(crop)


def _grid_average(crop: np.ndarray) -> np.ndarray:
    h, w = crop.shape
    rs, cs = _cell_starts(h), _cell_starts(w)
    out = np.empty((GRID_SIZE, GRID_SIZE))
    for i in range(GRID_SIZE):
        r0, r1 = rs[i], rs[i + 1]
        if r1 == r0:
            r0 = min(int((i + 0.5) * h / GRID_SIZE), h - 1)
            r1 = r0 + 1
        for j in range(GRID_SIZE):
            c0, c1 = cs[j], cs[j + 1]
            if c1 == c0:
                c0 = min(int((j + 0.5) * w / GRID_SIZE), w - 1)
                c1 = c0 + 1
            out[i, j] = crop[r0:r1, c0:c1].mean()
    return out


def grid_to_pixels(grid: np.ndarray, box: PixelBox, padding: int, width: int, height: int) -> np.ndarray:
    """Paint grid values back onto a ``height`` x ``width`` image; zero outside the padded box."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != (GRID_SIZE, GRID_SIZE):
        raise ValueError(f"grid must be {GRID_SIZE}x{GRID_SIZE}")
    pbox = box.padded(padding, width, height)
    out = np.zeros((height, width))
    rows = _pixel_cells(pbox.height)
    cols = _pixel_cells(pbox.width)
    out[pbox.y0 : pbox.y1 + 1, pbox.x0 : pbox.x1 + 1] = grid[np.ix_(rows, cols)]
    return out


def project_to_superpixels(
    grid: np.ndarray, box: PixelBox, padding: int, sp: SuperpixelMap
) -> np.ndarray:
    """Mean grid value over each superpixel's pixels (zero outside the padded box)."""
    pixels = grid_to_pixels(grid, box, padding, sp.width, sp.height)
    sums = np.bincount(sp.labels.ravel(), weights=pixels.ravel(), minlength=sp.num_superpixels)
    return sums / sp.sizes


def superpixels_touching(box: PixelBox, sp: SuperpixelMap) -> np.ndarray:
    """Boolean vector: superpixels with at least one pixel inside ``box``."""
    inside = np.zeros(sp.num_superpixels, dtype=bool)
    inside[np.unique(sp.labels[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1])] = True
    return inside


def union(masks: Sequence[BinaryMask]) -> BinaryMask:
    if not masks:
        raise ValueError("union of no masks")
    out = np.zeros(masks[0].shape, dtype=bool)
    for m in masks:
        _check_same_size(masks[0], m)
        out |= rle_decode(m)
    return rle_encode(out)

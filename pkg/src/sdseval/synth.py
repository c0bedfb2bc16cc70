"""Deterministic synthetic scenes for desk-scale end-to-end runs.

Each category draws from one shape family (rectangle, ellipse, L-shape).
Later shapes overwrite earlier pixels, so ground-truth instances are the
visible parts and are pairwise disjoint.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from sdseval.dataset import Candidate, Dataset, FeatureTable, GroundTruthInstance
from sdseval.masks import BinaryMask, SuperpixelMap, bbox, overlap, rle_encode

GROUP_NAMES = ("animals", "transport", "indoor")
SHAPES = ("rectangle", "ellipse", "lshape")


def sample_groups(categories: int) -> dict[int, str]:
    """Pairs of consecutive categories share a group: 1,2 animals; 3,4 transport; ..."""
    return {c: GROUP_NAMES[((c - 1) // 2) % len(GROUP_NAMES)] for c in range(1, categories + 1)}


def _draw(kind: str, x0: int, y0: int, w: int, h: int, width: int, height: int) -> np.ndarray:
    grid = np.zeros((height, width), dtype=bool)
    if kind == "rectangle":
        grid[y0 : y0 + h, x0 : x0 + w] = True
    elif kind == "ellipse":
        ys, xs = np.mgrid[0:height, 0:width]
        cy, cx = y0 + (h - 1) / 2, x0 + (w - 1) / 2
        grid = ((ys - cy) / (h / 2)) ** 2 + ((xs - cx) / (w / 2)) ** 2 <= 1.0
    elif kind == "lshape":
        grid[y0 : y0 + h, x0 : x0 + max(2, w // 2)] = True
        grid[y0 + h - max(2, h // 2) : y0 + h, x0 : x0 + w] = True
    else:
        raise ValueError(kind)
    return grid


def _scene(rng, shapes: int, categories: int, width: int, height: int, min_visible: float):
    for _ in range(1000):
        layers = []
        for _ in range(shapes):
            c = int(rng.integers(1, categories + 1))
            w = int(rng.integers(width // 5, width // 2 + 1))
            h = int(rng.integers(height // 5, height // 2 + 1))
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            layers.append((c, _draw(SHAPES[(c - 1) % len(SHAPES)], x0, y0, w, h, width, height)))
        visible = []
        covered = np.zeros((height, width), dtype=bool)
        for c, full in reversed(layers):
            vis = full & ~covered
            covered |= full
            visible.append((c, vis, full))
        visible.reverse()
        if all(v.sum() >= max(20, min_visible * f.sum()) for _, v, f in visible):
            return [(c, v) for c, v, _ in visible]
    raise RuntimeError("could not place shapes; use a larger image or fewer shapes")


def _shift(grid: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(grid)
    h, w = grid.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = grid[ys, xs]
    return out


def _perturbations(rng, grid: np.ndarray) -> list[np.ndarray]:
    out = [
        grid,
        ndimage.binary_dilation(grid, iterations=2),
        ndimage.binary_erosion(grid, iterations=2),
    ]
    dy, dx = (int(v) * int(rng.choice([-1, 1])) for v in rng.integers(2, 6, size=2))
    out.append(_shift(grid, dy, dx))
    rows = np.flatnonzero(grid.any(axis=1))
    half = grid.copy()
    half[rows[0] + (rows[-1] - rows[0] + 1) // 2 :] = False
    out.append(half)
    return out


def oracle_features(mask: BinaryMask, gts: list[GroundTruthInstance], categories: int) -> np.ndarray:
    """Best overlap with each category's instances, then normalised area and box aspect."""
    best = np.zeros(categories)
    for g in gts:
        best[g.category_id - 1] = max(best[g.category_id - 1], overlap(mask, g.mask))
    box = bbox(mask)
    geometry = [mask.area / (mask.width * mask.height), box.width / (box.width + box.height)]
    return np.concatenate([best, geometry])


def synth_generate(
    seed: int,
    images: int,
    shapes_per_image: int,
    categories: int,
    width: int = 64,
    height: int = 64,
    tile: int = 8,
    background_candidates: int = 3,
    min_visible: float = 0.4,
) -> Dataset:
    if min(images, shapes_per_image, categories) < 1:
        raise ValueError("counts must be >= 1")
    rng = np.random.default_rng(seed)
    ds = Dataset(groups=sample_groups(categories))
    ds.features = FeatureTable(categories + 2)
    for n in range(images):
        image_id = f"img{n:04d}"
        scene = _scene(rng, shapes_per_image, categories, width, height, min_visible)
        gts = [
            GroundTruthInstance(image_id, k + 1, c, rle_encode(vis)) for k, (c, vis) in enumerate(scene)
        ]
        grids = []
        for _, vis in scene:
            grids.extend(_perturbations(rng, vis))
        for _ in range(background_candidates):
            w = int(rng.integers(4, width // 3))
            h = int(rng.integers(4, height // 3))
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            grids.append(_draw("rectangle", x0, y0, w, h, width, height))
        cands = []
        for grid in grids:
            if grid.any():
                cands.append(Candidate(image_id, len(cands) + 1, rle_encode(grid)))
        ds.instances.extend(gts)
        ds.candidates.extend(cands)
        ds.superpixels[image_id] = SuperpixelMap.tiles(width, height, tile)
        for g in gts:
            ds.features.add(image_id, "instance", g.instance_id, oracle_features(g.mask, gts, categories))
        for c in cands:
            ds.features.add(image_id, "candidate", c.candidate_id, oracle_features(c.mask, gts, categories))
    return ds


def synth_car_road(
    seed: int,
    images: int,
    overlap_range: tuple[float, float],
    car_tiles: tuple[int, int] = (3, 5),
    width: int = 64,
    height: int = 64,
    tile: int = 4,
    max_tries: int = 10000,
) -> Dataset:
    """Single-category scenes: a tile-aligned rectangle ("car") and a one-tile strip below it ("road").

    The only candidate per image is car plus road, with its overlap against the
    car drawn from ``overlap_range``.  Shapes align with the tile superpixels.
    """
    rng = np.random.default_rng(seed)
    cols, rows = width // tile, height // tile
    lo, hi = overlap_range
    ds = Dataset(groups={1: GROUP_NAMES[1]})
    ds.features = FeatureTable(3)
    n = 0
    tries = 0
    while n < images:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("overlap range unreachable for the given car sizes")
        cw, ch = (int(v) for v in rng.integers(car_tiles[0], car_tiles[1] + 1, size=2))
        car_area = cw * ch
        lengths = [L for L in range(1, cols + 1) if lo < car_area / (car_area + L) <= hi]
        if not lengths or ch + 1 > rows:
            continue
        road = int(rng.choice(lengths))
        cx = int(rng.integers(0, cols - cw + 1))
        cy = int(rng.integers(0, rows - ch))
        # the road passes under the car, sticking out on either side
        lo_left, hi_left = max(0, cx - road + 1), min(cols - road, cx + cw - 1)
        if lo_left > hi_left:
            continue
        left = int(rng.integers(lo_left, hi_left + 1))
        car = np.zeros((rows, cols), dtype=bool)
        car[cy : cy + ch, cx : cx + cw] = True
        strip = np.zeros_like(car)
        strip[cy + ch, left : left + road] = True
        if not (strip & ~car).any():
            continue
        up = np.ones((tile, tile), dtype=bool)
        car_px = np.kron(car, up)
        cand_px = np.kron(car | strip, up)
        image_id = f"car{n:04d}"
        gt = GroundTruthInstance(image_id, 1, 1, rle_encode(car_px))
        cand = Candidate(image_id, 1, rle_encode(cand_px))
        if not lo < overlap(cand.mask, gt.mask) <= hi:
            continue
        ds.instances.append(gt)
        ds.candidates.append(cand)
        ds.superpixels[image_id] = SuperpixelMap.tiles(width, height, tile)
        ds.features.add(image_id, "instance", 1, oracle_features(gt.mask, [gt], 1))
        ds.features.add(image_id, "candidate", 1, oracle_features(cand.mask, [gt], 1))
        n += 1
    return ds


def merge(*datasets: Dataset) -> Dataset:
    """Concatenate datasets whose image ids are disjoint."""
    out = Dataset()
    dims = {d.features.dim for d in datasets if d.features is not None}
    if len(dims) > 1:
        raise ValueError("feature dimensions differ")
    out.features = FeatureTable(dims.pop()) if dims else None
    for d in datasets:
        clash = set(out.superpixels) & set(d.superpixels)
        if clash:
            raise ValueError(f"image ids overlap: {sorted(clash)[:3]}")
        out.instances.extend(d.instances)
        out.candidates.extend(d.candidates)
        out.detections.extend(d.detections)
        out.superpixels.update(d.superpixels)
        out.groups.update(d.groups)
        if d.features is not None:
            for key in d.features.keys():
                out.features.add(*key, d.features._rows[key])
    return out

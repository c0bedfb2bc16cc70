import numpy as np
import pytest

from sdseval.dataset import Detection, GroundTruthInstance
from sdseval.masks import rle_encode

ACCEPTANCE_LINES: list[str] = []


def mask_from_pixels(pixels, width, height):
    """Mask with foreground at the given ``(row, col)`` pixels."""
    grid = np.zeros((height, width), dtype=bool)
    for r, c in pixels:
        grid[r, c] = True
    return rle_encode(grid)


def rect_mask(x0, y0, x1, y1, width, height):
    grid = np.zeros((height, width), dtype=bool)
    grid[y0 : y1 + 1, x0 : x1 + 1] = True
    return rle_encode(grid)


def gt(image_id, instance_id, category_id, mask):
    return GroundTruthInstance(image_id, instance_id, category_id, mask)


def det(image_id, category_id, score, mask, cid=None):
    return Detection(image_id, category_id, float(score), mask, cid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

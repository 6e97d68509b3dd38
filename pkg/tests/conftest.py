from __future__ import annotations

import numpy as np
import pytest

from medico_vqa.imaging import BinaryMask


def mask_from_rows(rows: list[str]) -> BinaryMask:
    """'#' foreground, '.' background; one string per row."""
    return BinaryMask(np.array([[ch == "#" for ch in row] for row in rows], dtype=bool))


def ellipse(width: int, height: int, cx: float, cy: float, rx: float, ry: float) -> BinaryMask:
    ys, xs = np.mgrid[0:height, 0:width]
    return BinaryMask(((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0)


@pytest.fixture
def rng():
    return np.random.RandomState(42)

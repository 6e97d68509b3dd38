"""Binary-mask representation and raster operations.

Everything grounding-related in the pipeline ultimately reduces to the
operations here: thresholding service heatmaps, cleaning up pseudo-masks
(connected components + area filtering + black-border removal), combining
per-prompt masks, measuring overlap, and converting masks to and from
polygons so they can be expressed as location tokens.

All functions are pure; masks are immutable value objects. Coordinates use
image convention: x grows rightward, y grows downward, pixel (px, py)
occupies the unit square [px, px+1] x [py, py+1].
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionError

logger = logging.getLogger(__name__)

# PNG convention for mask files: single channel, 0 = background,
# 255 = foreground; anything > 127 reads back as foreground.
_FOREGROUND_THRESHOLD = 127


@dataclass(frozen=True)
class BinaryMask:
    """A 2D boolean grid; the unit of all grounding supervision.

    ``pixels`` is a (height, width) boolean array. Instances are immutable;
    the backing array is flagged non-writeable on construction.
    """

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=bool)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"mask must be a non-empty 2D grid, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        """(height, width), numpy order."""
        return self.pixels.shape

    def count(self) -> int:
        """Number of foreground pixels."""
        return int(self.pixels.sum())

    def is_empty(self) -> bool:
        return not self.pixels.any()

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self):
        return hash((self.shape, self.pixels.tobytes()))

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))


@dataclass(frozen=True)
class Polygon:
    """A polygon with sub-pixel vertices, closed implicitly.

    Vertices are (x, y) pairs; at least 3 are required. Bounds are owned by
    the image the polygon refers to and are validated at the use sites
    (rasterization clamps, token encoding rejects).
    """

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise ValueError(f"polygon needs >= 3 vertices, got {len(verts)}")
        object.__setattr__(self, "vertices", verts)

    def area(self) -> float:
        """Absolute shoelace area."""
        return abs(self.signed_area())

    def signed_area(self) -> float:
        total = 0.0
        verts = self.vertices
        for (x1, y1), (x2, y2) in zip(verts, verts[1:] + verts[:1]):
            total += x1 * y2 - x2 * y1
        return total / 2.0


@dataclass(frozen=True)
class Component:
    """One connected foreground region.

    ``bounding_box`` is (x0, y0, x1, y1) with inclusive pixel bounds;
    labels run from 1 in row-major scan order of each component's first
    pixel.
    """

    pixel_count: int
    bounding_box: tuple[int, int, int, int]
    label: int


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def _label_map(mask: BinaryMask, connectivity: int) -> tuple[np.ndarray, int]:
    """Label foreground pixels 1..n in scan order of first occurrence."""
    raw, n = ndimage.label(mask.pixels, structure=_structure(connectivity))
    if n == 0:
        return raw, 0
    # scipy's label ids are not guaranteed to follow scan order; renumber by
    # the flat index of each component's first pixel.
    flat = raw.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    idx = np.flatnonzero(flat)
    # reversed so earlier indices win
    first[flat[idx[::-1]]] = idx[::-1]
    order = np.argsort(first[1:], kind="stable")  # old label - 1, by first pixel
    remap = np.zeros(n + 1, dtype=raw.dtype)
    remap[order + 1] = np.arange(1, n + 1)
    return remap[raw], n


def threshold_mask(image: np.ndarray, thresh: float) -> BinaryMask:
    """Binarize a grayscale grid: foreground iff intensity > thresh.

    Accepts any numeric 2D grid (0-255 grayscale or [0, 1] heatmaps);
    ``thresh`` must sit in [0, 255].
    """
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise DimensionError(f"expected a non-empty 2D image, got shape {arr.shape}")
    if not 0 <= thresh <= 255:
        raise ValueError(f"thresh must be in [0, 255], got {thresh}")
    return BinaryMask(arr > thresh)


def connected_components(mask: BinaryMask, connectivity: int = 8) -> list[Component]:
    """List foreground components, labelled 1..n in scan order."""
    labels, n = _label_map(mask, connectivity)
    if n == 0:
        return []
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    out = []
    for label in range(1, n + 1):
        ys, xs = np.nonzero(labels == label)
        out.append(
            Component(
                pixel_count=int(counts[label]),
                bounding_box=(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())),
                label=label,
            )
        )
    return out


def refine_mask(mask: BinaryMask, min_area_frac: float, connectivity: int = 8) -> BinaryMask:
    """Drop components smaller than ``min_area_frac`` of the frame.

    Keeps components with pixel_count >= min_area_frac * width * height.
    The result is always a pixel-subset of the input; filtering everything
    yields an empty mask (the forge records that as a degenerate sample).
    """
    if not 0 <= min_area_frac <= 1:
        raise ValueError(f"min_area_frac must be in [0, 1], got {min_area_frac}")
    labels, n = _label_map(mask, connectivity)
    if n == 0:
        return mask
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    min_area = min_area_frac * mask.width * mask.height
    keep = counts >= min_area
    keep[0] = False
    return BinaryMask(keep[labels])


def remove_black_border_components(
    mask: BinaryMask,
    image: np.ndarray,
    max_mean_intensity: float = 10.0,
) -> BinaryMask:
    """Drop border-touching components lying on near-black source pixels.

    Endoscopy frames carry black corner borders that text-prompted
    segmentation happily labels as foreground; a component is dropped when
    it touches the frame border and its mean source intensity (0-255 scale)
    is <= ``max_mean_intensity``.
    """
    arr = np.asarray(image, dtype=float)
    if arr.shape != mask.shape:
        raise DimensionError(f"image shape {arr.shape} != mask shape {mask.shape}")
    labels, n = _label_map(mask, connectivity=8)
    if n == 0:
        return mask
    border = np.zeros(mask.shape, dtype=bool)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    keep = np.ones(n + 1, dtype=bool)
    keep[0] = False
    for label in range(1, n + 1):
        member = labels == label
        if (member & border).any() and arr[member].mean() <= max_mean_intensity:
            keep[label] = False
    return BinaryMask(keep[labels])


def union_masks(masks: list[BinaryMask]) -> BinaryMask:
    """Pixel-wise OR of same-sized masks."""
    if not masks:
        raise ValueError("union_masks needs at least one mask")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise DimensionError(f"mask shape {m.shape} != {shape}")
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        out |= m.pixels
    return BinaryMask(out)


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a.pixels, b.pixels).sum())
    union = int(np.logical_or(a.pixels, b.pixels).sum())
    if union == 0:
        return 1.0
    return inter / union


# ---------------------------------------------------------------------------
# mask -> polygons (crack-boundary tracing)
# ---------------------------------------------------------------------------
#
# The tracer walks along pixel-square edges with foreground on the right of
# the direction of travel, so the extracted polygon encloses exactly the
# component's pixels: rasterizing it back (pixel-center, even-odd) is the
# identity on hole-free components. At diagonal "pinch" corners the walk
# turns left under 8-connectivity (keeping the whole component in one loop)
# and right under 4-connectivity.

_RIGHT_TURN = {(1, 0): (0, 1), (0, 1): (-1, 0), (-1, 0): (0, -1), (0, -1): (1, 0)}
_LEFT_TURN = {v: k for k, v in _RIGHT_TURN.items()}


def _trace_loop(fg, start: tuple[int, int], d0: tuple[int, int], connectivity: int):
    """Follow one boundary loop; returns (corner list, visited directed edges)."""
    corners = [start]
    visited = []
    c, d = start, d0
    while True:
        visited.append((c, d))
        c = (c[0] + d[0], c[1] + d[1])
        x, y = c
        nw, ne = fg(x - 1, y - 1), fg(x, y - 1)
        sw, se = fg(x - 1, y), fg(x, y)
        candidates = []
        if se and not ne:
            candidates.append((1, 0))
        if nw and not sw:
            candidates.append((-1, 0))
        if sw and not se:
            candidates.append((0, 1))
        if ne and not nw:
            candidates.append((0, -1))
        if len(candidates) == 1:
            nd = candidates[0]
        else:
            # diagonal saddle: two outgoing edges
            nd = _LEFT_TURN[d] if connectivity == 8 else _RIGHT_TURN[d]
        if (c, nd) == (start, d0):
            break
        if nd != d:
            corners.append(c)
        d = nd
    return corners, visited


def _boundary_loops(mask: BinaryMask, connectivity: int):
    """All closed crack-boundary loops, with the seed pixel of each."""
    px = mask.pixels
    h, w = px.shape

    def fg(x: int, y: int) -> bool:
        return 0 <= x < w and 0 <= y < h and bool(px[y, x])

    loops = []
    seen: set[tuple[tuple[int, int], tuple[int, int]]] = set()
    ys, xs = np.nonzero(px)
    for yy, xx in zip(ys.tolist(), xs.tolist()):
        # top edge of (xx, yy) is a boundary edge iff the pixel above is bg
        if fg(xx, yy - 1):
            continue
        start, d0 = (xx, yy), (1, 0)
        if (start, d0) in seen:
            continue
        corners, visited = _trace_loop(fg, start, d0, connectivity)
        seen.update(visited)
        loops.append((corners, (xx, yy)))
    return loops


def _point_segment_distance(p, a, b) -> float:
    ax, ay = a
    bx, by = b
    px_, py_ = p
    dx, dy = bx - ax, by - ay
    if dx == 0 and dy == 0:
        return math.hypot(px_ - ax, py_ - ay)
    t = ((px_ - ax) * dx + (py_ - ay) * dy) / (dx * dx + dy * dy)
    t = max(0.0, min(1.0, t))
    return math.hypot(px_ - (ax + t * dx), py_ - (ay + t * dy))


def _douglas_peucker(points, eps: float):
    """Simplify an open polyline, keeping both endpoints."""
    if len(points) <= 2:
        return list(points)
    dmax, imax = -1.0, 0
    for i in range(1, len(points) - 1):
        d = _point_segment_distance(points[i], points[0], points[-1])
        if d > dmax:
            dmax, imax = d, i
    if dmax <= eps:
        return [points[0], points[-1]]
    left = _douglas_peucker(points[: imax + 1], eps)
    right = _douglas_peucker(points[imax:], eps)
    return left[:-1] + right


def _simplify_ring(corners, eps: float):
    """Douglas-Peucker on a closed ring, anchored at two extreme vertices."""
    if len(corners) <= 3:
        return list(corners)
    x0, y0 = corners[0]
    far = max(range(len(corners)), key=lambda i: (corners[i][0] - x0) ** 2 + (corners[i][1] - y0) ** 2)
    first = _douglas_peucker(corners[: far + 1], eps)
    second = _douglas_peucker(corners[far:] + corners[:1], eps)
    ring = first[:-1] + second[:-1]
    if len(ring) < 3:
        # degenerate simplification (thin component, large eps): re-add the
        # vertex farthest from the surviving chord
        anchors = set(ring)
        rest = [c for c in corners if c not in anchors]
        if rest:
            extra = max(rest, key=lambda p: _point_segment_distance(p, ring[0], ring[-1]))
            ring = [ring[0], extra, ring[-1]] if len(ring) == 2 else list(corners[:3])
    return ring


def extract_polygons(mask: BinaryMask, simplify_eps: float = 0.0, connectivity: int = 8) -> list[Polygon]:
    """Outer contour of each component as a polygon, largest component first.

    Returns exact crack-boundary polygons (collinear vertices merged) when
    ``simplify_eps`` is 0, Douglas-Peucker simplified ones otherwise. Holes
    are not preserved: grounding targets regions, not topology.
    """
    if simplify_eps < 0:
        raise ValueError(f"simplify_eps must be >= 0, got {simplify_eps}")
    if mask.is_empty():
        return []
    labels, _ = _label_map(mask, connectivity)
    counts = np.bincount(labels.ravel())
    polygons = []
    for corners, seed in _boundary_loops(mask, connectivity):
        # keep outer loops only; with foreground on the right of travel they
        # have positive shoelace area in image coordinates
        signed = 0.0
        for (x1, y1), (x2, y2) in zip(corners, corners[1:] + corners[:1]):
            signed += x1 * y2 - x2 * y1
        if signed <= 0:
            continue
        if simplify_eps > 0:
            corners = _simplify_ring(corners, simplify_eps)
        label = int(labels[seed[1], seed[0]])
        polygons.append((int(counts[label]), label, corners))
    polygons.sort(key=lambda item: (-item[0], item[1]))
    return [Polygon(tuple((float(x), float(y)) for x, y in corners)) for _, _, corners in polygons]


def rasterize(polygons: list[Polygon], width: int, height: int) -> BinaryMask:
    """Fill polygons onto a width x height grid.

    Each polygon is filled with the even-odd rule, membership decided by the
    pixel center (x+0.5, y+0.5); overlapping polygons are unioned.
    Out-of-bounds vertices are clamped to the frame (with a warning).
    """
    if width < 1 or height < 1:
        raise DimensionError(f"target grid must be >= 1x1, got {width}x{height}")
    out = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        xs = np.array([v[0] for v in poly.vertices], dtype=float)
        ys = np.array([v[1] for v in poly.vertices], dtype=float)
        if (xs < 0).any() or (xs > width).any() or (ys < 0).any() or (ys > height).any():
            logger.warning("rasterize: clamping out-of-bounds vertices into %dx%d frame", width, height)
            xs = np.clip(xs, 0, width)
            ys = np.clip(ys, 0, height)
        x2 = np.roll(xs, -1)
        y2 = np.roll(ys, -1)
        for row in range(height):
            yc = row + 0.5
            # half-open span [min, max) keeps vertex-on-scanline crossings even
            hit = ((ys <= yc) & (yc < y2)) | ((y2 <= yc) & (yc < ys))
            if not hit.any():
                continue
            t = (yc - ys[hit]) / (y2[hit] - ys[hit])
            crossings = np.sort(xs[hit] + t * (x2[hit] - xs[hit]))
            for xa, xb in zip(crossings[0::2], crossings[1::2]):
                i0 = max(0, math.ceil(xa - 0.5))
                i1 = min(width, math.ceil(xb - 0.5))
                if i1 > i0:
                    out[row, i0:i1] = True
    return BinaryMask(out)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def save_mask(mask: BinaryMask, path: str | Path) -> Path:
    """Write an 8-bit single-channel PNG: 0 background, 255 foreground."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.pixels.astype(np.uint8) * 255, mode="L").save(path, format="PNG")
    return path


def load_mask(path: str | Path) -> BinaryMask:
    """Read a mask PNG; any value > 127 counts as foreground."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return BinaryMask(arr > _FOREGROUND_THRESHOLD)


def load_grayscale(source: str | Path | bytes) -> np.ndarray:
    """Load an image as a (height, width) uint8 grayscale array."""
    if isinstance(source, bytes):
        img = Image.open(io.BytesIO(source))
    else:
        img = Image.open(source)
    with img:
        return np.asarray(img.convert("L"))


def image_size(source: str | Path | bytes) -> tuple[int, int]:
    """(width, height) of an image file or byte payload."""
    if isinstance(source, bytes):
        img = Image.open(io.BytesIO(source))
    else:
        img = Image.open(source)
    with img:
        return img.size

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medico_vqa.errors import DimensionError
from medico_vqa.imaging import (
    BinaryMask,
    Polygon,
    connected_components,
    extract_polygons,
    iou,
    load_mask,
    rasterize,
    refine_mask,
    remove_black_border_components,
    save_mask,
    threshold_mask,
    union_masks,
)

from conftest import ellipse, mask_from_rows


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------


def iou_bruteforce(a: BinaryMask, b: BinaryMask) -> float:
    inter = union = 0
    for y in range(a.height):
        for x in range(a.width):
            pa, pb = bool(a.pixels[y, x]), bool(b.pixels[y, x])
            inter += pa and pb
            union += pa or pb
    return 1.0 if union == 0 else inter / union


def flood_fill_components(mask: BinaryMask, connectivity: int) -> list[set[tuple[int, int]]]:
    """Scan-order BFS flood fill; the reference for component structure."""
    if connectivity == 4:
        neighbours = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        neighbours = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]
    seen: set[tuple[int, int]] = set()
    components = []
    for y in range(mask.height):
        for x in range(mask.width):
            if not mask.pixels[y, x] or (x, y) in seen:
                continue
            stack, comp = [(x, y)], set()
            seen.add((x, y))
            while stack:
                cx, cy = stack.pop()
                comp.add((cx, cy))
                for dx, dy in neighbours:
                    nx, ny = cx + dx, cy + dy
                    if 0 <= nx < mask.width and 0 <= ny < mask.height \
                            and mask.pixels[ny, nx] and (nx, ny) not in seen:
                        seen.add((nx, ny))
                        stack.append((nx, ny))
            components.append(comp)
    return components


def random_mask(rng, width=6, height=6, p=0.4) -> BinaryMask:
    return BinaryMask(rng.random_sample((height, width)) < p)


# ---------------------------------------------------------------------------
# BinaryMask basics
# ---------------------------------------------------------------------------


def test_mask_rejects_degenerate_shapes():
    with pytest.raises(DimensionError):
        BinaryMask(np.zeros((0, 4), dtype=bool))
    with pytest.raises(DimensionError):
        BinaryMask(np.zeros(7, dtype=bool))


def test_mask_png_round_trip(tmp_path, rng):
    for _ in range(5):
        mask = random_mask(rng, 9, 7)
        path = save_mask(mask, tmp_path / "m.png")
        assert load_mask(path) == mask


def test_mask_png_threshold_convention(tmp_path):
    from PIL import Image

    arr = np.array([[0, 127, 128, 255]], dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(tmp_path / "gray.png")
    mask = load_mask(tmp_path / "gray.png")
    assert mask.pixels.tolist() == [[False, False, True, True]]


# ---------------------------------------------------------------------------
# threshold_mask
# ---------------------------------------------------------------------------


def test_threshold_all_zero_is_empty():
    assert threshold_mask(np.zeros((4, 4)), 0).is_empty()


def test_threshold_all_255_is_full():
    assert threshold_mask(np.full((4, 4), 255), 0) == BinaryMask.full(4, 4)


def test_threshold_strictly_greater():
    image = np.array([[10, 200], [128, 127]])
    assert threshold_mask(image, 127).pixels.tolist() == [[False, True], [True, False]]


def test_threshold_rejects_empty_image_and_bad_thresh():
    with pytest.raises(DimensionError):
        threshold_mask(np.zeros((0, 3)), 10)
    with pytest.raises(ValueError):
        threshold_mask(np.zeros((2, 2)), 256)


# ---------------------------------------------------------------------------
# connected components
# ---------------------------------------------------------------------------


def test_components_empty_mask():
    assert connected_components(BinaryMask.empty(3, 3)) == []


def test_components_full_3x3():
    comps = connected_components(BinaryMask.full(3, 3))
    assert len(comps) == 1
    assert comps[0].pixel_count == 9
    assert comps[0].bounding_box == (0, 0, 2, 2)


DIAG_CLUSTERS = mask_from_rows(
    [
        "#....",
        "##...",
        "..##.",
        ".....",
        ".....",
    ]
)


@pytest.mark.parametrize("connectivity,expected", [(4, 2), (8, 1)])
def test_components_diagonal_clusters(connectivity, expected):
    assert len(flood_fill_components(DIAG_CLUSTERS, connectivity)) == expected  # oracle agrees
    assert len(connected_components(DIAG_CLUSTERS, connectivity)) == expected


@given(st.integers(0, 2**31 - 1), st.sampled_from([4, 8]))
@settings(max_examples=60, deadline=None)
def test_components_match_flood_fill_oracle(seed, connectivity):
    mask = random_mask(np.random.RandomState(seed))
    comps = connected_components(mask, connectivity)
    oracle = flood_fill_components(mask, connectivity)
    assert len(comps) == len(oracle)
    # labels are contiguous from 1 in scan order of each component's first pixel
    assert [c.label for c in comps] == list(range(1, len(comps) + 1))
    oracle_sizes = sorted(len(c) for c in oracle)
    assert sorted(c.pixel_count for c in comps) == oracle_sizes
    assert sum(c.pixel_count for c in comps) == mask.count()


def test_component_labels_follow_scan_order():
    mask = mask_from_rows(
        [
            "..#",
            "#..",
            "..#",
        ]
    )
    comps = connected_components(mask, 4)
    # first pixel in scan order is (2,0), then (0,1), then (2,2)
    assert [c.bounding_box for c in comps] == [(2, 0, 2, 0), (0, 1, 0, 1), (2, 2, 2, 2)]


# ---------------------------------------------------------------------------
# refine_mask
# ---------------------------------------------------------------------------


def test_refine_drops_small_components():
    arr = np.zeros((32, 32), dtype=bool)
    arr[0:10, 0:10] = True  # 100 px
    arr[20, 20] = arr[20, 21] = True  # 2 px
    mask = BinaryMask(arr)
    sizes = sorted(len(c) for c in flood_fill_components(mask, 8))
    assert sizes == [2, 100]  # oracle confirms the component areas
    refined = refine_mask(mask, 0.01)  # threshold 10.24 px
    assert refined.count() == 100
    assert not refined.pixels[20, 20]


def test_refine_zero_frac_is_identity(rng):
    mask = random_mask(rng)
    assert refine_mask(mask, 0.0) == mask


def test_refine_empty_mask():
    assert refine_mask(BinaryMask.empty(4, 4), 0.5).is_empty()


@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_refine_output_is_subset(seed, frac):
    mask = random_mask(np.random.RandomState(seed))
    refined = refine_mask(mask, frac)
    assert not (refined.pixels & ~mask.pixels).any()


# ---------------------------------------------------------------------------
# union / iou
# ---------------------------------------------------------------------------


def test_union_examples():
    a = mask_from_rows(["#.", ".."])
    b = mask_from_rows(["..", ".#"])
    empty = BinaryMask.empty(2, 2)
    assert union_masks([a, a]) == a
    assert union_masks([a, empty]) == a
    assert union_masks([a, b]) == mask_from_rows(["#.", ".#"])


def test_union_errors():
    with pytest.raises(ValueError):
        union_masks([])
    with pytest.raises(DimensionError):
        union_masks([BinaryMask.empty(2, 2), BinaryMask.empty(3, 2)])


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_union_commutative_associative_idempotent(seed):
    rng = np.random.RandomState(seed)
    a, b, c = (random_mask(rng) for _ in range(3))
    assert union_masks([a, b]) == union_masks([b, a])
    assert union_masks([union_masks([a, b]), c]) == union_masks([a, union_masks([b, c])])
    assert union_masks([a, a]) == a


def test_iou_examples():
    a = mask_from_rows(["#.", "#."])  # pixels (0,0), (0,1)
    b = mask_from_rows([".#", "##"])
    assert iou(a, a) == 1.0
    disjoint = mask_from_rows([".#", ".."])
    assert iou(mask_from_rows(["#.", ".."]), disjoint) == 0.0
    # a = {(0,0),(0,1)}, b = {(0,1),(1,1)}: intersection 1, union 3
    b = mask_from_rows(["..", "##"])
    a = mask_from_rows(["#.", "#."])
    assert iou(a, b) == pytest.approx(1 / 3, abs=0)
    assert iou(BinaryMask.empty(2, 2), BinaryMask.empty(2, 2)) == 1.0
    with pytest.raises(DimensionError):
        iou(a, BinaryMask.empty(3, 3))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_iou_symmetric_and_matches_bruteforce(seed):
    rng = np.random.RandomState(seed)
    a, b = random_mask(rng, 4, 4), random_mask(rng, 4, 4)
    assert iou(a, b) == iou(b, a)
    assert iou(a, b) == iou_bruteforce(a, b)
    if not a.is_empty():
        assert iou(a, a) == 1.0


# ---------------------------------------------------------------------------
# black-border removal
# ---------------------------------------------------------------------------


def test_black_border_components_dropped():
    arr = np.zeros((16, 16), dtype=bool)
    arr[0:3, 0:3] = True  # corner blob on black background
    arr[6:12, 6:12] = True  # center blob on bright tissue
    mask = BinaryMask(arr)
    image = np.full((16, 16), 150.0)
    image[0:4, 0:4] = 0.0
    cleaned = remove_black_border_components(mask, image)
    assert not cleaned.pixels[0:3, 0:3].any()
    assert cleaned.pixels[6:12, 6:12].all()


def test_bright_border_component_survives():
    arr = np.zeros((8, 8), dtype=bool)
    arr[0:2, 0:2] = True
    mask = BinaryMask(arr)
    image = np.full((8, 8), 200.0)
    assert remove_black_border_components(mask, image) == mask


# ---------------------------------------------------------------------------
# polygons
# ---------------------------------------------------------------------------


def test_polygon_needs_three_vertices():
    with pytest.raises(ValueError):
        Polygon(((0, 0), (1, 1)))


def test_extract_empty_mask():
    assert extract_polygons(BinaryMask.empty(4, 4)) == []


def test_extract_rectangle_round_trip():
    arr = np.zeros((10, 12), dtype=bool)
    arr[2:7, 3:9] = True
    mask = BinaryMask(arr)
    polys = extract_polygons(mask, 0.0)
    assert len(polys) == 1
    assert len(polys[0].vertices) == 4  # collinear crack vertices merged
    back = rasterize(polys, 12, 10)
    assert iou(back, mask) >= 0.99


def test_extract_orders_by_descending_area():
    arr = np.zeros((20, 20), dtype=bool)
    arr[1:4, 1:4] = True  # 9 px
    arr[8:16, 8:16] = True  # 64 px
    polys = extract_polygons(BinaryMask(arr), 0.0)
    assert len(polys) == 2
    assert polys[0].area() > polys[1].area()
    # first polygon encloses the larger blob
    xs = [v[0] for v in polys[0].vertices]
    assert min(xs) == 8.0


def test_extract_fills_holes():
    arr = np.ones((8, 8), dtype=bool)
    arr[3:5, 3:5] = False
    polys = extract_polygons(BinaryMask(arr), 0.0)
    assert len(polys) == 1  # outer contour only
    back = rasterize(polys, 8, 8)
    assert back == BinaryMask.full(8, 8)  # the hole is not preserved


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_extract_rasterize_round_trip_convex_blobs(seed):
    rng = np.random.RandomState(seed)
    size = 64
    rx, ry = rng.uniform(6, 18), rng.uniform(6, 18)
    cx = rng.uniform(rx + 1, size - rx - 1)
    cy = rng.uniform(ry + 1, size - ry - 1)
    mask = ellipse(size, size, cx, cy, rx, ry)
    if mask.count() < 0.02 * size * size:
        return
    back = rasterize(extract_polygons(mask, 0.0), size, size)
    assert iou(back, mask) >= 0.98


def test_simplified_polygons_stay_close():
    mask = ellipse(64, 64, 32, 30, 16, 11)
    polys = extract_polygons(mask, simplify_eps=1.0)
    assert all(len(p.vertices) >= 3 for p in polys)
    assert len(polys[0].vertices) < len(extract_polygons(mask, 0.0)[0].vertices)
    back = rasterize(polys, 64, 64)
    assert iou(back, mask) >= 0.9


# ---------------------------------------------------------------------------
# rasterize
# ---------------------------------------------------------------------------


def test_rasterize_empty_list():
    assert rasterize([], 5, 5).is_empty()


def test_rasterize_rectangle_pixel_centers():
    poly = Polygon(((0, 0), (4, 0), (4, 4), (0, 4)))
    mask = rasterize([poly], 8, 8)
    assert mask.count() == 16
    assert mask.pixels[0:4, 0:4].all()


def test_rasterize_point_in_polygon_oracle():
    # triangle; membership checked against a direct even-odd point test
    poly = Polygon(((1.0, 1.0), (6.5, 2.0), (3.0, 6.0)))
    mask = rasterize([poly], 8, 8)

    def inside(px, py):
        verts = poly.vertices
        crossings = 0
        for (x1, y1), (x2, y2) in zip(verts, verts[1:] + verts[:1]):
            if (y1 <= py < y2) or (y2 <= py < y1):
                t = (py - y1) / (y2 - y1)
                if x1 + t * (x2 - x1) > px:
                    crossings += 1
        return crossings % 2 == 1

    for y in range(8):
        for x in range(8):
            assert bool(mask.pixels[y, x]) == inside(x + 0.5, y + 0.5)


def test_rasterize_clamps_out_of_bounds(caplog):
    poly = Polygon(((-3, -3), (12, -3), (12, 12), (-3, 12)))
    with caplog.at_level("WARNING"):
        mask = rasterize([poly], 8, 8)
    assert mask == BinaryMask.full(8, 8)
    assert any("clamping" in rec.message for rec in caplog.records)


@given(st.integers(0, 2**31 - 1), st.sampled_from([4, 8]))
@settings(max_examples=60, deadline=None)
def test_extract_rasterize_equals_component_hole_fill(seed, connectivity):
    # independent oracle: scipy label + fill_holes with the topologically dual
    # background connectivity (4-conn foreground <-> 8-conn background)
    from scipy import ndimage

    rng = np.random.RandomState(seed)
    h, w = rng.randint(2, 40), rng.randint(2, 40)
    arr = rng.random_sample((h, w)) < rng.uniform(0.2, 0.75)
    if not arr.any():
        return
    mask = BinaryMask(arr)
    back = rasterize(extract_polygons(mask, 0.0, connectivity=connectivity), w, h)
    fg = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    bg = ndimage.generate_binary_structure(2, 2 if connectivity == 4 else 1)
    labels, n = ndimage.label(arr, structure=fg)
    filled = np.zeros_like(arr)
    for lab in range(1, n + 1):
        filled |= ndimage.binary_fill_holes(labels == lab, structure=bg)
    assert back == BinaryMask(filled)

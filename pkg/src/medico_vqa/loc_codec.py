"""Bidirectional codec between masks/polygons and quantized location tokens.

The region-grounding task represents masks as text: each polygon vertex is
quantized into ``num_bins`` bins per axis and rendered as ``<loc_k>``
tokens, x before y, with a separator token between polygons. Decoding maps
each bin back to its center, so encode(decode(bin)) is the identity on bins
and coordinates survive a round trip to within one bin width.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

from .errors import NoParseableRegionError, TokenParseError
from .imaging import BinaryMask, Polygon, extract_polygons, rasterize

logger = logging.getLogger(__name__)

DEFAULT_NUM_BINS = 1000
SEPARATOR_TOKEN = "<sep>"

_LOC_OR_SEP = re.compile(r"<loc_(\d+)>|" + re.escape(SEPARATOR_TOKEN))
_MIN_SEGMENT_BINS = 6  # 3 vertices


@dataclass(frozen=True)
class LocTokenSeq:
    """Flat bin sequence, alternating x-bin then y-bin per vertex.

    ``polygon_breaks`` holds the start index of every polygon after the
    first; each polygon segment must encode at least 3 vertices.
    """

    bins: tuple[int, ...]
    num_bins: int = DEFAULT_NUM_BINS
    polygon_breaks: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "bins", tuple(int(b) for b in self.bins))
        object.__setattr__(self, "polygon_breaks", tuple(int(i) for i in self.polygon_breaks))
        if self.num_bins < 2:
            raise ValueError(f"num_bins must be >= 2, got {self.num_bins}")
        for b in self.bins:
            if not 0 <= b < self.num_bins:
                raise TokenParseError(f"bin {b} out of range [0, {self.num_bins - 1}]")
        bounds = (0,) + self.polygon_breaks + (len(self.bins),)
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise TokenParseError(f"polygon_breaks {self.polygon_breaks} not strictly increasing in range")
        for seg_idx, (b1, b2) in enumerate(zip(bounds, bounds[1:])):
            seg_len = b2 - b1
            if seg_len % 2 != 0:
                raise TokenParseError(f"segment {seg_idx} has an odd number of bins ({seg_len})")
            if seg_len < _MIN_SEGMENT_BINS:
                raise TokenParseError(f"segment {seg_idx} has {seg_len} bins, needs >= {_MIN_SEGMENT_BINS}")

    def segments(self) -> list[tuple[int, ...]]:
        bounds = (0,) + self.polygon_breaks + (len(self.bins),)
        return [self.bins[b1:b2] for b1, b2 in zip(bounds, bounds[1:])]


def encode_coord(x: float, extent: float, num_bins: int = DEFAULT_NUM_BINS) -> int:
    """Quantize a coordinate: floor(x * num_bins / extent), clamped to the last bin."""
    if extent <= 0:
        raise ValueError(f"extent must be > 0, got {extent}")
    if num_bins < 2:
        raise ValueError(f"num_bins must be >= 2, got {num_bins}")
    if not 0 <= x <= extent:
        raise ValueError(f"coordinate {x} outside [0, {extent}]")
    return min(num_bins - 1, math.floor(x * num_bins / extent))


def decode_coord(bin_index: int, extent: float, num_bins: int = DEFAULT_NUM_BINS) -> float:
    """Dequantize to the bin center: (bin + 0.5) * extent / num_bins."""
    if extent <= 0:
        raise ValueError(f"extent must be > 0, got {extent}")
    if num_bins < 2:
        raise ValueError(f"num_bins must be >= 2, got {num_bins}")
    if not 0 <= bin_index < num_bins:
        raise ValueError(f"bin {bin_index} out of range [0, {num_bins - 1}]")
    return (bin_index + 0.5) * extent / num_bins


def polygons_to_tokens(
    polys: list[Polygon], width: int, height: int, num_bins: int = DEFAULT_NUM_BINS
) -> LocTokenSeq:
    """Encode polygon vertices in order as (x-bin, y-bin) pairs."""
    if not polys:
        raise ValueError("no polygons to encode")
    bins: list[int] = []
    breaks: list[int] = []
    for poly in polys:
        if bins:
            breaks.append(len(bins))
        for x, y in poly.vertices:
            bins.append(encode_coord(x, width, num_bins))
            bins.append(encode_coord(y, height, num_bins))
    return LocTokenSeq(bins=tuple(bins), num_bins=num_bins, polygon_breaks=tuple(breaks))


def tokens_to_polygons(seq: LocTokenSeq, width: int, height: int) -> list[Polygon]:
    """Inverse of :func:`polygons_to_tokens` up to quantization error."""
    polys = []
    for segment in seq.segments():
        vertices = tuple(
            (decode_coord(xb, width, seq.num_bins), decode_coord(yb, height, seq.num_bins))
            for xb, yb in zip(segment[0::2], segment[1::2])
        )
        polys.append(Polygon(vertices))
    return polys


def render_token_text(seq: LocTokenSeq, separator: str = SEPARATOR_TOKEN) -> str:
    """Canonical token text: ``<loc_k>`` per bin, ``separator`` between polygons."""
    parts = ["".join(f"<loc_{b}>" for b in segment) for segment in seq.segments()]
    return separator.join(parts)


def parse_token_text(
    text: str, num_bins: int = DEFAULT_NUM_BINS, separator: str = SEPARATOR_TOKEN
) -> LocTokenSeq:
    """Extract all ``<loc_k>`` occurrences, splitting polygons at separators.

    Surrounding prose is ignored. Trailing unpaired bins are dropped, as are
    segments too short to make a polygon; if nothing parseable remains the
    text carries no region and :class:`NoParseableRegionError` is raised.
    Any bin >= ``num_bins`` is rejected outright.
    """
    if separator == SEPARATOR_TOKEN:
        pattern = _LOC_OR_SEP
    else:
        pattern = re.compile(r"<loc_(\d+)>|" + re.escape(separator))
    raw_segments: list[list[int]] = [[]]
    for match in pattern.finditer(text):
        if match.group(1) is None:
            raw_segments.append([])
            continue
        b = int(match.group(1))
        if b >= num_bins:
            raise TokenParseError(f"bin {b} out of range [0, {num_bins - 1}]")
        raw_segments[-1].append(b)

    bins: list[int] = []
    breaks: list[int] = []
    for segment in raw_segments:
        if len(segment) % 2 != 0:
            logger.warning("parse_token_text: dropping trailing unpaired bin in segment")
            segment = segment[:-1]
        if len(segment) < _MIN_SEGMENT_BINS:
            continue
        if bins:
            breaks.append(len(bins))
        bins.extend(segment)
    if not bins:
        raise NoParseableRegionError("no parseable region in generated text")
    return LocTokenSeq(bins=tuple(bins), num_bins=num_bins, polygon_breaks=tuple(breaks))


def mask_to_tokens(
    mask: BinaryMask, simplify_eps: float = 0.0, num_bins: int = DEFAULT_NUM_BINS
) -> LocTokenSeq:
    """Encode a mask: outer contours -> quantized vertex bins."""
    if mask.is_empty():
        raise ValueError("nothing to ground: mask is empty")
    polys = extract_polygons(mask, simplify_eps)
    return polygons_to_tokens(polys, mask.width, mask.height, num_bins)


def tokens_to_mask(seq: LocTokenSeq, width: int, height: int) -> BinaryMask:
    """Decode a token sequence back to a mask at the given dimensions."""
    return rasterize(tokens_to_polygons(seq, width, height), width, height)

"""Normalized bounding boxes, layout quantization, and the patch grid."""

from __future__ import annotations

import math
from dataclasses import dataclass


class InvalidBBoxError(ValueError):
    pass


class InvalidLayoutTokenError(ValueError):
    pass


class EmptyGroupError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle in page-fraction coordinates, all in [0, 1].

    The all-zero box is the designated "no location" value used for prompt
    tokens, sentinels, and layout tokens.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self) -> "BBox":
        for c in (self.x1, self.y1, self.x2, self.y2):
            if not (0.0 <= c <= 1.0):
                raise InvalidBBoxError(f"coordinate {c} outside [0, 1]: {self}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise InvalidBBoxError(f"inverted box: {self}")
        return self

    @property
    def is_null(self) -> bool:
        return self.x1 == 0.0 and self.y1 == 0.0 and self.x2 == 0.0 and self.y2 == 0.0

    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


NULL_BBOX = BBox(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PatchGrid:
    """The H/P x W/P grid of image patches for an H x W image."""

    height: int
    width: int
    patch: int

    def __post_init__(self):
        if self.patch <= 0 or self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"image {self.height}x{self.width} not a multiple of patch {self.patch}"
            )

    @property
    def rows(self) -> int:
        return self.height // self.patch

    @property
    def cols(self) -> int:
        return self.width // self.patch

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class LayoutQuantizer:
    """Maps continuous coordinates to the discrete layout token range [0, V]."""

    granularity: int = 500

    def __post_init__(self):
        if self.granularity < 1:
            raise ValueError("granularity must be >= 1")


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def quantize_bbox(b: BBox, q: LayoutQuantizer) -> tuple[int, int, int, int]:
    """Quantize each coordinate to round(c * V) with half-up ties."""
    b.validate()
    v = q.granularity
    return tuple(_round_half_up(c * v) for c in b.as_tuple())


def dequantize_bbox(indices: tuple[int, int, int, int], q: LayoutQuantizer) -> BBox:
    """Inverse of quantize_bbox: coordinate = index / V."""
    v = q.granularity
    for i in indices:
        if not (0 <= i <= v):
            raise InvalidLayoutTokenError(f"layout index {i} outside [0, {v}]")
    x1, y1, x2, y2 = (i / v for i in indices)
    return BBox(x1, y1, x2, y2)


def patch_index_of(b: BBox, g: PatchGrid) -> int | None:
    """Row-major index of the grid cell containing the box center.

    Cells are half-open along each axis except the last cell, which is
    closed at 1.0. The null box maps to None (the pseudo patch).
    """
    b.validate()
    if b.is_null:
        return None
    cx, cy = b.center()
    col = min(int(cx * g.cols), g.cols - 1)
    row = min(int(cy * g.rows), g.rows - 1)
    return row * g.cols + col


def union_bbox(boxes: list[BBox]) -> BBox:
    """Componentwise min/max hull of a nonempty list of boxes.

    Callers should exclude null "no location" boxes; a null box pins the
    union's upper-left corner at the origin.
    """
    if not boxes:
        raise EmptyGroupError("union of zero boxes")
    return BBox(
        min(b.x1 for b in boxes),
        min(b.y1 for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )

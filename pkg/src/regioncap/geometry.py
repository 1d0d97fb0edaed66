"""Binary masks, boxes, run-length encoding, and IoU computations.

Conventions, fixed across the package:

* Masks are 2D uint8 arrays of 0/1 values, row-major.
* Boxes are half-open pixel rectangles ``[x_min, x_max) x [y_min, y_max)``,
  so a box's area is ``(x_max - x_min) * (y_max - y_min)`` and agrees exactly
  with pixel enumeration.
* RLE is row-major with alternating run values 0,1,0,1,... and a mandatory
  leading zero-run (which may have count 0). This is the single canonical
  form: encode/decode round-trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class MalformedEncodingError(ValueError):
    """Run-length counts do not describe a mask of the declared size."""


class EmptyRegionError(ValueError):
    """An operation that needs at least one set pixel got an empty mask."""


class UndefinedIoUError(ValueError):
    """IoU of two zero-area regions is 0/0."""


@dataclass(frozen=True)
class BinaryMask:
    """A height x width grid of {0,1} pixels."""

    pixels: Array

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"mask must be 2D and non-empty, got shape {px.shape}")
        if not np.isin(px, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def area(self) -> int:
        return int(self.pixels.sum())

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @classmethod
    def ones(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=np.uint8))

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class Box:
    """Half-open pixel rectangle [x_min, x_max) x [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"inverted box: {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def is_degenerate(self) -> bool:
        return self.area == 0


@dataclass(frozen=True)
class RunLengthEncoding:
    """Row-major alternating run counts, first run counting zeros."""

    height: int
    width: int
    counts: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise MalformedEncodingError(f"bad canvas {self.height}x{self.width}")
        if any(c < 0 for c in self.counts):
            raise MalformedEncodingError("negative run count")
        if any(c == 0 for c in self.counts[1:]):
            raise MalformedEncodingError("interior zero count (only the leading run may be 0)")
        total = sum(self.counts)
        if total != self.height * self.width:
            raise MalformedEncodingError(
                f"counts sum to {total}, expected {self.height * self.width}"
            )

    def to_json(self) -> dict:
        return {"h": self.height, "w": self.width, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RunLengthEncoding":
        return cls(height=int(obj["h"]), width=int(obj["w"]), counts=obj["counts"])


def encode_rle(mask: BinaryMask) -> RunLengthEncoding:
    """Encode a mask as alternating row-major run counts (zeros first)."""
    flat = np.concatenate(([-1], mask.pixels.ravel(order="C"), [-1]))
    borders = np.nonzero(np.diff(flat))[0]
    counts = np.diff(borders)
    if flat[1] == 1:  # leading-zero convention: prepend an explicit 0-run
        counts = np.concatenate(([0], counts))
    return RunLengthEncoding(mask.height, mask.width, tuple(int(c) for c in counts))


def decode_rle(rle: RunLengthEncoding) -> BinaryMask:
    """Exact inverse of :func:`encode_rle`."""
    rle.validate()
    flat = np.zeros(rle.height * rle.width, dtype=np.uint8)
    pos = 0
    value = 0
    for count in rle.counts:
        if value:
            flat[pos : pos + count] = 1
        pos += count
        value = 1 - value
    return BinaryMask(flat.reshape(rle.height, rle.width))


def mask_to_bbox(mask: BinaryMask) -> Box:
    """Tightest half-open box containing every set pixel."""
    ys, xs = np.nonzero(mask.pixels)
    if ys.size == 0:
        raise EmptyRegionError("cannot take the bounding box of an empty mask")
    return Box(
        x_min=int(xs.min()),
        y_min=int(ys.min()),
        x_max=int(xs.max()) + 1,
        y_max=int(ys.max()) + 1,
    )


def iou_boxes(a: Box, b: Box) -> float:
    """Intersection-over-union of two half-open boxes."""
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    if union == 0:
        raise UndefinedIoUError("both boxes have zero area")
    return inter / union


def rasterize_box(box: Box, height: int, width: int) -> BinaryMask:
    """Fill a box's interior on an height x width canvas (clipped to it)."""
    px = np.zeros((height, width), dtype=np.uint8)
    x0, x1 = max(0, box.x_min), min(width, box.x_max)
    y0, y1 = max(0, box.y_min), min(height, box.y_max)
    if x1 > x0 and y1 > y0:
        px[y0:y1, x0:x1] = 1
    return BinaryMask(px)


def iou_mask_box(mask: BinaryMask, box: Box) -> float:
    """IoU between a mask and a box rasterized on the mask's canvas."""
    if mask.area == 0:
        raise EmptyRegionError("cannot compute IoU for an empty mask")
    box_px = rasterize_box(box, mask.height, mask.width).pixels
    inter = int(np.logical_and(mask.pixels, box_px).sum())
    union = int(np.logical_or(mask.pixels, box_px).sum())
    if union == 0:
        raise UndefinedIoUError("mask and box have zero union")
    return inter / union


def mask_area_ratio(mask: BinaryMask) -> float:
    """Fraction of set pixels."""
    return mask.area / (mask.height * mask.width)


def resize_mask(mask: BinaryMask, out_h: int, out_w: int) -> BinaryMask:
    """Nearest-neighbor resample (preserves the 0/1 alphabet).

    Source index for output index ``i`` is ``floor(i * src / out)``, computed
    in exact integer arithmetic.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    rows = (np.arange(out_h) * mask.height) // out_h
    cols = (np.arange(out_w) * mask.width) // out_w
    return BinaryMask(mask.pixels[np.ix_(rows, cols)])

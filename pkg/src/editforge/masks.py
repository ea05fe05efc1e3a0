"""Raster-mask algebra and the per-task pipeline dispatcher.

Mask values live in [0, 1] on a grid matching their paired image. Where a
binary mask is required, binarization is at 0.5 everywhere. Generative
backends behind the pipelines are remote clients; this module owns only
the deterministic geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tasks
from .errors import ContractError, ShapeError

BINARIZE_THRESHOLD = 0.5


@dataclass
class RasterMask:
    """Single-channel [0, 1] grid."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got {self.values.shape}")
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def binary(self) -> np.ndarray:
        return (self.values >= BINARIZE_THRESHOLD).astype(np.float64)


@dataclass(frozen=True)
class BBox:
    """Integer pixel box, half-open is not used: x0 < x1 inclusive-exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, width: int, height: int) -> "BBox":
        if not (0 <= self.x0 < self.x1 <= width):
            raise ContractError(f"bbox x range {self.x0}..{self.x1} outside 0..{width}")
        if not (0 <= self.y0 < self.y1 <= height):
            raise ContractError(f"bbox y range {self.y0}..{self.y1} outside 0..{height}")
        return self


# Task -> pipeline family. The grouping mirrors how the generation recipes
# share machinery: inpaint-and-merge (1), attention-difference masking (2),
# non-rigid re-posing (3), geometric crop/paste and view sourcing (4),
# instruction rewriting (5), layout swapping (6), subject insertion (7),
# material fusion (8), condition-image construction (9). Configuration,
# not ground truth; three anchors (remove->1, action change->3,
# relation change->6) are fixed, the rest is reconstruction.
DISPATCH_TABLE: dict[str, int] = {
    "remove": 1, "replace": 1, "add": 1, "counting": 1,
    "background change": 1, "tone transfer": 1, "style change": 1,
    "textual change": 1,
    "color alter": 2, "appearance alter": 2,
    "action change": 3,
    "movement": 4, "resize": 4, "outpaint": 4, "rotation": 4,
    "implicit change": 5,
    "relation change": 6,
    "image reference": 7,
    "material transfer": 8, "material change": 8,
    "visual sketch": 9, "visual scribble": 9, "visual segmentation": 9,
    "visual depth": 9, "visual layout": 9,
}


def dispatch(edit_type: str) -> int:
    """Pure table lookup from task to pipeline family (1..9)."""
    tasks.validate_task(edit_type)
    return DISPATCH_TABLE[edit_type]


def dilate(mask: RasterMask, radius: int) -> RasterMask:
    """Binary dilation with a square element of side 2*radius + 1.

    The input is binarized at 0.5 first; the output is binary.
    """
    if radius < 0:
        raise ContractError(f"radius must be >= 0, got {radius}")
    b = mask.binary()
    if radius == 0:
        return RasterMask(b)
    h, w = b.shape
    padded = np.zeros((h + 2 * radius, w + 2 * radius))
    padded[radius:radius + h, radius:radius + w] = b
    out = np.zeros_like(b)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            np.maximum(out, padded[dy:dy + h, dx:dx + w], out=out)
    return RasterMask(out)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def feather(mask: RasterMask, sigma: float) -> RasterMask:
    """Gaussian smoothing, kernel truncated at 3 sigma.

    Normalized convolution: each output pixel divides by the in-bounds
    kernel mass, so a constant mask stays constant out to the borders.
    """
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return RasterMask(mask.values.copy())
    k = _gaussian_kernel(sigma)

    def conv_rows(a: np.ndarray) -> np.ndarray:
        r = (len(k) - 1) // 2
        padded = np.zeros((a.shape[0], a.shape[1] + 2 * r))
        padded[:, r:r + a.shape[1]] = a
        out = np.zeros_like(a)
        for i, kv in enumerate(k):
            out += kv * padded[:, i:i + a.shape[1]]
        return out

    num = conv_rows(conv_rows(mask.values.T).T)
    den = conv_rows(conv_rows(np.ones_like(mask.values).T).T)
    return RasterMask(num / den)


def merge(original: np.ndarray, edited: np.ndarray, mask: RasterMask) -> np.ndarray:
    """Composite: mask * edited + (1 - mask) * original, per channel."""
    if original.shape != edited.shape:
        raise ShapeError(f"image shapes differ: {original.shape} vs {edited.shape}")
    if original.shape[:2] != mask.values.shape:
        raise ShapeError(
            f"mask {mask.values.shape} does not match image {original.shape[:2]}")
    m = mask.values[..., None] if original.ndim == 3 else mask.values
    return m * edited + (1.0 - m) * original


def background_mask(foreground_masks: list[RasterMask]) -> RasterMask:
    """Complement of the union of the foreground masks."""
    if not foreground_masks:
        raise ContractError("background_mask needs at least one foreground mask")
    shape = foreground_masks[0].values.shape
    for m in foreground_masks[1:]:
        if m.values.shape != shape:
            raise ShapeError("foreground masks must share geometry")
    union = foreground_masks[0].values.copy()
    for m in foreground_masks[1:]:
        np.maximum(union, m.values, out=union)
    return RasterMask(1.0 - union)


def normalized_attention_difference(a_in: np.ndarray, a_out: np.ndarray
                                    ) -> tuple[RasterMask, bool]:
    """Mask of where two attention-map stacks disagree.

    |mean(out) - mean(in)| is min-max normalized to [0, 1] and binarized;
    a constant difference yields an all-zero mask with the flag set.
    """
    a_in = np.asarray(a_in, dtype=np.float64)
    a_out = np.asarray(a_out, dtype=np.float64)
    if a_in.shape != a_out.shape:
        raise ShapeError(f"stack shapes differ: {a_in.shape} vs {a_out.shape}")
    if a_in.ndim == 2:
        a_in = a_in[None]
        a_out = a_out[None]
    if a_in.ndim != 3:
        raise ShapeError(f"expected (n, h, w) stacks, got {a_in.shape}")
    diff = np.abs(a_out.mean(axis=0) - a_in.mean(axis=0))
    lo, hi = diff.min(), diff.max()
    if hi - lo < 1e-15:
        return RasterMask(np.zeros_like(diff)), True
    norm = (diff - lo) / (hi - lo)
    return RasterMask((norm >= BINARIZE_THRESHOLD).astype(np.float64)), False


def crop_paste(image: np.ndarray, bbox: BBox, background: np.ndarray,
               offset: tuple[int, int] | None = None,
               scale: float | None = None) -> np.ndarray:
    """Copy a box out of ``image`` onto ``background`` at a new place/size.

    Exactly one of ``offset`` (dx, dy) or ``scale`` must be given; scaling
    is nearest-neighbor about the box's top-left corner. Placements
    leaving the canvas are contract errors reporting the clipped extent.
    """
    if image.shape != background.shape:
        raise ShapeError(f"image {image.shape} vs background {background.shape}")
    h, w = image.shape[:2]
    bbox.validate(w, h)
    if (offset is None) == (scale is None):
        raise ContractError("give exactly one of offset or scale")

    region = image[bbox.y0:bbox.y1, bbox.x0:bbox.x1]
    if scale is not None:
        if scale <= 0:
            raise ContractError(f"scale must be > 0, got {scale}")
        new_h = max(1, int(round(region.shape[0] * scale)))
        new_w = max(1, int(round(region.shape[1] * scale)))
        ys = np.minimum((np.arange(new_h) / scale).astype(int), region.shape[0] - 1)
        xs = np.minimum((np.arange(new_w) / scale).astype(int), region.shape[1] - 1)
        region = region[np.ix_(ys, xs)]
        x0, y0 = bbox.x0, bbox.y0
    else:
        dx, dy = offset
        x0, y0 = bbox.x0 + dx, bbox.y0 + dy
    x1, y1 = x0 + region.shape[1], y0 + region.shape[0]
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        cx0, cy0 = max(x0, 0), max(y0, 0)
        cx1, cy1 = min(x1, w), min(y1, h)
        raise ContractError(
            f"placement ({x0},{y0})..({x1},{y1}) leaves the {w}x{h} canvas; "
            f"clipped extent would be ({cx0},{cy0})..({cx1},{cy1})")
    out = background.copy()
    out[y0:y1, x0:x1] = region
    return out


def outpaint_mask(bbox: BBox, canvas: tuple[int, int]) -> RasterMask:
    """Ones outside the box, zeros inside; canvas is (width, height)."""
    width, height = canvas
    bbox.validate(width, height)
    values = np.ones((height, width))
    values[bbox.y0:bbox.y1, bbox.x0:bbox.x1] = 0.0
    return RasterMask(values)

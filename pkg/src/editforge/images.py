"""PNG interchange for float images and single-channel masks.

Images are (h, w, 3) float64 arrays in [0, 1]; masks are (h, w). Optional
text metadata rides in PNG tEXt chunks (the deterministic stubs use it).
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .errors import ShapeError


def _png_info(meta: dict[str, str] | None) -> PngInfo | None:
    if not meta:
        return None
    info = PngInfo()
    for k in sorted(meta):
        info.add_text(k, meta[k])
    return info


def save_image(path, arr: np.ndarray, meta: dict[str, str] | None = None) -> None:
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (h, w, 3) image, got {arr.shape}")
    u8 = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(u8, "RGB").save(path, format="PNG", pnginfo=_png_info(meta))


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def image_meta(path) -> dict[str, str]:
    with Image.open(path) as im:
        return {k: v for k, v in im.info.items() if isinstance(v, str)}


def encode_png(arr: np.ndarray, meta: dict[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    u8 = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(u8, "RGB").save(buf, format="PNG", pnginfo=_png_info(meta))
    return buf.getvalue()


def decode_png(blob: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(blob)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def png_meta(blob: bytes) -> dict[str, str]:
    with Image.open(io.BytesIO(blob)) as im:
        return {k: v for k, v in im.info.items() if isinstance(v, str)}


def resize_image(arr: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to a square side; identity when already there."""
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    u8 = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    small = Image.fromarray(u8, "RGB").resize((size, size), Image.BILINEAR)
    return np.asarray(small, dtype=np.float64) / 255.0


def save_mask(path, values: np.ndarray) -> None:
    if values.ndim != 2:
        raise ShapeError(f"expected (h, w) mask, got {values.shape}")
    u8 = (np.clip(values, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(u8, "L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0

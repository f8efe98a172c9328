"""PNG reading and writing with a fixed float mapping.

Images travel through the engine as channel-last float32 batches in
[0, 1].  8-bit files map x/255, 16-bit files x/65535; writing quantizes
with round-half-to-even via ``np.rint`` after clipping, so a read/write
round-trip of any 8-bit file reproduces it byte-for-byte.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import ShapeError
from .tensor import Tensor


def read_image(path) -> Tensor:
    """Load a PNG (or any PIL-readable image) as a (1, H, W, 3) float32 Tensor.

    8-bit images (greyscale, RGB, or RGBA over a discarded alpha) are
    scaled by 1/255; 16-bit greyscale by 1/65535 and replicated to three
    channels.  Unreadable files raise the underlying ``OSError``.
    """
    with Image.open(path) as img:
        if img.mode in ("I", "I;16", "I;16B", "I;16L"):
            arr = np.asarray(img, dtype=np.float64)
            arr = (arr / 65535.0).astype(np.float32)
            arr = np.repeat(arr[..., None], 3, axis=-1)
        else:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return Tensor(arr[None, ...])


def to_uint8(image) -> np.ndarray:
    """Quantize a float image in [0, 1] to uint8, clipping out-of-range values."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError(f"expected a single image, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[-1] not in (1, 3):
        raise ShapeError(f"expected (H, W, 1|3) image data, got {arr.shape}")
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image) -> None:
    """Write a float image in [0, 1] as an 8-bit PNG."""
    arr = to_uint8(image)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")

"""Binary portable-pixmap (P6) image I/O and grid assembly.

PPM needs no codec dependency and round-trips within 1/255 quantization,
which is all the sample grids require. Readers are strict: unknown magic,
non-255 maxval, or short pixel payloads are format errors.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError


def write_image(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) or (H, W, 1)/(H, W) image in [0, 1] as binary PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"expected (H, W, 1|3) image, got shape {np.asarray(image).shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w, _ = img.shape
    bytes_ = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(bytes_.tobytes())


def read_image(path) -> np.ndarray:
    """Read a binary PPM written by ``write_image`` (or any maxval-255 P6)."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (missing P6 magic)")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comment lines allowed, followed by a single whitespace byte
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        fields.append(blob[start:pos])
    pos += 1  # exactly one whitespace byte separates header from pixels
    try:
        w, h, maxval = (int(x) for x in fields)
    except ValueError as e:
        raise FormatError(f"{path}: malformed PPM header fields {fields}") from e
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    payload = blob[pos : pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


def tile_grid(images: np.ndarray, pad: int = 1) -> np.ndarray:
    """Tile a batch (B, H, W, C) into one roughly square grid image."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"expected (B, H, W, C), got {images.shape}")
    b, h, w, c = images.shape
    cols = int(np.ceil(np.sqrt(b)))
    rows = int(np.ceil(b / cols))
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, c), 0.5)
    for i in range(b):
        r, cc = divmod(i, cols)
        y = pad + r * (h + pad)
        x = pad + cc * (w + pad)
        grid[y : y + h, x : x + w] = images[i]
    return grid

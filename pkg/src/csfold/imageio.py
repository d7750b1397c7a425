"""Grayscale image I/O (8-bit PGM and PNG) and block-grid padding."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ImageIOError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise ImageIOError(f"{path}: not a binary PGM (P5) file")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3 and pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise ImageIOError(f"{path}: truncated PGM header")
            continue
        if ch.isspace():
            pos += 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if len(tokens) < 3 or pos >= len(data):
        raise ImageIOError(f"{path}: truncated PGM header")
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageIOError(f"{path}: malformed PGM header") from None
    if maxval <= 0 or maxval > 255:
        raise ImageIOError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    try:
        pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    except ValueError:
        raise ImageIOError(f"{path}: PGM pixel data truncated") from None
    return pixels.reshape(height, width).astype(np.float64) / maxval


def _read_with_pillow(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode == "P":
                img = img.convert("RGB")
            if img.mode == "LA":
                img = img.convert("L")
            if img.mode == "RGBA":
                img = img.convert("RGB")
            if img.mode == "L":
                return np.asarray(img, dtype=np.float64) / 255.0
            if img.mode == "RGB":
                rgb = np.asarray(img, dtype=np.float64)
                return (
                    LUMA_WEIGHTS[0] * rgb[..., 0]
                    + LUMA_WEIGHTS[1] * rgb[..., 1]
                    + LUMA_WEIGHTS[2] * rgb[..., 2]
                ) / 255.0
            raise ImageIOError(f"{path}: unsupported image mode {img.mode}")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageIOError(f"{path}: cannot read image ({exc})") from exc


def load_image(path) -> Tensor:
    """Read an 8-bit grayscale PGM or a PNG (grayscale or RGB via luminance)
    into a [1,H,W] tensor scaled to [0,1]."""
    p = Path(path)
    if not p.is_file():
        raise ImageIOError(f"{p}: no such file")
    arr = _read_pgm(p) if p.suffix.lower() == ".pgm" else _read_with_pillow(p)
    return Tensor(arr[None])


def save_image(path, image) -> None:
    """Write a [0,1] image to PGM or PNG (by extension), rounding to 8 bits."""
    p = Path(path)
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ImageIOError(f"{p}: can only save 2-d grayscale images, got shape {arr.shape}")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    try:
        if p.suffix.lower() == ".pgm":
            header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode()
            p.write_bytes(header + pixels.tobytes())
        elif p.suffix.lower() == ".png":
            Image.fromarray(pixels, mode="L").save(p)
        else:
            raise ImageIOError(f"{p}: unsupported output format (use .pgm or .png)")
    except OSError as exc:
        raise ImageIOError(f"{p}: cannot write image ({exc})") from exc


def pad_to_block(image: Tensor, block_size: int) -> tuple[Tensor, tuple[int, int]]:
    """Mirror-pad right/bottom to the next block multiple; returns the padded
    image and the original extents for the inverse crop."""
    if block_size < 1:
        raise ConfigurationError(f"block_size must be positive, got {block_size}")
    h, w = image.shape[-2], image.shape[-1]
    pad_h = (-h) % block_size
    pad_w = (-w) % block_size
    if pad_h == 0 and pad_w == 0:
        return image, (h, w)
    spec = [(0, 0)] * (image.ndim - 2) + [(0, pad_h), (0, pad_w)]
    # reflect (edge excluded) needs pad < extent; tiny images fall back to symmetric
    mode = "reflect" if pad_h < h and pad_w < w else "symmetric"
    return Tensor(np.pad(image.data, spec, mode=mode)), (h, w)


def crop_to_extents(image: Tensor, extents: tuple[int, int]) -> Tensor:
    """Undo ``pad_to_block``."""
    h, w = extents
    return Tensor(image.data[..., :h, :w])

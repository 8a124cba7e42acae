# src/images.py
from __future__ import annotations

import base64
import hashlib
import io
import os
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.errors import DecodeError, MissingFile, WriteError

ImageLike = Union[np.ndarray, Image.Image, str, Path]


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG/JPEG file as an H×W×3 uint8 RGB array."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc


def image_size(path: str | Path) -> tuple[int, int]:
    """(height, width) read from the file header only."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    try:
        with Image.open(path) as img:
            width, height = img.size
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return height, width


def as_array(image: ImageLike) -> np.ndarray:
    if isinstance(image, (str, Path)):
        return load_image(image)
    if isinstance(image, Image.Image):
        return np.asarray(image)
    if isinstance(image, np.ndarray):
        return image
    raise DecodeError(f"unsupported image type {type(image).__name__}")


def to_png_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == bool:
        img = Image.fromarray(array.astype(np.uint8) * 255).convert("1")
    else:
        if array.dtype != np.uint8:
            raise DecodeError(f"cannot encode {array.dtype} image as PNG")
        img = Image.fromarray(array)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def from_png_bytes(data: bytes, mode: str | None = "RGB") -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            if mode is not None:
                img = img.convert(mode)
            return np.asarray(img).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode PNG payload: {exc}") from exc


def encode_b64(array: np.ndarray) -> str:
    return base64.b64encode(to_png_bytes(array)).decode("ascii")


def decode_b64(text: str, mode: str | None = "RGB") -> np.ndarray:
    try:
        raw = base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as exc:
        raise DecodeError(f"invalid base64 image payload: {exc}") from exc
    return from_png_bytes(raw, mode)


def image_digest(array: np.ndarray) -> str:
    """sha256 over shape + pixels, independent of the container format."""
    array = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(repr((array.shape, str(array.dtype))).encode("ascii"))
    h.update(array.tobytes())
    return h.hexdigest()


def save_png(array: np.ndarray, path: str | Path) -> Path:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(to_png_bytes(array))
        os.replace(tmp, path)
    except OSError as exc:
        raise WriteError(f"could not write {path}: {exc}") from exc
    return path

"""
File I/O
Binary encoding shared by the weight, store and checkpoint formats, image
reading/writing, CSV list loading, and atomic writes.
"""

import io
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

from sketchforge.errors import FormatError, MagicMismatchError, TruncatedFileError, VersionMismatchError

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def atomic_write(path: PathLike, payload: bytes) -> None:
    """Write bytes to `path` through a temp file + rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


# ============ BINARY ENCODING ============

class BinaryWriter:
    """Little-endian writer for the sketchforge binary formats."""

    def __init__(self):
        self._buffer = io.BytesIO()

    def magic(self, tag: bytes) -> None:
        self._buffer.write(tag)

    def u32(self, value: int) -> None:
        self._buffer.write(struct.pack("<I", int(value)))

    def string(self, text: str) -> None:
        data = text.encode("utf-8")
        self.u32(len(data))
        self._buffer.write(data)

    def f32_array(self, array: np.ndarray) -> None:
        self._buffer.write(np.ascontiguousarray(array, dtype="<f4").tobytes())

    def raw(self, data: bytes) -> None:
        self.u32(len(data))
        self._buffer.write(data)

    def named_array(self, name: str, array: np.ndarray) -> None:
        self.string(name)
        self.u32(array.ndim)
        for extent in array.shape:
            self.u32(extent)
        self.f32_array(array)

    def getvalue(self) -> bytes:
        return self._buffer.getvalue()


class BinaryReader:
    """Counterpart of BinaryWriter; every short read raises TruncatedFileError."""

    def __init__(self, data: bytes, kind: str):
        self._data = data
        self._pos = 0
        self.kind = kind

    def _take(self, count: int) -> bytes:
        end = self._pos + count
        if end > len(self._data):
            raise TruncatedFileError(
                f"{self.kind} file is truncated: needed {count} bytes at offset {self._pos}, "
                f"only {len(self._data) - self._pos} left"
            )
        chunk = self._data[self._pos:end]
        self._pos = end
        return chunk

    def expect_magic(self, tag: bytes) -> None:
        found = self._data[self._pos:self._pos + len(tag)]
        if found != tag:
            raise MagicMismatchError(f"not a {self.kind} file: magic {found!r}, expected {tag!r}")
        self._pos += len(tag)

    def peek_magic(self, tag: bytes) -> bool:
        return self._data[self._pos:self._pos + len(tag)] == tag

    def expect_version(self, expected: int) -> int:
        found = self.u32()
        if found != expected:
            raise VersionMismatchError(self.kind, found, expected)
        return found

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def string(self) -> str:
        return self._take(self.u32()).decode("utf-8")

    def f32_array(self, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        data = self._take(4 * count)
        return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)

    def raw(self) -> bytes:
        return self._take(self.u32())

    def named_array(self) -> Tuple[str, np.ndarray]:
        name = self.string()
        ndim = self.u32()
        shape = tuple(self.u32() for _ in range(ndim))
        return name, self.f32_array(shape)

    @property
    def at_end(self) -> bool:
        return self._pos >= len(self._data)


def read_bytes(path: PathLike, kind: str) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{kind} file not found: {path}")
    return path.read_bytes()


# ============ IMAGES ============

def read_image(path: PathLike, channels: Optional[int] = None) -> np.ndarray:
    """
    Load an 8-bit image (PGM/PPM or anything Pillow reads) as C x H x W floats in [0, 1].

    Args:
        path: Image file
        channels: Force 1 (grayscale) or 3 (RGB); None keeps the file's own layout
    """
    with Image.open(path) as img:
        if channels == 1 or (channels is None and img.mode in ("L", "I", "I;16", "1")):
            img = img.convert("L")
        else:
            img = img.convert("RGB")
        array = np.asarray(img, dtype=np.float32) / 255.0
    if array.ndim == 2:
        return array[None]
    return np.ascontiguousarray(array.transpose(2, 0, 1))


def encode_image(image: np.ndarray) -> bytes:
    """Encode a C x H x W (or H x W) image in [0, 1] as binary PGM (1 channel) or PPM (3 channels)."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if pixels.ndim == 2:
        img, fmt = Image.fromarray(pixels, mode="L"), "PPM"
    elif pixels.ndim == 3 and pixels.shape[0] == 3:
        img, fmt = Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)), mode="RGB"), "PPM"
    else:
        raise FormatError(f"cannot encode image of shape {image.shape}")
    buffer = io.BytesIO()
    img.save(buffer, format=fmt)
    return buffer.getvalue()


def write_image(path: PathLike, image: np.ndarray) -> None:
    atomic_write(path, encode_image(image))


def decode_image(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        img.load()
        return read_image_from_pil(img)


def read_image_from_pil(img: Image.Image) -> np.ndarray:
    array = np.asarray(img.convert("L") if img.mode != "RGB" else img, dtype=np.float32) / 255.0
    return array[None] if array.ndim == 2 else np.ascontiguousarray(array.transpose(2, 0, 1))


def image_extension(image: np.ndarray) -> str:
    return ".ppm" if np.asarray(image).ndim == 3 and np.asarray(image).shape[0] == 3 else ".pgm"


# ============ CSV LISTS ============

def load_and_validate_list(file, required_columns: set) -> Tuple[Optional[pd.DataFrame], Optional[str]]:
    """
    Load a CSV list file and validate its columns.

    Args:
        file: Path or file object
        required_columns: Column names that must be present (after normalization)

    Returns:
        Tuple of (DataFrame, error_message). If successful, error_message is None.
    """
    try:
        df = pd.read_csv(file, dtype=str, keep_default_na=False)
        df.columns = df.columns.str.strip().str.lower().str.replace(' ', '_')

        missing_cols = required_columns - set(df.columns)
        if missing_cols:
            return None, f"Missing required columns: {', '.join(sorted(missing_cols))}"

        for column in required_columns:
            df[column] = df[column].str.strip()
            empty = (df[column] == '').sum()
            if empty:
                return None, f"Found {empty} rows with an empty '{column}'"

        return df, None

    except Exception as e:
        return None, f"Error reading file: {str(e)}"


def write_csv(path: PathLike, df: pd.DataFrame) -> None:
    atomic_write(path, df.to_csv(index=False).encode("utf-8"))

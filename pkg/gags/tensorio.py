"""
File formats shared by every stage: TensorFile, 16-bit PGM, PNG images
and content hashes for run manifests.
"""

import hashlib
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .errors import FormatError, MissingInputError

TENSOR_MAGIC = b"GAGSTNSR"
MAX_RANK = 4

# dtype code -> numpy little-endian dtype
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<u4")}

PathLike = Union[str, Path]


def write_tensor(path: PathLike, array: np.ndarray) -> None:
    """
    Write an array as a TensorFile.

    Floating arrays are stored as f32, integer/bool arrays as u32.
    """
    array = np.asarray(array)
    if array.ndim > MAX_RANK:
        raise FormatError(f"TensorFile rank is limited to {MAX_RANK}, got {array.ndim}")
    if array.dtype.kind == "f":
        code = 0
    elif array.dtype.kind in "uib":
        if array.dtype.kind == "i" and array.size and array.min() < 0:
            raise FormatError("negative values cannot be stored as u32")
        code = 1
    else:
        raise FormatError(f"unsupported dtype {array.dtype}")
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<BB", code, array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(payload.tobytes(order="C"))


def read_tensor(path: PathLike) -> np.ndarray:
    """
    Read a TensorFile.

    Raises:
        MissingInputError: file does not exist
        FormatError: bad magic, dtype code, rank or payload length
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"tensor file not found: {path}")
    data = path.read_bytes()
    if len(data) < 10 or data[:8] != TENSOR_MAGIC:
        raise FormatError(f"{path}: not a TensorFile (bad magic)")
    code, rank = struct.unpack_from("<BB", data, 8)
    if code not in DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if rank > MAX_RANK:
        raise FormatError(f"{path}: rank {rank} exceeds {MAX_RANK}")
    offset = 10 + 4 * rank
    shape = struct.unpack_from(f"<{rank}I", data, 10)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise FormatError(f"{path}: payload is {len(data) - offset} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape).copy()


# single-channel modes Pillow reports for 8- and 16-bit label images
LABEL_MODES = ("L", "I", "I;16", "I;16B")


def write_pgm16(path: PathLike, image: np.ndarray) -> None:
    """Write a 2D array of values in [0, 65535] as a binary 16-bit PGM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError("PGM images must be 2D")
    if image.size and (image.min() < 0 or image.max() > 65535):
        raise FormatError("PGM values must lie in [0, 65535]")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # int32 arrays become mode "I", which Pillow stores as P5 with maxval 65535
    Image.fromarray(image.astype(np.int32)).save(path, format="PPM")


def _read_single_channel(path: PathLike, image_format: Optional[str] = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            if image_format is not None and img.format != image_format:
                raise FormatError(f"{path}: expected {image_format}, got {img.format}")
            if img.mode not in LABEL_MODES:
                raise FormatError(f"{path}: expected a single-channel image, got mode {img.mode}")
            return np.asarray(img).astype(np.uint32)
    except (OSError, SyntaxError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from e


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a PGM with 8- or 16-bit samples."""
    return _read_single_channel(path, "PPM")


def read_label_image(path: PathLike) -> np.ndarray:
    """Read a region-id image stored as PGM or single-channel PNG."""
    return _read_single_channel(path)


def save_png(path: PathLike, image: np.ndarray) -> None:
    """Save an HxW or HxWx3 array in [0, 1] as an 8-bit PNG."""
    image = np.clip(np.nan_to_num(np.asarray(image, dtype=np.float64)), 0.0, 1.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((image * 255.0 + 0.5).astype(np.uint8)).save(path)


def heat_colors(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to a blue-to-red ramp (HxWx3)."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    cold = np.array([0.05, 0.1, 0.6])
    hot = np.array([1.0, 0.85, 0.1])
    mid = np.array([0.9, 0.1, 0.1])
    lower = cold + (mid - cold) * np.clip(v * 2.0, 0.0, 1.0)
    return np.where(v < 0.5, lower, mid + (hot - mid) * np.clip(v * 2.0 - 1.0, 0.0, 1.0))


def file_sha256(path: PathLike) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            sha.update(chunk)
    return sha.hexdigest()

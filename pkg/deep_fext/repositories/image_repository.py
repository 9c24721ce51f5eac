"""Raster decoding and encoding on the local filesystem."""
import io
import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from deep_fext.config import settings
from deep_fext.models.exceptions import FextError, ErrorTypes
from deep_fext.utils.workers import atomic_write_bytes

logger = logging.getLogger(__name__)

_CONVERSION_HINT = "convert it to PNG or PPM first (README, 'Dataset conversion')"
_SIXTEEN_BIT_MODES = {"I;16", "I;16B", "I;16L", "I"}
_WRITE_FORMATS = {".png": "PNG", ".ppm": "PPM", ".pgm": "PPM", ".pbm": "PPM"}


def decode_image(path: Path) -> np.ndarray:
    """
    Decode a raster into a (C,H,W) float32 array in [0,1].

    8-bit samples map by x/255, 16-bit samples by x/65535. Grayscale, bilevel
    and palette images become one channel; colour images three.

    Raises:
        FextError: missing file (data) or a format outside settings.IMAGE_FORMATS (unsupported).
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            fmt = img.format or "unknown"
            if fmt not in settings.IMAGE_FORMATS:
                raise FextError(f"{path}: {fmt} rasters are not decoded natively; {_CONVERSION_HINT}",
                                ErrorTypes.UNSUPPORTED)
            if img.mode in _SIXTEEN_BIT_MODES:
                planes = np.asarray(img, dtype=np.float32)[None] / np.float32(65535)
            elif img.mode in ("RGB", "RGBA", "CMYK", "YCbCr", "RGBX"):
                planes = np.asarray(img.convert("RGB")).transpose(2, 0, 1).astype(np.float32) / np.float32(255)
            else:
                planes = np.asarray(img.convert("L")).astype(np.float32)[None] / np.float32(255)
    except FileNotFoundError as err:
        raise FextError(f"image not found: {path}", ErrorTypes.DATA) from err
    except UnidentifiedImageError as err:
        raise FextError(f"{path}: unrecognised raster format; {_CONVERSION_HINT}", ErrorTypes.UNSUPPORTED) from err
    return np.ascontiguousarray(planes)


def decode_mask(path: Path) -> np.ndarray:
    """Binary (H,W) uint8 map: first channel above one half."""
    return (decode_image(path)[0] > 0.5).astype(np.uint8)


def quantize(values: np.ndarray, bits: int = 8) -> np.ndarray:
    """p -> round(p * (2^bits - 1)) as unsigned integers."""
    if bits not in (8, 16):
        raise FextError(f"bit depth must be 8 or 16, got {bits}", ErrorTypes.CONFIGURATION)
    scale = (1 << bits) - 1
    dtype = np.uint8 if bits == 8 else np.uint16
    return np.rint(np.clip(values, 0.0, 1.0) * scale).astype(dtype)


def encode_image(values: np.ndarray, path: Path, bits: int = 8) -> Path:
    """
    Write a (H,W) or (C,H,W) array in [0,1] as an 8- or 16-bit raster, atomically.

    The format follows the suffix: .png, or .ppm/.pgm/.pbm for portable maps (8-bit).
    """
    path = Path(path)
    fmt = _WRITE_FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise FextError(f"cannot write '{path.suffix}' files; use .png or .ppm/.pgm", ErrorTypes.UNSUPPORTED)
    if fmt == "PPM" and bits != 8:
        raise FextError("portable maps are written with 8-bit samples only", ErrorTypes.UNSUPPORTED)
    samples = quantize(np.asarray(values), bits)
    if samples.ndim == 3:
        if samples.shape[0] == 1:
            samples = samples[0]
        else:
            samples = samples.transpose(1, 2, 0)
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(samples)).save(buffer, format=fmt)
    atomic_write_bytes(path, buffer.getvalue())
    logger.debug("wrote %s (%d-bit)", path, bits)
    return path


def encode_mask(mask: np.ndarray, path: Path) -> Path:
    """Write a binary map as a single-channel {0,255} image."""
    return encode_image((np.asarray(mask) > 0).astype(np.float32), path, bits=8)

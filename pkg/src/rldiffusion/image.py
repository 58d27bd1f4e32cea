"""Grayscale image grids: netpbm IO, boundary access, metrics, dihedral augmentation.

An image grid is a 2-D float64 numpy array of intensities. Denoising states
live in [0, 1]: 8-bit files are divided by 255 on load, so PSNR uses peak 1,
which gives the same number as the usual peak-255 convention on 8-bit data.
"""
import math
import os

import numpy as np

N_TRANSFORMS = 8


class NetpbmError(OSError):
    """Malformed, truncated, or unsupported netpbm file."""


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _read_header(buf, magic, path):
    """Return (width, height, maxval, payload offset) of a binary netpbm file."""
    if not buf.startswith(magic):
        raise NetpbmError(f"{path}: bad magic number {buf[:2]!r}, expected {magic!r}")
    fields = []
    pos = len(magic)
    while len(fields) < 3:
        # whitespace, then optional comment lines, then a token
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise NetpbmError(f"{path}: unterminated header comment")
            pos = end + 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: malformed header, expected integer at byte {start}")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise NetpbmError(f"{path}: malformed header, missing separator before raster")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise NetpbmError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"{path}: unsupported maxval {maxval} (only 255)")
    return width, height, maxval, pos + 1


def load_image(path):
    """Read a binary PGM (P5, maxval 255) into a float grid in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    width, height, _, offset = _read_header(buf, b"P5", path)
    payload = buf[offset:]
    if len(payload) < width * height:
        raise NetpbmError(
            f"{path}: truncated payload, {len(payload)} of {width * height} bytes")
    data = np.frombuffer(payload, dtype=np.uint8, count=width * height)
    return data.reshape(height, width).astype(np.float64) / 255.0


def quantize(img):
    """Map [0, 1] intensities to bytes with round-half-up, clamped to [0, 255]."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _write_atomic(path, data):
    tmp = f"{path}.part"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_image(img, path):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {img.shape}")
    h, w = img.shape
    _write_atomic(path, b"P5\n%d %d\n255\n" % (w, h) + quantize(img).tobytes())


def load_ppm(path):
    """Read a binary PPM (P6, maxval 255) as an (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    width, height, _, offset = _read_header(buf, b"P6", path)
    payload = buf[offset:]
    if len(payload) < 3 * width * height:
        raise NetpbmError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=np.uint8, count=3 * width * height).reshape(height, width, 3)


def save_ppm(rgb, path):
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) raster, got {rgb.shape}")
    h, w, _ = rgb.shape
    _write_atomic(path, b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def reflect_pixel(img, x, y):
    """Value at (x, y) with replicate padding: out-of-grid coordinates are clamped."""
    h, w = img.shape
    return img[min(max(x, 0), h - 1), min(max(y, 0), w - 1)]


def shift(img, di, dj):
    """Grid whose (x, y) entry is the replicate-padded value at (x + di, y + dj).

    Works on the last two axes, so batches of shape (..., H, W) are fine.
    """
    h, w = img.shape[-2:]
    rows = np.clip(np.arange(h) + di, 0, h - 1)
    cols = np.clip(np.arange(w) + dj, 0, w - 1)
    return img[..., rows[:, None], cols[None, :]]


def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(test, ref):
    """PSNR in dB for images in [0, 1]; returns inf when the images are identical."""
    err = mse(test, ref)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def augment(img, transform):
    """Apply one of the 8 dihedral symmetries.

    ``transform % 4`` counts clockwise quarter turns, values 4..7 add a
    left-right flip after the turn. 0 is the identity and 4 is a plain
    horizontal flip. One clockwise turn sends (x, y) to (y, H - 1 - x).
    """
    if not isinstance(transform, (int, np.integer)) or not 0 <= transform < N_TRANSFORMS:
        raise ValueError(f"transform must be an integer in 0..7, got {transform!r}")
    out = np.rot90(img, k=-(transform % 4), axes=(-2, -1))
    if transform >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def inverse_transform(transform):
    if not 0 <= transform < N_TRANSFORMS:
        raise ValueError(f"transform must be in 0..7, got {transform}")
    if transform >= 4:
        return transform  # reflections are involutions
    return (4 - transform) % 4

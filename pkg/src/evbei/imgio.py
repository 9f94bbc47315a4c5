"""Image input/output: PGM (binary P5, 8- and 16-bit), PNG, colorization.

BEIs are written as 8-bit PGM (0 inactive, 255 active) and PNG; label maps
as 16-bit PGM carrying raw label ids plus a colorized PNG. The orientation
overlay colors active pixels by flow direction on the HSV wheel.
"""

from __future__ import annotations

import colorsys
import math
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "write_pgm",
    "write_pgm16",
    "read_pgm",
    "read_gray",
    "write_png",
    "bei_to_u8",
    "label_color_image",
    "orientation_overlay",
    "read_image_manifest",
]


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5 PGM, maxval 255."""
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def write_pgm16(path, img: np.ndarray) -> None:
    """Binary P5 PGM, maxval 65535, big-endian samples."""
    img = np.asarray(img, dtype=np.uint16)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode())
        fh.write(img.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM (8- or 16-bit)."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    img = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return img.reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8)


def read_gray(path) -> np.ndarray:
    """Read any PIL-supported image as float64 grayscale in [0, 1]."""
    p = Path(path)
    if p.suffix.lower() in (".pgm", ".ppm"):
        img = read_pgm(p)
        maxval = 65535.0 if img.dtype == np.uint16 else 255.0
        return img.astype(np.float64) / maxval
    with Image.open(p) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_png(path, img: np.ndarray) -> None:
    """Write a uint8 grayscale (H, W) or RGB (H, W, 3) PNG."""
    # Low compression: these are small maps written once per render.
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG", compress_level=1)


def bei_to_u8(active: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(active, dtype=bool), 255, 0).astype(np.uint8)


def _hue_rgb(hue: float, sat: float, val: float) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(hue, sat, val)
    return (int(r * 255.0 + 0.5), int(g * 255.0 + 0.5), int(b * 255.0 + 0.5))


def label_color_image(labels: np.ndarray) -> np.ndarray:
    """Distinct colors per label id (golden-angle hue walk), RGB uint8."""
    labels = np.asarray(labels)
    golden = 0.61803398875
    lut = np.zeros((int(labels.max()) + 1, 3), dtype=np.uint8)
    for lbl in np.unique(labels).tolist():
        lut[lbl] = _hue_rgb((lbl * golden) % 1.0, 0.65, 0.95)
    return lut[labels]


_WHEEL_LUT = np.array([_hue_rgb(i / 256.0, 1.0, 1.0) for i in range(256)], dtype=np.uint8)


def orientation_overlay(active: np.ndarray, orientation: np.ndarray) -> np.ndarray:
    """Active pixels colored by flow direction (HSV wheel), black elsewhere.

    Hue is quantized to 256 steps around the wheel.
    """
    active = np.asarray(active, dtype=bool)
    ang = np.where(np.isnan(orientation), 0.0, orientation)
    bins = (np.mod(ang, 2.0 * math.pi) * (256.0 / (2.0 * math.pi))).astype(np.int64) % 256
    rgb = _WHEEL_LUT[bins]
    rgb[~active] = 0
    return rgb


def read_image_manifest(path) -> tuple[np.ndarray, list[str]]:
    """Read a ``t filename`` manifest; returns (times, filenames)."""
    times: list[float] = []
    names: list[str] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}, line {lineno}: expected 't filename'")
        times.append(float(parts[0]))
        names.append(parts[1])
    return np.asarray(times, dtype=np.float64), names

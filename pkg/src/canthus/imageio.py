"""Thermal image container and 16-bit PNG / PGM reading and writing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class ThermalImage:
    data: np.ndarray  # (height, width); uint16 when loaded, float after smoothing
    intensity_map: tuple[float, float] | None = None  # (scale, offset): celsius = scale * I + offset

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValueError(f"thermal image must be a non-empty 2D grid, got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def celsius(self, value):
        if self.intensity_map is None:
            return None
        scale, offset = self.intensity_map
        return scale * np.asarray(value, dtype=float) + offset


def _read_pgm(raw: bytes) -> np.ndarray:
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    pos += 1
    width, height, maxval = tokens
    if not 0 < maxval < 65536:
        raise ValueError(f"invalid PGM maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(height, width)
    if maxval == 255:
        return data.astype(np.uint16) * 257
    if maxval == 65535:
        return data.astype(np.uint16)
    return np.round(data.astype(np.float64) * 65535.0 / maxval).astype(np.uint16)


def read_thermal(path, intensity_map=None) -> ThermalImage:
    """Load a single-channel 16-bit PNG or PGM (P5); 8-bit input is scaled by 257."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P5":
        return ThermalImage(_read_pgm(raw), intensity_map)
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            data = np.array(im).astype(np.int64)
            if data.min() < 0 or data.max() > 65535:
                raise ValueError("integer image values outside the 16-bit range")
            data = data.astype(np.uint16)
        elif im.mode == "L":
            data = np.array(im).astype(np.uint16) * 257
        else:
            raise ValueError(f"expected a single-channel thermal image, got mode {im.mode}")
    return ThermalImage(data, intensity_map)


def write_thermal(image: ThermalImage | np.ndarray, path) -> None:
    """Write 16-bit PNG, or binary PGM when the suffix is ``.pgm``."""
    data = image.data if isinstance(image, ThermalImage) else np.asarray(image)
    data = np.clip(np.round(data), 0, 65535).astype(np.uint16)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        header = f"P5\n{data.shape[1]} {data.shape[0]}\n65535\n".encode("ascii")
        path.write_bytes(header + data.astype(">u2").tobytes())
    else:
        Image.fromarray(data).save(path, format="PNG")

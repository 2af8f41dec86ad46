"""Dependency-free image export: binary PPM (color) and 16-bit PGM.

Color images are written as 8-bit P6 pixmaps.  Depth images use 16-bit
P5 graymaps at a fixed 5000 units-per-meter scale (about 13 m range),
recorded in a header comment; variance images use the same container
scaled to the 0.25 ceiling.  All writers round-trip bit-exactly.
"""

from __future__ import annotations

import numpy as np

DEPTH_UNITS_PER_METER = 5000.0
VARIANCE_CEILING = 0.25


def write_ppm(path, image: np.ndarray):
    """8-bit binary PPM from a float image in [0, 1] (h, w, 3)."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    header, data = _parse_pnm_header(raw, b"P6")
    w, h, maxval = header
    img = np.frombuffer(data, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return img.astype(np.float64) / maxval


def write_pgm16(path, values: np.ndarray, scale: float, comment: str = ""):
    """16-bit big-endian binary PGM of ``values * scale`` (clipped)."""
    v = np.asarray(values, dtype=np.float64) * scale
    data = np.clip(np.round(v), 0, 65535).astype(">u2")
    h, w = data.shape
    head = f"P5\n# scale: {scale:.6f} units per unit value"
    if comment:
        head += f" ({comment})"
    head += f"\n{w} {h}\n65535\n"
    with open(path, "wb") as f:
        f.write(head.encode())
        f.write(data.tobytes())


def read_pgm16(path) -> tuple[np.ndarray, float]:
    """Returns (values, scale) with values already divided by the scale."""
    with open(path, "rb") as f:
        raw = f.read()
    scale = 1.0
    for line in raw.split(b"\n", 8):
        if line.startswith(b"# scale:"):
            scale = float(line.split()[2])
            break
    header, data = _parse_pnm_header(raw, b"P5")
    w, h, maxval = header
    if maxval != 65535:
        raise ValueError("expected a 16-bit PGM")
    img = np.frombuffer(data, dtype=">u2", count=h * w).reshape(h, w)
    return img.astype(np.float64) / scale, scale


def write_depth_pgm(path, depth_m: np.ndarray):
    write_pgm16(path, depth_m, DEPTH_UNITS_PER_METER, "depth meters -> units")


def read_depth_pgm(path) -> np.ndarray:
    values, _ = read_pgm16(path)
    return values


def write_variance_pgm(path, variance: np.ndarray):
    write_pgm16(path, variance, 65535.0 / VARIANCE_CEILING, "variance 0..0.25")


def _parse_pnm_header(raw: bytes, magic: bytes):
    """Parse 'magic w h maxval' allowing comment lines; returns
    ((w, h, maxval), pixel bytes)."""
    if not raw.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    i = len(magic)
    while len(fields) < 3:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        fields.append(int(raw[i:j]))
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = fields
    return (w, h, maxval), raw[i:]

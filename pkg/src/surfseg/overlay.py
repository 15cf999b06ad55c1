"""Binary PPM (P6) overlays of surfaces on a B-scan."""
from __future__ import annotations

import os

import numpy as np

from . import _binio

COLORS = (
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
)


def render_overlay(image: np.ndarray, surface_sets: list[np.ndarray]) -> np.ndarray:
    """RGB array ``[Z, X, 3]`` from an ``[x, z]`` slice and ``[lambda, X]`` surfaces.

    Each surface set gets its own colour (red, green, blue, ...); consecutive
    columns are joined by vertical runs so every polyline is 1 pixel wide
    and gap-free.
    """
    img = np.asarray(image, dtype=np.float64).T
    Z, X = img.shape
    lo, hi = float(img.min()), float(img.max())
    gray = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    rgb = np.repeat(np.round(gray * 255).astype(np.uint8)[:, :, None], 3, axis=2)
    for k, surfaces in enumerate(surface_sets):
        color = COLORS[k % len(COLORS)]
        for surf in np.atleast_2d(surfaces):
            z = np.clip(np.round(np.asarray(surf, dtype=np.float64)), 0, Z - 1).astype(int)
            for x in range(X):
                z0 = z[x]
                z1 = z[x + 1] if x + 1 < X else z0
                lo_z, hi_z = min(z0, z1), max(z0, z1)
                # half of the vertical run belongs to each column
                mid = (lo_z + hi_z) // 2
                if z1 >= z0:
                    rgb[z0:mid + 1, x] = color
                    if x + 1 < X:
                        rgb[mid + 1:z1 + 1, x + 1] = color
                else:
                    rgb[mid:z0 + 1, x] = color
                    if x + 1 < X:
                        rgb[z1:mid, x + 1] = color
    return rgb


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def write_ppm(rgb: np.ndarray, path: str | os.PathLike) -> None:
    _binio.atomic_write(path, encode_ppm(rgb))

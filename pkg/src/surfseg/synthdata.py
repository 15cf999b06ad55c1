"""Synthetic layered volumes with known terrain-like surfaces.

"normal" volumes carry smooth sinusoidal surfaces; "amd" volumes add
Gaussian bumps that lift the deepest surface toward the one above it.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _binio
from .errors import ContractError, FormatError, ShapeMismatchError
from .numerics import make_rng

VOLUME_MAGIC = b"LCV1"
SURFACE_MAGIC = b"LCS1"
VERSION = 1


@dataclass
class Volume:
    """Voxels stored as ``[y, x, z]`` so that z is contiguous per column."""
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ContractError(f"volume needs positive [Y, X, Z] dims, got {self.voxels.shape}")

    @property
    def X(self) -> int:
        return self.voxels.shape[1]

    @property
    def Y(self) -> int:
        return self.voxels.shape[0]

    @property
    def Z(self) -> int:
        return self.voxels.shape[2]

    def slice(self, y: int) -> np.ndarray:
        """B-scan as an ``[x, z]`` array."""
        return self.voxels[y]


@dataclass
class SurfaceSet:
    """Sub-voxel surface heights, ``positions[i, y, x]``."""
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        if self.positions.ndim != 3:
            raise ContractError(f"surfaces need [lambda, Y, X] shape, got {self.positions.shape}")

    @property
    def lam(self) -> int:
        return self.positions.shape[0]

    @property
    def Y(self) -> int:
        return self.positions.shape[1]

    @property
    def X(self) -> int:
        return self.positions.shape[2]

    def check_bounds(self, Z: int) -> bool:
        return bool(np.all(self.positions >= 0) and np.all(self.positions <= Z - 1))


@dataclass
class SynthConfig:
    X: int = 128
    Y: int = 4
    Z: int = 64
    lam: int = 2
    mode: str = "normal"
    n_sines: int = 3
    amp_range: tuple[float, float] = (0.5, 3.0)
    freq_range: tuple[float, float] = (0.5, 2.5)  # cycles across X
    phase_drift: float = 0.1  # max phase change per slice (radians)
    base_range: tuple[float, float] = (18.0, 24.0)
    sep_range: tuple[float, float] = (12.0, 20.0)
    sep_amp: float = 3.0
    sep_freq_range: tuple[float, float] = (0.5, 1.5)
    delta_min: float = 4.0
    delta_max: float = 24.0
    layer_means: tuple[float, ...] = (0.2, 0.8, 0.4)
    noise: float = 0.05
    bump_count: tuple[int, int] = (1, 3)
    bump_frac: tuple[float, float] = (0.15, 0.4)  # of local separation
    bump_width: tuple[float, float] = (6.0, 12.0)  # gaussian sigma, columns
    bump_sign: int = 1  # +1 lifts the deepest surface toward the one above
    bump_coupling: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if min(self.X, self.Y, self.Z) < 1 or self.lam < 1:
            raise ContractError("dims and lambda must be positive")
        if self.mode not in ("normal", "amd"):
            raise ContractError(f"mode must be 'normal' or 'amd', got {self.mode!r}")
        if len(self.layer_means) != self.lam + 1:
            raise ContractError(f"need {self.lam + 1} layer means, got {len(self.layer_means)}")
        if not 1 <= self.delta_min <= self.delta_max:
            raise ContractError("need 1 <= delta_min <= delta_max")
        if self.noise < 0:
            raise ContractError("noise std must be non-negative")
        # worst-case excursions must keep every surface inside [2, Z-3]
        wiggle = self.n_sines * self.amp_range[1]
        bump = 0.0
        if self.mode == "amd":
            bump = self.bump_frac[1] * self.delta_max
        top = self.base_range[0] - wiggle - (bump * self.bump_coupling if self.bump_sign > 0 else 0.0)
        bottom = self.base_range[1] + wiggle + (self.lam - 1) * self.delta_max
        if self.mode == "amd" and self.bump_sign < 0:
            bottom += bump
        if top < 2 or bottom > self.Z - 3:
            raise ContractError(
                f"surfaces could leave [2, {self.Z - 3}] (worst case {top:.1f}..{bottom:.1f}); "
                "reduce amplitudes or separations"
            )


def _sinusoids(rng, n, amp_range, freq_range, drift, X, Y):
    x = np.arange(X)[None, :]
    y = np.arange(Y)[:, None]
    out = np.zeros((Y, X))
    for _ in range(n):
        a = rng.uniform(*amp_range)
        f = rng.uniform(*freq_range)
        phi = rng.uniform(0, 2 * np.pi)
        d = rng.uniform(-drift, drift)
        out += a * np.sin(2 * np.pi * f * x / X + phi + d * y)
    return out


def _bumps(rng, cfg: SynthConfig, sep: np.ndarray) -> np.ndarray:
    Y, X = sep.shape
    x = np.arange(X)[None, :]
    y = np.arange(Y)[:, None]
    field_ = np.zeros((Y, X))
    for _ in range(rng.integers(cfg.bump_count[0], cfg.bump_count[1] + 1)):
        cx, cy = rng.uniform(0, X), rng.uniform(0, Y)
        sx = rng.uniform(*cfg.bump_width)
        sy = max(1.0, sx * Y / X * 4)
        g = np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))
        field_ = np.maximum(field_, rng.uniform(*cfg.bump_frac) * g)
    return field_ * sep


def generate_surfaces(cfg: SynthConfig, rng: np.random.Generator) -> SurfaceSet:
    cfg.validate()
    X, Y = cfg.X, cfg.Y
    surfaces = [rng.uniform(*cfg.base_range) +
                _sinusoids(rng, cfg.n_sines, cfg.amp_range, cfg.freq_range, cfg.phase_drift, X, Y)]
    seps = []
    for _ in range(cfg.lam - 1):
        sep = rng.uniform(*cfg.sep_range) + _sinusoids(
            rng, 1, (0.0, cfg.sep_amp), cfg.sep_freq_range, cfg.phase_drift, X, Y)
        sep = np.clip(sep, cfg.delta_min, cfg.delta_max)
        seps.append(sep)
        surfaces.append(surfaces[-1] + sep)
    if cfg.mode == "amd" and cfg.lam >= 2:
        lift = _bumps(rng, cfg, seps[-1]) * cfg.bump_sign
        surfaces[-1] = surfaces[-1] - lift
        surfaces[-2] = surfaces[-2] - cfg.bump_coupling * lift
        # re-impose the minimum separation after the deformation
        surfaces[-1] = np.maximum(surfaces[-1], surfaces[-2] + cfg.delta_min)
    positions = np.stack(surfaces).astype(np.float32)
    if positions.min() < 2 or positions.max() > cfg.Z - 3:
        raise ContractError("generated surfaces left the valid depth range")
    return SurfaceSet(positions)


def render(surfaces: SurfaceSet, Z: int, layer_means, noise: float = 0.0,
           rng: np.random.Generator | None = None) -> Volume:
    """Voxel z belongs to layer k = number of surfaces with S_i <= z."""
    z = np.arange(Z, dtype=np.float32)
    layer = (surfaces.positions[:, :, :, None] <= z).sum(axis=0)  # [Y, X, Z]
    means = np.asarray(layer_means, dtype=np.float32)
    vox = means[layer]
    if noise > 0:
        vox = vox + rng.normal(0.0, noise, size=vox.shape).astype(np.float32)
    return Volume(vox)


def generate(cfg: SynthConfig) -> tuple[Volume, SurfaceSet]:
    rng = make_rng(cfg.seed)
    surf = generate_surfaces(cfg, rng)
    return render(surf, cfg.Z, cfg.layer_means, cfg.noise, rng), surf


# -- file formats -------------------------------------------------------------

def encode_volume(vol: Volume) -> bytes:
    return b"".join([VOLUME_MAGIC, _binio.u32(VERSION, vol.X, vol.Y, vol.Z), b"\x00",
                     _binio.f32(vol.voxels)])


def decode_volume(buf: bytes, name: str = "<volume>") -> Volume:
    r = _binio.Reader(buf, name)
    r.magic(VOLUME_MAGIC)
    r.version(VERSION)
    X, Y, Z = r.u32(), r.u32(), r.u32()
    dtype = r.u8()
    if dtype != 0:
        raise FormatError(f"{name}: unsupported dtype code {dtype}")
    data = r.f32(X * Y * Z)
    if not r.at_end():
        raise ShapeMismatchError(f"{name}: {len(buf) - r.pos} trailing bytes")
    return Volume(data.reshape(Y, X, Z))


def encode_surfaces(s: SurfaceSet) -> bytes:
    return b"".join([SURFACE_MAGIC, _binio.u32(VERSION, s.lam, s.X, s.Y), _binio.f32(s.positions)])


def decode_surfaces(buf: bytes, name: str = "<surfaces>") -> SurfaceSet:
    r = _binio.Reader(buf, name)
    r.magic(SURFACE_MAGIC)
    r.version(VERSION)
    lam, X, Y = r.u32(), r.u32(), r.u32()
    data = r.f32(lam * X * Y)
    if not r.at_end():
        raise ShapeMismatchError(f"{name}: {len(buf) - r.pos} trailing bytes")
    return SurfaceSet(data.reshape(lam, Y, X))


def write_volume(vol: Volume, path: str | os.PathLike) -> None:
    _binio.atomic_write(path, encode_volume(vol))


def read_volume(path: str | os.PathLike) -> Volume:
    return decode_volume(_binio.read_bytes(path), str(path))


def write_surfaces(s: SurfaceSet, path: str | os.PathLike) -> None:
    _binio.atomic_write(path, encode_surfaces(s))


def read_surfaces(path: str | os.PathLike) -> SurfaceSet:
    return decode_surfaces(_binio.read_bytes(path), str(path))

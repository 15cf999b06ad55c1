"""Preprocessing, patch extraction, augmentation and patch-dataset files."""
from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _binio
from .errors import ContractError, ShapeMismatchError
from .synthdata import SurfaceSet, Volume

log = logging.getLogger(__name__)

DATASET_MAGIC = b"LCP1"
VERSION = 1
FILL = -1.0
PAD_VALUE = 0.0  # zero columns added at slice borders (mid-gray after normalization)
MAX_ATTEMPTS = 20


def preprocess(volume: Volume, size: int = 5) -> Volume:
    """Median filter (replicate borders) then min-max map onto [-1, 1]."""
    med = ndimage.median_filter(volume.voxels, size=size, mode="nearest")
    lo, hi = float(med.min()), float(med.max())
    if hi == lo:
        log.warning("constant volume: normalized to all zeros")
        return Volume(np.zeros_like(med))
    return Volume((med - lo) * (2.0 / (hi - lo)) - 1.0)


@dataclass
class Patch:
    """An ``[1, Z, N]`` strip plus the full-width reference surfaces under it.

    ``context[i, x1]`` holds surface i at every patch column (NaN where
    unknown); it is only used to re-derive targets under augmentation.
    """
    data: np.ndarray
    origin: tuple[int, int, int]
    context: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.data.shape[2]

    @property
    def Z(self) -> int:
        return self.data.shape[1]


def middle_columns(N: int) -> slice:
    return slice(N // 4, 3 * N // 4)


def extract_patches(volume: Volume, surfaces: SurfaceSet, N: int, stride: int | None = None,
                    volume_id: int = 0, pad: int = 0,
                    edge_stride: int | None = None) -> list[tuple[Patch, np.ndarray]]:
    """Full-height N-column strips; targets are the middle N/2 columns, surface-major.

    With ``pad > 0`` the slice is first widened by ``pad`` columns of
    PAD_VALUE on each side, as inference does, and strips whose middle
    window would reach into the padding are skipped. Patch origins are in
    unpadded columns, so they can be negative. ``edge_stride`` samples the
    strips that contain padding more densely than ``stride``.
    """
    if N <= 0 or N % 4:
        raise ContractError(f"N must be a positive multiple of 4, got {N}")
    if (surfaces.X, surfaces.Y) != (volume.X, volume.Y):
        raise ContractError("surface grid does not match volume")
    stride = N // 2 if stride is None else stride
    edge_stride = stride if edge_stride is None else edge_stride
    if stride < 1 or edge_stride < 1:
        raise ContractError("stride must be positive")
    if not 0 <= pad <= N // 4:
        raise ContractError(f"pad must lie in [0, N/4], got {pad}")
    width = volume.X + 2 * pad
    if N > width:
        log.warning("patch width %d exceeds volume width %d: no patches", N, width)
        return []
    vox = volume.voxels
    pos = surfaces.positions.astype(np.float64)
    if pad:
        vox = np.pad(vox, ((0, 0), (pad, pad), (0, 0)), constant_values=PAD_VALUE)
        pos = np.pad(pos, ((0, 0), (0, 0), (pad, pad)), constant_values=np.nan)
    starts = set(range(0, width - N + 1, stride))
    if pad:
        last = width - N
        starts |= {s for s in range(0, last + 1, edge_stride) if s < pad}
        starts |= {last - s for s in range(0, last + 1, edge_stride) if last - s > last - pad}
    mid = middle_columns(N)
    out = []
    for y in range(volume.Y):
        for s in sorted(starts):
            ctx = pos[:, y, s:s + N].copy()
            target = ctx[:, mid].reshape(-1)
            if not np.all(np.isfinite(target)):
                continue
            data = np.ascontiguousarray(vox[y, s:s + N, :].T[None])
            out.append((Patch(data, (volume_id, y, s - pad), ctx), target.copy()))
    return out


@dataclass(frozen=True)
class AugmentSpec:
    mode: str = "none"  # none | translate | rotate | both
    t: int = 0
    theta: float = 0.0  # degrees

    def __post_init__(self):
        if self.mode not in ("none", "translate", "rotate", "both"):
            raise ContractError(f"unknown augmentation mode {self.mode!r}")
        if abs(self.theta) > 45:
            raise ContractError(f"rotation {self.theta} outside [-45, 45] degrees")


def _translate(data: np.ndarray, ctx: np.ndarray, t: int):
    Z = data.shape[1]
    out = np.full_like(data, FILL)
    if t >= 0:
        if t < Z:
            out[:, t:, :] = data[:, :Z - t, :]
    elif -t < Z:
        out[:, :Z + t, :] = data[:, -t:, :]
    return out, ctx + t


def _rotate(data: np.ndarray, ctx: np.ndarray, theta: float):
    """Rotate image and surface polylines by theta degrees about the patch centre.

    Returns None when a rotated surface folds over itself (no longer a
    function of x).
    """
    _, Z, N = data.shape
    cx, cz = (N - 1) / 2.0, (Z - 1) / 2.0
    c, s = np.cos(np.deg2rad(theta)), np.sin(np.deg2rad(theta))
    # output pixel p' samples the input at R(-theta)(p' - c) + c
    zz, xx = np.mgrid[0:Z, 0:N].astype(np.float64)
    dx, dz = xx - cx, zz - cz
    src_x = cx + c * dx + s * dz
    src_z = cz - s * dx + c * dz
    img = ndimage.map_coordinates(data[0].astype(np.float64), [src_z, src_x], order=1,
                                  mode="constant", cval=FILL)
    cols = np.arange(N, dtype=np.float64)
    new_ctx = np.full_like(ctx, np.nan)
    for i, surf in enumerate(ctx):
        ok = np.isfinite(surf)
        if ok.sum() < 2:
            continue
        px, pz = cols[ok] - cx, surf[ok] - cz
        rx = cx + c * px - s * pz
        rz = cz + s * px + c * pz
        if np.any(np.diff(rx) <= 0):
            return None
        inside = (cols >= rx[0]) & (cols <= rx[-1])
        new_ctx[i, inside] = np.interp(cols[inside], rx, rz)
    return img[None].astype(data.dtype), new_ctx


def augment(patch: Patch, target: np.ndarray, spec: AugmentSpec,
            rng: np.random.Generator | None = None):
    """Apply one augmentation; returns ``(patch, target)`` or None if rejected.

    Rejection happens when a middle-column target leaves [0, Z-1], becomes
    undefined, or the rotated surface is multi-valued.
    """
    if patch.context is None:
        raise ContractError("augmentation needs the patch's surface context")
    data, ctx = patch.data, patch.context
    if spec.mode in ("translate", "both"):
        data, ctx = _translate(data, ctx, spec.t)
    if spec.mode in ("rotate", "both"):
        rotated = _rotate(data, ctx, spec.theta)
        if rotated is None:
            return None
        data, ctx = rotated
    if spec.mode == "none":
        data, ctx = data.copy(), ctx.copy()
    new_target = ctx[:, middle_columns(patch.N)].reshape(-1)
    if not np.all(np.isfinite(new_target)):
        return None
    if new_target.min() < 0 or new_target.max() > patch.Z - 1:
        return None
    return Patch(data, patch.origin, ctx), new_target


def draw_translation(target: np.ndarray, Z: int, rng: np.random.Generator,
                     t_range: int | None = None) -> int:
    """Uniform shift in [-t_range, t_range] that keeps every target inside [0, Z-1]."""
    t_range = Z // 2 if t_range is None else t_range
    for _ in range(MAX_ATTEMPTS):
        t = int(rng.integers(-t_range, t_range + 1))
        if target.min() + t >= 0 and target.max() + t <= Z - 1:
            return t
    return 0


def random_augment(patch: Patch, target: np.ndarray, mode: str, rng: np.random.Generator,
                   t_range: int | None = None, max_angle: float = 45.0):
    """Draw parameters for ``mode`` and augment, redrawing on rejection."""
    for _ in range(MAX_ATTEMPTS):
        t = draw_translation(target, patch.Z, rng, t_range) if mode in ("translate", "both") else 0
        theta = float(rng.uniform(-max_angle, max_angle)) if mode in ("rotate", "both") else 0.0
        out = augment(patch, target, AugmentSpec(mode, t, theta), rng)
        if out is not None:
            return out
    return None


@dataclass
class PatchDataset:
    patches: np.ndarray  # [n, 1, Z, N] float32
    targets: np.ndarray  # [n, m2] float32
    lam: int
    stats: Counter = field(default_factory=Counter)

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def N(self) -> int:
        return self.patches.shape[3]

    @property
    def Z(self) -> int:
        return self.patches.shape[2]


VARIANTS = ("translate", "rotate", "both")


def build_dataset(items, N: int, augmentation: bool, rng: np.random.Generator,
                  stride: int | None = None, t_range: int | None = None,
                  max_angle: float = 45.0, border: bool = False,
                  edge_stride: int | None = None) -> PatchDataset:
    """Patches from ``items`` (pairs of preprocessed volume and surfaces).

    With augmentation each base patch also yields a translated, a rotated and
    a translated-and-rotated copy. Records are shuffled with ``rng``.
    ``border`` adds the zero-padded edge strips that inference produces,
    spaced ``edge_stride`` apart.
    """
    items = list(items)
    if not items:
        raise ContractError("no volumes given")
    lam = items[0][1].lam
    Z = items[0][0].Z
    stats: Counter = Counter()
    patches, targets = [], []
    for vid, (vol, surf) in enumerate(items):
        if surf.lam != lam or vol.Z != Z:
            raise ContractError("all volumes must share Z and lambda")
        for patch, target in extract_patches(vol, surf, N, stride, vid, N // 4 if border else 0,
                                             edge_stride):
            patches.append(patch.data)
            targets.append(target)
            stats["base"] += 1
            if not augmentation:
                continue
            for mode in VARIANTS:
                out = random_augment(patch, target, mode, rng, t_range, max_angle)
                if out is None:
                    stats[f"rejected_{mode}"] += 1
                    continue
                patches.append(out[0].data)
                targets.append(out[1])
                stats[mode] += 1
    if not patches:
        raise ContractError(f"no patches extracted (N={N})")
    order = rng.permutation(len(patches))
    P = np.stack(patches).astype(np.float32)[order]
    T = np.stack(targets).astype(np.float32)[order]
    log.info("dataset: %d records %s", len(P), dict(stats))
    return PatchDataset(P, T, lam, stats)


def encode_dataset(ds: PatchDataset) -> bytes:
    n, _, Z, N = ds.patches.shape
    # records store each patch column by column (z fastest)
    body = np.concatenate(
        [ds.patches[:, 0].transpose(0, 2, 1).reshape(n, -1), ds.targets.reshape(n, -1)], axis=1)
    return b"".join([DATASET_MAGIC, _binio.u32(VERSION, n, N, Z, ds.lam), _binio.f32(body)])


def decode_dataset(buf: bytes, name: str = "<dataset>") -> PatchDataset:
    r = _binio.Reader(buf, name)
    r.magic(DATASET_MAGIC)
    r.version(VERSION)
    n, N, Z, lam = r.u32(), r.u32(), r.u32(), r.u32()
    if N % 4 or lam < 1:
        raise ShapeMismatchError(f"{name}: invalid header N={N}, lambda={lam}")
    m2 = lam * N // 2
    body = r.f32(n * (Z * N + m2)).reshape(n, Z * N + m2)
    if not r.at_end():
        raise ShapeMismatchError(f"{name}: {len(buf) - r.pos} trailing bytes")
    patches = np.ascontiguousarray(body[:, :Z * N].reshape(n, N, Z).transpose(0, 2, 1)[:, None])
    targets = np.ascontiguousarray(body[:, Z * N:])
    return PatchDataset(patches, targets, lam)


def write_dataset(ds: PatchDataset, path: str | os.PathLike) -> None:
    _binio.atomic_write(path, encode_dataset(ds))


def read_dataset(path: str | os.PathLike) -> PatchDataset:
    return decode_dataset(_binio.read_bytes(path), str(path))

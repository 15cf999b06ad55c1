"""Whole-volume segmentation by overlapping patch tiling and stitching."""
from __future__ import annotations

import os
import resource
import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import SurfaceRegressionNet
from .pipeline import PAD_VALUE
from .synthdata import SurfaceSet, Volume


@dataclass(frozen=True)
class TilingPlan:
    """Patch starts in padded coordinates.

    Middle column k of the patch starting at s covers original column
    ``s + N//4 + k - pad``; columns falling outside [0, X) are discarded.
    """
    X: int
    N: int
    pad: int
    starts: tuple[int, ...]
    clip: int

    @property
    def width(self) -> int:
        """Padded slice width needed by the plan (zero columns beyond X + pad)."""
        return max(self.X + 2 * self.pad, self.starts[-1] + self.N)

    def window(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """(original columns, middle-window indices) claimed by patch j."""
        k = np.arange(self.N // 2)
        x = self.starts[j] + self.N // 4 + k - self.pad
        keep = (x >= 0) & (x < self.X)
        return x[keep], k[keep]

    def seams(self) -> list[int]:
        """Original columns where a new patch's claim begins (excluding the first)."""
        out = []
        for j in range(1, len(self.starts)):
            x, _ = self.window(j)
            if len(x) and x[0] > 0:
                out.append(int(x[0]))
        return out


def plan_tiling(X: int, N: int) -> TilingPlan:
    if N <= 0 or N % 4:
        raise ContractError(f"N must be a positive multiple of 4, got {N}")
    if X < 1:
        raise ContractError("X must be positive")
    half = N // 2
    if X < half:
        # one patch whose middle window is centred on the whole slice
        lead = (half - X) // 2
        return TilingPlan(X, N, N // 4 + lead, (0,), half - X - lead)
    starts = tuple(range(0, X, half))
    clip = starts[-1] + half - X
    plan = TilingPlan(X, N, N // 4, starts, clip)
    return plan


def coverage(plan: TilingPlan) -> np.ndarray:
    counts = np.zeros(plan.X, dtype=np.int64)
    for j in range(len(plan.starts)):
        x, _ = plan.window(j)
        counts[x] += 1
    return counts


def _slice_patches(image: np.ndarray, plan: TilingPlan) -> np.ndarray:
    """[x, z] slice -> [n_patches, 1, Z, N] with zero padding."""
    X, Z = image.shape
    padded = np.full((Z, plan.width), PAD_VALUE, dtype=np.float32)
    padded[:, plan.pad:plan.pad + X] = image.T
    return np.stack([padded[None, :, s:s + plan.N] for s in plan.starts])


@dataclass
class InferenceResult:
    surfaces: SurfaceSet
    plan: TilingPlan
    patch_count: int
    clamp_count: int
    ordering_violations: int
    columns: int
    wall_time: float
    peak_memory_mb: float

    def report(self) -> str:
        rate = self.ordering_violations / max(self.columns, 1)
        return "\n".join([
            f"patches = {self.patch_count}",
            f"patches_per_slice = {len(self.plan.starts)}",
            f"pad = {self.plan.pad}",
            f"clip = {self.plan.clip}",
            f"clamped = {self.clamp_count}",
            f"ordering_violations = {self.ordering_violations}",
            f"ordering_violation_rate = {rate:.6f}",
            f"wall_time_s = {self.wall_time:.3f}",
            f"peak_memory_mb = {self.peak_memory_mb:.1f}",
        ]) + "\n"


def _stitch(net: SurfaceRegressionNet, patches: np.ndarray, plan: TilingPlan, tag: str,
            batch: int = 64):
    cfg = net.config
    Z = cfg.Z
    preds = np.concatenate([net.forward(patches[i:i + batch]) for i in range(0, len(patches), batch)])
    preds = preds.astype(np.float64) * (Z - 1)
    bad = ~np.all(np.isfinite(preds), axis=1)
    if bad.any():
        j = int(np.argmax(bad))
        raise FloatingPointError(f"non-finite network output for {tag} patch {j} (start {plan.starts[j]})")
    out = np.zeros((cfg.lam, plan.X))
    preds = preds.reshape(len(plan.starts), cfg.lam, cfg.m1)
    for j in range(len(plan.starts)):
        x, k = plan.window(j)
        out[:, x] = preds[j][:, k]
    clamped = int(np.sum((out < 0) | (out > Z - 1)))
    return np.clip(out, 0, Z - 1), clamped


def segment_slice(net: SurfaceRegressionNet, image: np.ndarray, plan: TilingPlan | None = None):
    """Surfaces ``[lambda, X]`` in voxels for one ``[x, z]`` B-scan, plus the clamp count."""
    image = np.asarray(image)
    cfg = net.config
    if image.shape[1] != cfg.Z:
        raise ContractError(f"slice depth {image.shape[1]} != network Z {cfg.Z}")
    plan = plan or plan_tiling(image.shape[0], cfg.N)
    if plan.X != image.shape[0] or plan.N != cfg.N:
        raise ContractError("tiling plan does not match slice / network")
    return _stitch(net, _slice_patches(image, plan), plan, "slice")


def _peak_memory_mb() -> float:
    # ru_maxrss is KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def segment_volume(net: SurfaceRegressionNet, volume: Volume) -> InferenceResult:
    """Slice-by-slice segmentation; surface ordering is measured, not enforced."""
    cfg = net.config
    if volume.Z != cfg.Z:
        raise ContractError(f"volume depth {volume.Z} != network Z {cfg.Z}")
    t0 = time.perf_counter()
    plan = plan_tiling(volume.X, cfg.N)
    out = np.zeros((cfg.lam, volume.Y, volume.X), dtype=np.float32)
    clamped = 0
    for y in range(volume.Y):
        surf, c = _stitch(net, _slice_patches(volume.slice(y), plan), plan, f"slice {y}")
        out[:, y] = surf
        clamped += c
    violations = int(np.sum(np.diff(out.astype(np.float64), axis=0) < 1)) if cfg.lam > 1 else 0
    return InferenceResult(
        SurfaceSet(out), plan, len(plan.starts) * volume.Y, clamped, violations,
        volume.X * volume.Y * max(cfg.lam - 1, 1), time.perf_counter() - t0, _peak_memory_mb())


def write_report(text: str, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(text)

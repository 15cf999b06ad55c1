"""Exact multi-surface segmentation of a B-scan by dynamic programming.

Each column carries a joint state (z_1, ..., z_lambda). The objective is

    sum_i sum_x c_i(x, z_i(x)) + sum_i sum_x w_i * (z_i(x+1) - z_i(x))**2

subject to |z_i(x+1) - z_i(x)| <= delta_max and
delta_min_sep <= z_{i+1}(x) - z_i(x) <= delta_max_sep.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InfeasibleError
from .synthdata import SurfaceSet, Volume

STATE_BUDGET = 2_000_000


@dataclass
class DpConfig:
    delta_max: int = 2
    smooth_weight: tuple[float, ...] = (0.1, 0.1)
    delta_min_sep: int = 1
    delta_max_sep: int = 40
    cost_sign: tuple[int, ...] = (1, -1)

    def validate(self, lam: int | None = None) -> None:
        if self.delta_max < 0:
            raise ContractError("delta_max must be >= 0")
        if not 1 <= self.delta_min_sep <= self.delta_max_sep:
            raise ContractError("need 1 <= delta_min_sep <= delta_max_sep")
        if len(self.smooth_weight) != len(self.cost_sign):
            raise ContractError("smooth_weight and cost_sign need one entry per surface")
        if any(w < 0 for w in self.smooth_weight):
            raise ContractError("smoothness weights must be non-negative")
        if lam is not None and len(self.cost_sign) != lam:
            raise ContractError(f"config describes {len(self.cost_sign)} surfaces, expected {lam}")

    @property
    def lam(self) -> int:
        return len(self.cost_sign)


def build_costs(image: np.ndarray, cfg: DpConfig) -> np.ndarray:
    """Signed central vertical gradient per surface: ``c[i, x, z]``.

    ``image`` is an ``[x, z]`` B-scan; borders replicate.
    """
    img = np.asarray(image, dtype=np.float64)
    padded = np.pad(img, ((0, 0), (1, 1)), mode="edge")
    grad = (padded[:, 2:] - padded[:, :-2]) / 2.0
    return np.stack([-s * grad for s in cfg.cost_sign])


def feasible_states(Z: int, lam: int, cfg: DpConfig) -> np.ndarray:
    """Boolean mask over (z_1, ..., z_lambda) satisfying the separation bounds."""
    mask = np.ones((Z,) * lam, dtype=bool)
    z = np.arange(Z)
    for i in range(lam - 1):
        shape_a = [1] * lam
        shape_b = [1] * lam
        shape_a[i] = Z
        shape_b[i + 1] = Z
        sep = z.reshape(shape_b) - z.reshape(shape_a)
        mask &= (sep >= cfg.delta_min_sep) & (sep <= cfg.delta_max_sep)
    return mask


def _min_transition(G: np.ndarray, cfg: DpConfig) -> np.ndarray:
    """M(s) = min over s' within delta_max of sum_i w_i (s'_i - s_i)^2 + G(s')."""
    H = G
    for axis, w in enumerate(cfg.smooth_weight):
        best = H.copy()  # d = 0
        Z = H.shape[axis]
        for d in range(1, min(cfg.delta_max, Z - 1) + 1):
            pen = w * d * d
            lo = [slice(None)] * H.ndim
            hi = [slice(None)] * H.ndim
            lo[axis], hi[axis] = slice(0, Z - d), slice(d, Z)
            lo, hi = tuple(lo), tuple(hi)
            # state s looks ahead to s' = s + d and s' = s - d
            np.minimum(best[lo], H[hi] + pen, out=best[lo])
            np.minimum(best[hi], H[lo] + pen, out=best[hi])
        H = best
    return H


def _column_cost(costs: np.ndarray, x: int) -> np.ndarray:
    lam, _, Z = costs.shape
    total = np.zeros((Z,) * lam)
    for i in range(lam):
        shape = [1] * lam
        shape[i] = Z
        total = total + costs[i, x].reshape(shape)
    return total


def objective(costs: np.ndarray, surfaces: np.ndarray, cfg: DpConfig) -> float:
    """Objective of integer surfaces ``[lambda, X]`` (constraints not checked)."""
    lam, X, _ = costs.shape
    total = 0.0
    for x in range(X):
        for i in range(lam):
            total += costs[i, x, surfaces[i, x]]
    for x in range(X - 1):
        for i in range(lam):
            d = int(surfaces[i, x + 1]) - int(surfaces[i, x])
            total += cfg.smooth_weight[i] * d * d
    return total


def solve_slice(costs: np.ndarray, cfg: DpConfig) -> tuple[np.ndarray, float]:
    """Globally optimal surfaces ``[lambda, X]`` (int) and their objective.

    Among optimal solutions the lexicographically smallest state sequence
    (column 0 first, then surface order) is returned.
    """
    costs = np.asarray(costs, dtype=np.float64)
    lam, X, Z = costs.shape
    cfg.validate(lam)
    if Z ** lam > STATE_BUDGET:
        raise ContractError(f"state space Z^lambda = {Z ** lam} exceeds budget {STATE_BUDGET}")
    if not np.all(np.isfinite(costs)):
        raise ContractError("costs must be finite")
    mask = feasible_states(Z, lam, cfg)
    if not mask.any():
        raise InfeasibleError(
            f"no column state satisfies separation [{cfg.delta_min_sep}, {cfg.delta_max_sep}] "
            f"for {lam} surfaces in Z={Z}")

    # cost-to-go, right to left
    G = [None] * X
    G[X - 1] = np.where(mask, _column_cost(costs, X - 1), np.inf)
    for x in range(X - 2, -1, -1):
        G[x] = np.where(mask, _column_cost(costs, x) + _min_transition(G[x + 1], cfg), np.inf)
    best = float(G[0].min())
    if not np.isfinite(best):
        raise InfeasibleError("no surface sequence satisfies the hard constraints")

    # greedy left-to-right reconstruction with smallest-index tie breaking
    states = np.zeros((X, lam), dtype=np.int64)
    states[0] = np.unravel_index(int(np.argmin(G[0])), G[0].shape)
    w = np.asarray(cfg.smooth_weight, dtype=np.float64)
    for x in range(1, X):
        prev = states[x - 1]
        ranges = [np.arange(max(0, p - cfg.delta_max), min(Z, p + cfg.delta_max + 1)) for p in prev]
        grids = np.meshgrid(*ranges, indexing="ij")
        pen = sum(w[i] * (grids[i] - prev[i]) ** 2 for i in range(lam))
        vals = G[x][tuple(grids)] + pen
        k = int(np.argmin(vals))
        states[x] = [g.reshape(-1)[k] for g in grids]
    return states.T.copy(), best


@dataclass
class BaselineResult:
    surfaces: SurfaceSet
    objectives: list[float] = field(default_factory=list)
    violations: int = 0


def check_constraints(surf: np.ndarray, cfg: DpConfig) -> int:
    """Number of violated hard constraints in integer surfaces ``[lambda, X]``."""
    steps = np.abs(np.diff(surf, axis=1)) > cfg.delta_max
    sep = np.diff(surf, axis=0)
    bad_sep = (sep < cfg.delta_min_sep) | (sep > cfg.delta_max_sep)
    return int(steps.sum() + bad_sep.sum())


def segment_volume_dp(volume: Volume, cfg: DpConfig) -> BaselineResult:
    """Solve every B-scan independently."""
    cfg.validate()
    out = np.zeros((cfg.lam, volume.Y, volume.X), dtype=np.float32)
    objectives = []
    violations = 0
    for y in range(volume.Y):
        surf, obj = solve_slice(build_costs(volume.slice(y), cfg), cfg)
        violations += check_constraints(surf, cfg)
        out[:, y, :] = surf
        objectives.append(obj)
    return BaselineResult(SurfaceSet(out), objectives, violations)

"""Surface accuracy metrics, confidence intervals and paired t-tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .infer import TilingPlan
from .synthdata import SurfaceSet

# two-sided 95% Student-t quantiles t_{0.975, df}, df = 1..40
T975 = (
    12.706205, 4.302653, 3.182446, 2.776445, 2.570582, 2.446912, 2.364624, 2.306004,
    2.262157, 2.228139, 2.200985, 2.178813, 2.160369, 2.144787, 2.13145, 2.119905,
    2.109816, 2.100922, 2.093024, 2.085963, 2.079614, 2.073873, 2.068658, 2.063899,
    2.059539, 2.055529, 2.051831, 2.048407, 2.04523, 2.042272, 2.039513, 2.036933,
    2.034515, 2.032245, 2.030108, 2.028094, 2.026192, 2.024394, 2.022691, 2.021075,
)

# published clinical results (UMSPE, voxels), printed for context only
PUBLISHED_REFERENCE = {
    "cnn": {"S1": 0.98, "S2": 1.56, "overall": 1.27},
    "graph": {"S1": 1.45, "S2": 3.17, "overall": 2.31},
}


def umspe(pred: SurfaceSet, ref: SurfaceSet, surface: int) -> float:
    """Mean |pred - ref| over all columns of one surface, in voxels."""
    if pred.positions.shape != ref.positions.shape:
        raise ContractError(f"shape mismatch {pred.positions.shape} vs {ref.positions.shape}")
    d = pred.positions[surface].astype(np.float64) - ref.positions[surface].astype(np.float64)
    return float(np.mean(np.abs(d)))


def signed_error(pred: SurfaceSet, ref: SurfaceSet, surface: int) -> float:
    d = pred.positions[surface].astype(np.float64) - ref.positions[surface].astype(np.float64)
    return float(np.mean(d))


# -- Student t distribution ---------------------------------------------------

def _betacf(a: float, b: float, x: float, eps: float = 1e-15, max_iter: int = 500) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ContractError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    lnfront = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
               + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lnfront) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lnfront) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_quantile_975(df: int) -> float:
    if df < 1:
        raise ContractError("need at least one degree of freedom")
    if df <= len(T975):
        return T975[df - 1]
    lo, hi = 1.9, 2.1
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if t_two_sided_p(mid, df) > 0.05:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def ci95(values) -> tuple[float, float]:
    """Mean and Student-t 95% half-width of per-volume values."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if n < 2:
        raise ContractError("a confidence interval needs at least two values")
    s = float(np.std(v, ddof=1))
    return float(v.mean()), t_quantile_975(n - 1) * s / math.sqrt(n)


@dataclass
class PairedT:
    t: float
    p: float
    significant: bool
    n: int
    mean_diff: float
    note: str = ""


def paired_t(errors_a, errors_b, alpha: float = 0.05) -> PairedT:
    """Two-sided paired Student t-test on per-volume errors."""
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("paired samples must be equal-length 1-d lists")
    n = len(a)
    if n < 2:
        raise ContractError("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return PairedT(0.0, 1.0, False, n, 0.0, "no difference")
        return PairedT(math.copysign(math.inf, mean), 0.0, True, n, mean, "zero variance")
    t = mean / (sd / math.sqrt(n))
    p = t_two_sided_p(t, n - 1)
    return PairedT(t, p, p < alpha, n, mean)


# -- stitching seams ----------------------------------------------------------

@dataclass
class SeamStats:
    count: int
    max: float
    mean: float


def seam_discontinuity(pred: SurfaceSet, plan: TilingPlan) -> SeamStats:
    """|S(x) - S(x-1)| at every column where a new patch's claim begins."""
    seams = plan.seams()
    if not seams or pred.X != plan.X:
        if pred.X != plan.X:
            raise ContractError("plan width does not match surfaces")
        return SeamStats(0, 0.0, 0.0)
    p = pred.positions.astype(np.float64)
    cols = np.asarray(seams)
    jumps = np.abs(p[:, :, cols] - p[:, :, cols - 1]).reshape(-1)
    return SeamStats(int(jumps.size), float(jumps.max()), float(jumps.mean()))


# -- reports ------------------------------------------------------------------

@dataclass
class ErrorReport:
    umspe: list[float]
    signed: list[float]
    per_volume: list[list[float]]  # [volume][surface]
    ci: list[tuple[float, float] | None]
    seam: SeamStats | None = None
    ordering_violation_rate: float | None = None
    paired: list[PairedT] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def records(self) -> list[tuple[str, str]]:
        out = []
        for i, u in enumerate(self.umspe):
            out.append((f"umspe_s{i + 1}", f"{u:.6f}"))
            out.append((f"signed_s{i + 1}", f"{self.signed[i]:.6f}"))
            if self.ci[i] is not None:
                out.append((f"ci95_mean_s{i + 1}", f"{self.ci[i][0]:.6f}"))
                out.append((f"ci95_half_s{i + 1}", f"{self.ci[i][1]:.6f}"))
        out.append(("umspe_overall", f"{float(np.mean(self.umspe)):.6f}"))
        for v, row in enumerate(self.per_volume):
            for i, u in enumerate(row):
                out.append((f"volume{v}_umspe_s{i + 1}", f"{u:.6f}"))
        if self.seam is not None:
            out += [("seam_count", str(self.seam.count)), ("seam_max", f"{self.seam.max:.6f}"),
                    ("seam_mean", f"{self.seam.mean:.6f}")]
        if self.ordering_violation_rate is not None:
            out.append(("ordering_violation_rate", f"{self.ordering_violation_rate:.6f}"))
        for i, pt in enumerate(self.paired):
            out += [(f"paired_t_s{i + 1}", f"{pt.t:.6f}"), (f"paired_p_s{i + 1}", f"{pt.p:.6g}"),
                    (f"paired_significant_s{i + 1}", str(int(pt.significant)))]
        return out

    def key_values(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.records())

    def text(self, published: bool = True) -> str:
        lines = ["surface  UMSPE(vox)  signed(vox)  95% CI"]
        for i, u in enumerate(self.umspe):
            ci = self.ci[i]
            ci_txt = f"{ci[0]:.3f} +/- {ci[1]:.3f}" if ci else "n/a (single volume)"
            lines.append(f"S{i + 1:<7d} {u:10.4f}  {self.signed[i]:11.4f}  {ci_txt}")
        lines.append(f"overall  {float(np.mean(self.umspe)):10.4f}")
        if self.seam is not None:
            lines.append(f"seams: {self.seam.count}  max |dz| {self.seam.max:.3f}  mean |dz| {self.seam.mean:.3f}")
        if self.ordering_violation_rate is not None:
            lines.append(f"ordering violations: {100 * self.ordering_violation_rate:.3f}% of columns")
        for i, pt in enumerate(self.paired):
            verdict = "significant" if pt.significant else "not significant"
            extra = f" ({pt.note})" if pt.note else ""
            lines.append(f"paired t S{i + 1}: t = {pt.t:.4f}, p = {pt.p:.4g}, n = {pt.n}, {verdict}{extra}")
        lines += self.notes
        if published:
            ref = PUBLISHED_REFERENCE
            lines.append("published clinical reference (not reproducible here; synthetic data only):")
            lines.append("         measured   ref CNN   ref graph")
            for i, u in enumerate(self.umspe[:2]):
                key = f"S{i + 1}"
                lines.append(f"{key:<8s} {u:9.3f}  {ref['cnn'][key]:8.2f}  {ref['graph'][key]:8.2f}")
            lines.append(f"overall  {float(np.mean(self.umspe)):9.3f}  {ref['cnn']['overall']:8.2f}  "
                         f"{ref['graph']['overall']:8.2f}")
        return "\n".join(lines) + "\n"


def evaluate(preds: list[SurfaceSet], refs: list[SurfaceSet], plan: TilingPlan | None = None,
             others: list[SurfaceSet] | None = None) -> ErrorReport:
    """Per-volume UMSPE first, then pooled means and a CI across volumes.

    With ``others`` (a second method on the same volumes) a paired t-test per
    surface compares the two methods' per-volume errors.
    """
    if len(preds) != len(refs) or not preds:
        raise ContractError("need matching, non-empty lists of predictions and references")
    lam = refs[0].lam
    per_volume = [[umspe(p, r, i) for i in range(lam)] for p, r in zip(preds, refs)]
    pv = np.asarray(per_volume)
    signed = [float(np.mean([signed_error(p, r, i) for p, r in zip(preds, refs)])) for i in range(lam)]
    ci = [ci95(pv[:, i]) if len(preds) >= 2 else None for i in range(lam)]
    seam = None
    if plan is not None:
        stats = [seam_discontinuity(p, plan) for p in preds]
        count = sum(s.count for s in stats)
        seam = SeamStats(count, max(s.max for s in stats),
                         sum(s.mean * s.count for s in stats) / count if count else 0.0)
    order = None
    if lam > 1:
        bad = sum(int(np.sum(np.diff(p.positions.astype(np.float64), axis=0) < 1)) for p in preds)
        order = bad / sum(p.X * p.Y * (lam - 1) for p in preds)
    paired, notes = [], []
    if others is not None:
        if len(others) != len(refs):
            raise ContractError("comparison set must cover the same volumes")
        if len(refs) < 2:
            notes.append("paired t: skipped, needs at least two volumes")
        else:
            ov = np.asarray([[umspe(o, r, i) for i in range(lam)] for o, r in zip(others, refs)])
            paired = [paired_t(pv[:, i], ov[:, i]) for i in range(lam)]
    return ErrorReport(pv.mean(axis=0).tolist(), signed, per_volume, ci, seam, order, paired, notes)

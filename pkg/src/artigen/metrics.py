"""Set-level evaluation of generated point clouds against references."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import chamfer_distance


def pairwise_chamfer(gen: list[np.ndarray], ref: list[np.ndarray]) -> np.ndarray:
    """Matrix D[i, j] = CD(gen[i], ref[j]), squared symmetric Chamfer."""
    d = np.empty((len(gen), len(ref)))
    for i, g in enumerate(gen):
        for j, r in enumerate(ref):
            d[i, j] = chamfer_distance(g, r)
    return d


def mmd(gen: list[np.ndarray], ref: list[np.ndarray],
        d: np.ndarray | None = None) -> float:
    """Mean over references of the distance to the closest generated cloud."""
    if not gen or not ref:
        raise ValueError("mmd needs non-empty sets")
    if d is None:
        d = pairwise_chamfer(gen, ref)
    return float(d.min(axis=0).mean())


def cov(gen: list[np.ndarray], ref: list[np.ndarray],
        d: np.ndarray | None = None) -> float:
    """Fraction of references matched as nearest neighbor of some generation."""
    if not gen or not ref:
        raise ValueError("cov needs non-empty sets")
    if d is None:
        d = pairwise_chamfer(gen, ref)
    matched = np.unique(d.argmin(axis=1))
    return float(matched.size / len(ref))


def one_nna(gen: list[np.ndarray], ref: list[np.ndarray],
            d: np.ndarray | None = None) -> float:
    """Leave-one-out 1-NN two-sample accuracy over the pooled set.

    Ties are broken toward the lowest pooled index (generations first).
    0.5 means the two sets are indistinguishable to the classifier.
    """
    if not gen or not ref:
        raise ValueError("one_nna needs non-empty sets")
    pool = list(gen) + list(ref)
    n = len(pool)
    labels = np.array([0] * len(gen) + [1] * len(ref))
    full = np.zeros((n, n))
    if d is not None:
        full[: len(gen), len(gen):] = d
        full[len(gen):, : len(gen)] = d.T
        gg = pairwise_chamfer(gen, gen)
        rr = pairwise_chamfer(ref, ref)
        full[: len(gen), : len(gen)] = gg
        full[len(gen):, len(gen):] = rr
    else:
        full = pairwise_chamfer(pool, pool)
    np.fill_diagonal(full, np.inf)
    nearest = full.argmin(axis=1)  # argmin takes the lowest index on ties
    correct = labels[nearest] == labels
    return float(correct.mean())


def _voxel_histogram(points_list: list[np.ndarray], lo: np.ndarray, hi: np.ndarray,
                     res: int) -> np.ndarray:
    """Occupancy frequency per voxel, averaged over the set's clouds."""
    occ = np.zeros(res ** 3)
    extent = np.maximum(hi - lo, 1e-12)
    for pts in points_list:
        idx = np.floor((pts - lo) / extent * res).astype(np.int64)
        idx = np.clip(idx, 0, res - 1)
        flat = np.unique(idx[:, 0] * res * res + idx[:, 1] * res + idx[:, 2])
        occ[flat] += 1.0
    occ /= len(points_list)
    total = occ.sum()
    return occ / total if total > 0 else occ


def jsd(gen: list[np.ndarray], ref: list[np.ndarray], resolution: int = 28) -> float:
    """Jensen-Shannon divergence (base 2) between voxel occupancy histograms.

    The voxel grid spans the joint axis-aligned bounding cube of both sets.
    """
    if not gen or not ref:
        raise ValueError("jsd needs non-empty sets")
    allpts = np.concatenate([np.concatenate(gen), np.concatenate(ref)])
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    center = (lo + hi) / 2
    half = (hi - lo).max() / 2
    lo = center - half
    hi = center + half
    p = _voxel_histogram(gen, lo, hi, resolution)
    q = _voxel_histogram(ref, lo, hi, resolution)
    m = (p + q) / 2

    def _kl(a, b):
        mask = a > 0
        return float((a[mask] * np.log2(a[mask] / b[mask])).sum())

    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def apd(reports) -> float:
    """Average penetration depth: mean of per-sample collision l_phy values."""
    vals = [r.l_phy if hasattr(r, "l_phy") else float(r) for r in reports]
    if not vals:
        raise ValueError("apd needs at least one report")
    return float(np.mean(vals))


@dataclass
class EvalResult:
    mmd: float
    cov: float
    one_nna: float
    jsd: float
    apd: float | None = None

    def to_dict(self) -> dict:
        return {"mmd": self.mmd, "cov": self.cov, "one_nna": self.one_nna,
                "jsd": self.jsd, "apd": self.apd}

    def table(self) -> str:
        """Fixed-width report; MMD scaled by 10^3, APD by 10^2."""
        rows = [("MMD (x1e3)", f"{self.mmd * 1e3:.4f}"),
                ("COV (%)", f"{self.cov * 100:.2f}"),
                ("1-NNA (%)", f"{self.one_nna * 100:.2f}"),
                ("JSD", f"{self.jsd:.4f}")]
        if self.apd is not None:
            rows.append(("APD (x1e2)", f"{self.apd * 1e2:.4f}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def evaluate(gen: list[np.ndarray], ref: list[np.ndarray],
             apd_value: float | None = None, resolution: int = 28) -> EvalResult:
    d = pairwise_chamfer(gen, ref)
    return EvalResult(
        mmd=mmd(gen, ref, d), cov=cov(gen, ref, d), one_nna=one_nna(gen, ref, d),
        jsd=jsd(gen, ref, resolution), apd=apd_value,
    )

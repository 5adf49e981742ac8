"""Deformation bases, coefficient fitting and the coefficient mixture model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cage import Cage
from .mesh import TriMesh, sample_surface

_NORM_EPS = 1e-12


@dataclass
class FitConfig:
    lambda_orth: float = 1e-4
    lambda_sp: float = 1e-4
    lambda_phy: float = 1.0
    chamfer_samples: int = 4096
    outer_iters: int = 10
    inner_rounds: int = 50
    reg_steps: int = 25
    reg_lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_orth, self.lambda_sp, self.lambda_phy) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class BasisSet:
    """K cage-offset patterns, stored as a (K, N_t, 3) array."""

    bases: np.ndarray

    def __post_init__(self):
        b = np.ascontiguousarray(np.asarray(self.bases, dtype=np.float64))
        if b.ndim != 3 or b.shape[2] != 3:
            raise ValueError(f"bases must be (K, N_t, 3), got {b.shape}")
        if not np.isfinite(b).all():
            raise ValueError("non-finite basis entries")
        b.setflags(write=False)
        object.__setattr__(self, "bases", b)

    @property
    def k(self) -> int:
        return self.bases.shape[0]

    @property
    def n_cage(self) -> int:
        return self.bases.shape[1]

    def cage_offsets(self, z: np.ndarray) -> np.ndarray:
        """Linear combination of bases: (N_t, 3) cage offsets for a K-vector."""
        return np.einsum("kna,k->na", self.bases, np.asarray(z, dtype=np.float64))

    def orthogonality(self) -> np.ndarray:
        """Pairwise |normalized dot products|, diagnostic only."""
        flat = self.bases.reshape(self.k, -1)
        norms = np.linalg.norm(flat, axis=1)
        g = flat @ flat.T / (np.outer(norms, norms) + _NORM_EPS)
        np.fill_diagonal(g, 0.0)
        return np.abs(g)


# ---------------------------------------------------------------------------
# Chamfer distance


def chamfer_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric squared-distance Chamfer: mean sq NN both ways, summed."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("chamfer distance of an empty point set")
    d_pq, _ = cKDTree(q).query(p)
    d_qp, _ = cKDTree(p).query(q)
    return float(np.mean(d_pq**2) + np.mean(d_qp**2))


# ---------------------------------------------------------------------------
# Deformation operator on sampled surface points


class DeformOperator:
    """Sampled source points as an affine function of the coefficient vector.

    Surface samples are barycentric combinations of vertices, and vertex
    offsets are linear in the cage offsets, so each sample moves affinely
    with z: points(z) = P0 + G @ (sum_k z_k b_k).
    """

    def __init__(self, cage: Cage, source: TriMesh, n_samples: int, seed: int = 0):
        self.cage = cage
        self.source = source
        rng = np.random.default_rng(seed)
        areas = source.face_areas()
        fidx = rng.choice(source.n_faces, size=n_samples, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n_samples))
        r2 = rng.random(n_samples)
        bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
        corners = source.faces[fidx]  # (n, 3)
        self.p0 = np.einsum("nc,nca->na", bary, source.vertices[corners])
        # weight of each sample w.r.t. cage vertices
        self.g = np.einsum("nc,ncj->nj", bary, cage.phi[corners])

    def points(self, bases: BasisSet, z: np.ndarray) -> np.ndarray:
        return self.p0 + self.g @ bases.cage_offsets(z)

    def basis_point_offsets(self, bases: BasisSet) -> np.ndarray:
        """Per-basis sample offsets, shape (K, n, 3)."""
        return np.einsum("nj,kja->kna", self.g, bases.bases)


# ---------------------------------------------------------------------------
# Coefficient fitting


def lsq_coefficient(bases: BasisSet, cage_offsets: np.ndarray) -> np.ndarray:
    """Minimum-norm least squares of sum_k z_k b_k = cage_offsets."""
    a = bases.bases.reshape(bases.k, -1).T  # (3N_t, K)
    rhs = np.asarray(cage_offsets, dtype=np.float64).ravel()
    z, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    return z


@dataclass
class CoeffFit:
    z: np.ndarray
    cd: float
    converged: bool
    cd_history: list[float] = field(default_factory=list)
    correspondences: tuple[np.ndarray, np.ndarray] | None = None


def _match(points: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-target index per point, nearest-point index per target."""
    _, fwd = cKDTree(targets).query(points)
    _, back = cKDTree(points).query(targets)
    return fwd, back


def _solve_matched(op: DeformOperator, bases: BasisSet, targets: np.ndarray,
                   fwd: np.ndarray, back: np.ndarray) -> np.ndarray:
    """Closed-form z for the fixed-correspondence point-matching objective."""
    e = op.basis_point_offsets(bases)  # (K, n, 3)
    n_src = op.p0.shape[0]
    n_tgt = targets.shape[0]
    # forward rows: p_i(z) -> targets[fwd[i]], weight 1/n_src
    # backward rows: p_back[j](z) -> targets[j], weight 1/n_tgt
    a_fwd = e.reshape(bases.k, -1).T / np.sqrt(n_src)  # (3n, K)
    r_fwd = (targets[fwd] - op.p0).ravel() / np.sqrt(n_src)
    e_back = e[:, back, :].reshape(bases.k, -1).T / np.sqrt(n_tgt)
    r_back = (targets - op.p0[back]).ravel() / np.sqrt(n_tgt)
    a = np.vstack([a_fwd, e_back])
    r = np.concatenate([r_fwd, r_back])
    z, *_ = np.linalg.lstsq(a, r, rcond=None)
    return z


def fit_coefficient(bases: BasisSet, op: DeformOperator, target_points: np.ndarray,
                    tol: float = 1e-8, max_rounds: int = 50,
                    z0: np.ndarray | None = None) -> CoeffFit:
    """Fit z minimizing Chamfer distance to the target samples.

    Alternates nearest-neighbour correspondence freezing with the closed-form
    least squares on the matched objective; only improving steps are kept, so
    the recorded CD history is non-increasing.
    """
    targets = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    z = np.zeros(bases.k) if z0 is None else np.array(z0, dtype=np.float64)
    pts = op.points(bases, z)
    best_cd = chamfer_distance(pts, targets)
    best_z = z
    best_corr = _match(pts, targets)
    history = [best_cd]
    converged = False
    for _ in range(max_rounds):
        fwd, back = _match(op.points(bases, best_z), targets)
        z_new = _solve_matched(op, bases, targets, fwd, back)
        cd_new = chamfer_distance(op.points(bases, z_new), targets)
        if cd_new < best_cd:
            improvement = best_cd - cd_new
            best_cd, best_z, best_corr = cd_new, z_new, (fwd, back)
            history.append(best_cd)
            if improvement < tol:
                converged = True
                break
        else:
            converged = True
            break
    return CoeffFit(z=best_z, cd=best_cd, converged=converged,
                    cd_history=history, correspondences=best_corr)


# ---------------------------------------------------------------------------
# Regularizers and the basis objective


def regularizers(bases: BasisSet) -> tuple[float, float]:
    """(orthogonality penalty, l1 sparsity penalty)."""
    flat = bases.bases.reshape(bases.k, -1)
    norms = np.linalg.norm(flat, axis=1)
    l_orth = 0.0
    for i in range(bases.k):
        for j in range(i + 1, bases.k):
            r = flat[i] @ flat[j] / (norms[i] * norms[j] + _NORM_EPS)
            l_orth += r * r
    l_sp = np.abs(flat).sum() / flat.size
    return float(l_orth), float(l_sp)


def _regularizer_grad(b: np.ndarray, lambda_orth: float, lambda_sp: float) -> np.ndarray:
    k = b.shape[0]
    flat = b.reshape(k, -1)
    norms = np.linalg.norm(flat, axis=1)
    grad = np.zeros_like(flat)
    for i in range(k):
        for j in range(i + 1, k):
            d = norms[i] * norms[j] + _NORM_EPS
            s = flat[i] @ flat[j]
            r = s / d
            gi = flat[j] / d - (r / d) * norms[j] * flat[i] / max(norms[i], _NORM_EPS)
            gj = flat[i] / d - (r / d) * norms[i] * flat[j] / max(norms[j], _NORM_EPS)
            grad[i] += lambda_orth * 2.0 * r * gi
            grad[j] += lambda_orth * 2.0 * r * gj
    grad += lambda_sp * np.sign(flat) / flat.size
    return grad.reshape(b.shape)


def matching_loss_and_grad(b: np.ndarray, ops: list[DeformOperator],
                           targets: list[np.ndarray], coeffs: list[np.ndarray],
                           corrs: list[tuple[np.ndarray, np.ndarray]]):
    """Mean fixed-correspondence point-matching loss over pairs and its basis gradient."""
    k = b.shape[0]
    loss = 0.0
    grad = np.zeros_like(b)
    n_pairs = len(ops)
    for op, tgt, z, (fwd, back) in zip(ops, targets, coeffs, corrs):
        w = op.g  # (n, N_t)
        offsets = np.einsum("kna,k->na", b, z)  # cage offsets
        pts = op.p0 + w @ offsets
        r_f = pts - tgt[fwd]
        r_b = pts[back] - tgt
        n_src, n_tgt = len(pts), len(tgt)
        loss += ((r_f**2).sum() / n_src + (r_b**2).sum() / n_tgt) / n_pairs
        # d loss / d offsets, then chain to bases via the outer product with z
        g_off = 2.0 * (w.T @ r_f) / n_src
        g_off += 2.0 * (w[back].T @ r_b) / n_tgt
        grad += np.einsum("na,k->kna", g_off, z) / n_pairs
    return loss, grad


def basis_objective_and_grad(b: np.ndarray, ops, targets, coeffs, corrs,
                             cfg: FitConfig):
    """Regularized matching objective and its analytic gradient w.r.t. bases."""
    loss, grad = matching_loss_and_grad(b, ops, targets, coeffs, corrs)
    l_orth, l_sp = regularizers(BasisSet(b))
    loss += cfg.lambda_orth * l_orth + cfg.lambda_sp * l_sp
    grad = grad + _regularizer_grad(b, cfg.lambda_orth, cfg.lambda_sp)
    return loss, grad


def _solve_bases_matched(ops, targets, coeffs, corrs, k: int, n_t: int,
                         ridge: float = 1e-9) -> np.ndarray:
    """Closed-form least squares for B with coefficients and matches fixed.

    Coordinate axes decouple; the normal matrix is shared across axes:
    sum_pairs (z z^T) kron (G^T G) over both matching directions.
    """
    dim = k * n_t
    m = np.zeros((dim, dim))
    rhs = np.zeros((dim, 3))
    for op, tgt, z, (fwd, back) in zip(ops, targets, coeffs, corrs):
        n_src, n_tgt = op.p0.shape[0], tgt.shape[0]
        zz = np.outer(z, z)
        g = op.g
        gb = g[back]
        gram = g.T @ g / n_src + gb.T @ gb / n_tgt
        m += np.kron(zz, gram)
        r_f = tgt[fwd] - op.p0
        r_b = tgt - op.p0[back]
        gr = g.T @ r_f / n_src + gb.T @ r_b / n_tgt  # (N_t, 3)
        rhs += np.kron(z[:, None], gr)
    m += ridge * np.trace(m) / dim * np.eye(dim) + ridge * np.eye(dim)
    sol = np.linalg.solve(m, rhs)  # (K*N_t, 3)
    return sol.reshape(k, n_t, 3)


@dataclass
class BasisFit:
    bases: BasisSet
    coeffs: list[np.ndarray]
    loss_history: list[float]
    converged: bool


def fit_bases(pairs: list[tuple[TriMesh, TriMesh]], cage: Cage, k: int,
              cfg: FitConfig | None = None,
              init: BasisSet | None = None,
              extra_basis_grad=None) -> BasisFit:
    """Alternating fit of K deformation bases and per-target coefficients.

    All pairs must share the source convex (and thus the cage). Each outer
    iteration fits coefficients by ICP-style Chamfer minimization, solves the
    matched objective for the bases in closed form, then takes gradient steps
    on the regularized objective. ``extra_basis_grad``, when given, is called
    with the current bases and its result is added to the regularizer
    gradient (hook for the physics penalty at fine-tuning time).
    """
    cfg = cfg or FitConfig()
    if not pairs:
        raise ValueError("at least one correspondence pair required")
    if np.abs(cage.phi).max() == 0:
        raise ValueError("degenerate cage: zero interpolation matrix")
    source = pairs[0][0]
    rng = np.random.default_rng(cfg.seed)
    n_t = cage.mesh.n_vertices
    if init is not None:
        b = np.array(init.bases)
        if b.shape != (k, n_t, 3):
            raise ValueError(f"init bases shape {b.shape} != {(k, n_t, 3)}")
    else:
        scale = 0.1 * max(np.ptp(source.vertices, axis=0).max(), 1e-6)
        b = rng.normal(scale=scale, size=(k, n_t, 3))

    ops = [DeformOperator(cage, source, cfg.chamfer_samples, seed=cfg.seed + i)
           for i in range(len(pairs))]
    # targets may be meshes (sampled here) or pre-sampled point arrays
    target_pts = [t if isinstance(t, np.ndarray)
                  else sample_surface(t, cfg.chamfer_samples, seed=cfg.seed + 7919 + i)
                  for i, (_, t) in enumerate(pairs)]

    coeffs = [np.zeros(k) for _ in pairs]
    history: list[float] = []
    converged = False
    for _ in range(cfg.outer_iters):
        fits = [fit_coefficient(BasisSet(b), op, tgt, z0=z)
                for op, tgt, z in zip(ops, target_pts, coeffs)]
        coeffs = [f.z for f in fits]
        corrs = [f.correspondences for f in fits]
        l_c = float(np.mean([f.cd for f in fits]))
        history.append(l_c)
        if len(history) > 1:
            prev = history[-2]
            if prev > 0 and (prev - l_c) / prev < 1e-6:
                converged = True
                break
        b_new = _solve_bases_matched(ops, target_pts, coeffs, corrs, k, n_t)
        # keep the closed-form step only if the regularized objective agrees
        loss_old, _ = basis_objective_and_grad(b, ops, target_pts, coeffs, corrs, cfg)
        loss_new, _ = basis_objective_and_grad(b_new, ops, target_pts, coeffs, corrs, cfg)
        if loss_new <= loss_old:
            b = b_new
        # gradient descent on the full regularized objective
        lr = cfg.reg_lr
        obj, grad = basis_objective_and_grad(b, ops, target_pts, coeffs, corrs, cfg)
        if extra_basis_grad is not None:
            grad = grad + extra_basis_grad(BasisSet(b), coeffs)
        for _ in range(cfg.reg_steps):
            b_try = b - lr * grad
            obj_try, grad_try = basis_objective_and_grad(
                b_try, ops, target_pts, coeffs, corrs, cfg)
            if extra_basis_grad is not None:
                grad_try = grad_try + extra_basis_grad(BasisSet(b_try), coeffs)
            if obj_try < obj:
                b, obj, grad = b_try, obj_try, grad_try
                lr *= 1.2
            else:
                lr *= 0.5
                if lr < 1e-12:
                    break
    else:
        converged = False

    bases = BasisSet(b)
    fits = [fit_coefficient(bases, op, tgt, z0=z)
            for op, tgt, z in zip(ops, target_pts, coeffs)]
    coeffs = [f.z for f in fits]
    history.append(float(np.mean([f.cd for f in fits])))
    return BasisFit(bases=bases, coeffs=coeffs, loss_history=history,
                    converged=converged)


# ---------------------------------------------------------------------------
# Gaussian mixture over coefficients


@dataclass(frozen=True)
class GaussianMixture:
    """Diagonal-covariance mixture; weights sum to 1, variances floored."""

    means: np.ndarray      # (C, K)
    variances: np.ndarray  # (C, K)
    weights: np.ndarray    # (C,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if (np.asarray(self.variances) <= 0).any():
            raise ValueError("variances must be strictly positive")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def to_dict(self) -> dict:
        return {
            "means": np.asarray(self.means).tolist(),
            "variances": np.asarray(self.variances).tolist(),
            "weights": np.asarray(self.weights).tolist(),
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "GaussianMixture":
        return cls(np.array(rec["means"]), np.array(rec["variances"]),
                   np.array(rec["weights"]))


_VAR_FLOOR = 1e-6


def _kmeans(x: np.ndarray, n: int, rng: np.random.Generator, iters: int = 25):
    centers = x[rng.choice(len(x), size=n, replace=False)]
    for _ in range(iters):
        d = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        labels = d.argmin(axis=1)
        new = np.array([x[labels == c].mean(axis=0) if (labels == c).any() else centers[c]
                        for c in range(n)])
        if np.allclose(new, centers):
            break
        centers = new
    return centers, labels


def fit_gmm(coeffs: np.ndarray, n_components: int = 3, seed: int = 0,
            max_iters: int = 100, tol: float = 1e-8) -> GaussianMixture:
    """EM fit of a diagonal Gaussian mixture, k-means initialized."""
    x = np.asarray(coeffs, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("coefficient set must be a non-empty (n, K) array")
    n, k = x.shape
    c = min(n_components, n)
    rng = np.random.default_rng(seed)
    centers, labels = _kmeans(x, c, rng)
    means = centers
    variances = np.empty((c, k))
    weights = np.empty(c)
    for j in range(c):
        mask = labels == j
        weights[j] = max(mask.sum(), 1) / n
        variances[j] = x[mask].var(axis=0) if mask.any() else np.ones(k)
    weights /= weights.sum()
    variances = np.maximum(variances, _VAR_FLOOR)

    prev_ll = -np.inf
    for _ in range(max_iters):
        # E step in log space
        log_p = (
            -0.5 * (((x[:, None, :] - means[None]) ** 2) / variances[None]).sum(axis=2)
            - 0.5 * np.log(2 * np.pi * variances).sum(axis=1)[None]
            + np.log(weights)[None]
        )
        m = log_p.max(axis=1, keepdims=True)
        ll = float((m.squeeze(1) + np.log(np.exp(log_p - m).sum(axis=1))).sum())
        resp = np.exp(log_p - m)
        resp /= resp.sum(axis=1, keepdims=True)
        # M step
        nk = resp.sum(axis=0) + 1e-300
        means = (resp.T @ x) / nk[:, None]
        variances = (resp.T @ (x**2)) / nk[:, None] - means**2
        variances = np.maximum(variances, _VAR_FLOOR)
        weights = nk / nk.sum()
        if abs(ll - prev_ll) < tol:
            break
        prev_ll = ll
    return GaussianMixture(means=means, variances=variances, weights=weights)


def sample_gmm(gmm: GaussianMixture, seed=0, n: int = 1) -> np.ndarray:
    """Draw coefficient vectors; deterministic per seed. Shape (n, K) or (K,)."""
    rng = np.random.default_rng(seed)
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    out = gmm.means[comp] + rng.standard_normal((n, gmm.means.shape[1])) * np.sqrt(
        gmm.variances[comp]
    )
    return out[0] if n == 1 else out

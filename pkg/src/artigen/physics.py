"""Articulation-range simulation, penetration losses and collision correction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .mesh import (
    FIXED,
    PRISMATIC,
    REVOLUTE,
    ArticulatedObject,
    Joint,
    TriMesh,
    merge_meshes,
    rotation_about_axis,
)

_BARY_TOL = 1e-9


@dataclass
class SimConfig:
    n_steps: int = 100
    n_det: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1 or self.n_det < 1:
            raise ValueError("n_steps and n_det must be >= 1")


@dataclass
class ProjConfig:
    iters: int = 10
    eps_proj: float = 1e-5

    def __post_init__(self):
        if self.iters < 0 or self.eps_proj <= 0:
            raise ValueError("iters must be >= 0 and eps_proj > 0")


TRAIN_PROJ = ProjConfig(iters=5, eps_proj=1e-4)
TEST_PROJ = ProjConfig(iters=10, eps_proj=1e-5)


@dataclass
class CollisionReport:
    l_phy: float
    l_proj: float
    breakdown: list[tuple[str, int, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "l_phy": self.l_phy,
            "l_proj": self.l_proj,
            "breakdown": [
                {"part": p, "state_index": i, "pene_d": pd, "proj_d": pj}
                for p, i, pd, pj in self.breakdown
            ],
        }


def face_normals(mesh: TriMesh) -> np.ndarray:
    tri = mesh.vertices[mesh.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norms = np.linalg.norm(cross, axis=1)
    bad = np.nonzero(norms < 1e-15)[0]
    if bad.size:
        raise ValueError(f"degenerate face {int(bad[0])}: zero area")
    return cross / norms[:, None]


def vertex_face_distance(points: np.ndarray, ref: TriMesh,
                         normals: np.ndarray | None = None) -> np.ndarray:
    """Signed distance from each point to every reference face plane."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if normals is None:
        normals = face_normals(ref)
    plane_d = np.einsum("fa,fa->f", ref.vertices[ref.faces[:, 0]], normals)
    return points @ normals.T - plane_d


def vertices_in_faces(points: np.ndarray, ref: TriMesh) -> np.ndarray:
    """True where the plane projection of a point falls inside the triangle."""
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 2
    pts = points[None] if single else points  # (t, nv, 3)
    out = _in_faces_batch(pts, ref)
    return out[0] if single else out


def _face_frames(ref: TriMesh):
    tri = ref.vertices[ref.faces]
    a = tri[:, 0]
    e1 = tri[:, 1] - a
    e2 = tri[:, 2] - a
    d11 = np.einsum("fa,fa->f", e1, e1)
    d12 = np.einsum("fa,fa->f", e1, e2)
    d22 = np.einsum("fa,fa->f", e2, e2)
    den = d11 * d22 - d12 * d12
    den = np.where(np.abs(den) < 1e-300, 1.0, den)
    return a, e1, e2, d11, d12, d22, den


def _in_faces_batch(pts: np.ndarray, ref: TriMesh) -> np.ndarray:
    a, e1, e2, d11, d12, d22, den = _face_frames(ref)
    w1 = np.einsum("tva,fa->tvf", pts, e1) - np.einsum("fa,fa->f", a, e1)
    w2 = np.einsum("tva,fa->tvf", pts, e2) - np.einsum("fa,fa->f", a, e2)
    u = (d22 * w1 - d12 * w2) / den
    v = (d11 * w2 - d12 * w1) / den
    return (u >= -_BARY_TOL) & (v >= -_BARY_TOL) & (u + v <= 1.0 + _BARY_TOL)


def _in_faces_sparse(pts: np.ndarray, ref: TriMesh, fidx: np.ndarray) -> np.ndarray:
    """In-face test for paired (point, face index) rows."""
    a, e1, e2, d11, d12, d22, den = _face_frames(ref)
    w = pts - a[fidx]
    w1 = np.einsum("na,na->n", w, e1[fidx])
    w2 = np.einsum("na,na->n", w, e2[fidx])
    u = (d22[fidx] * w1 - d12[fidx] * w2) / den[fidx]
    v = (d11[fidx] * w2 - d12[fidx] * w1) / den[fidx]
    return (u >= -_BARY_TOL) & (v >= -_BARY_TOL) & (u + v <= 1.0 + _BARY_TOL)


def _step_transforms(joint: Joint, n_steps: int):
    """Rotations and translations for states s_t = l + (u-l) t/N_s, t=0..N_s."""
    lo, hi = joint.range
    states = lo + (hi - lo) * np.arange(n_steps + 1) / n_steps
    if joint.kind == PRISMATIC:
        rots = np.broadcast_to(np.eye(3), (n_steps + 1, 3, 3)).copy()
        trans = states[:, None] * joint.axis
    else:
        k = joint.axis / np.linalg.norm(joint.axis)
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        c, s = np.cos(states), np.sin(states)
        rots = (c[:, None, None] * np.eye(3) + s[:, None, None] * kx
                + (1 - c)[:, None, None] * np.outer(k, k))
        trans = joint.pivot - np.einsum("tab,b->ta", rots, joint.pivot)
    return rots, trans


@dataclass
class SimResult:
    pene: float
    proj: float
    # rest-frame per-vertex gradients computed with the crossing masks frozen
    proj_grad_v: np.ndarray | None = None
    phy_grad_v: np.ndarray | None = None
    mask: np.ndarray | None = None          # (N_s, nv, nf) crossing mask
    # per-face-group losses when the reference stacks equal-size groups
    group_pene: np.ndarray | None = None
    group_proj: np.ndarray | None = None


def single_simulation(mov: TriMesh, ref: TriMesh, joint: Joint, n_steps: int,
                      want_grad: bool = False,
                      n_face_groups: int | None = None) -> SimResult:
    """Sweep the moving part over its joint range against a static reference.

    Implements the stepped signed-depth accumulation: a vertex-face pair
    contributes at the step where the vertex crosses the face plane while
    projecting inside the face. Fixed joints contribute (0, 0). Depth terms
    are clamped at 0 from below so exits never contribute negative depth.

    ``n_face_groups`` splits the reference faces into equal contiguous
    groups and reports each group's own loss (as if simulated alone), which
    lets one call stand in for several equal-topology references.
    """
    zeros = np.zeros((mov.n_vertices, 3)) if want_grad else None
    gzeros = (np.zeros(n_face_groups) if n_face_groups else None)
    if joint.is_fixed:
        return SimResult(0.0, 0.0, proj_grad_v=zeros, phy_grad_v=zeros,
                         group_pene=gzeros, group_proj=gzeros)
    if ref.n_faces == 0 or ref.n_vertices == 0:
        warnings.warn("empty reference mesh: penetration losses are 0")
        return SimResult(0.0, 0.0, proj_grad_v=zeros, phy_grad_v=zeros,
                         group_pene=gzeros, group_proj=gzeros)
    if n_face_groups and ref.n_faces % n_face_groups:
        raise ValueError("reference faces do not split into equal groups")

    normals = face_normals(ref)
    rots, trans = _step_transforms(joint, n_steps)
    # v^0 is the rest pose, not the lower-range pose
    v_all = mov.vertices @ rots[1:].transpose(0, 2, 1) + trans[1:, None, :]
    v_all = np.concatenate([mov.vertices[None], v_all], axis=0)  # (N_s+1, nv, 3)
    plane_d = np.einsum("fa,fa->f", ref.vertices[ref.faces[:, 0]], normals)
    nv, nf = mov.n_vertices, ref.n_faces
    d_all = (v_all.reshape(-1, 3) @ normals.T).reshape(len(v_all), nv, nf)
    d_all -= plane_d
    s_all = np.sign(d_all)
    scale = 1.0 / (n_steps * nv * nf)

    # sign flips are sparse; evaluate the in-face test only at flip triples
    ti, vi, fi = np.nonzero(s_all[1:] != s_all[:-1])
    if ti.size:
        inside = _in_faces_sparse(v_all[ti + 1, vi], ref, fi)
        ti, vi, fi = ti[inside], vi[inside], fi[inside]

    proj_grad_v = phy_grad_v = mask_out = None
    if want_grad:
        proj_grad_v = np.zeros((nv, 3))
        phy_grad_v = np.zeros((nv, 3))
        mask_out = np.zeros((n_steps, nv, nf), dtype=bool)
    if ti.size == 0:
        return SimResult(0.0, 0.0, proj_grad_v=proj_grad_v,
                         phy_grad_v=phy_grad_v, mask=mask_out,
                         group_pene=gzeros, group_proj=gzeros)

    d = d_all[ti + 1, vi, fi]
    s = s_all[ti + 1, vi, fi]
    pene_terms = np.clip(d * s, 0.0, None)
    pene = float(pene_terms.sum() * scale)
    dv = v_all[ti + 1, vi] - v_all[ti, vi]          # step displacement per triple
    n_rows = normals[fi]
    dv_n = np.einsum("na,na->n", dv, n_rows)
    proj_terms = dv_n * d
    proj = float(proj_terms.sum() * scale)

    group_pene = group_proj = None
    if n_face_groups:
        gsize = nf // n_face_groups
        gscale = scale * n_face_groups     # per-group loss uses its own nf
        gi = fi // gsize
        group_pene = np.bincount(gi, pene_terms, n_face_groups) * gscale
        group_proj = np.bincount(gi, proj_terms, n_face_groups) * gscale

    if want_grad:
        mask_out[ti, vi, fi] = True
        # displacement term: d dV_t / d V_rest = R_t - R_{t-1}
        d_rot = rots[1:] - rots[:-1]
        term1 = np.einsum("nab,na->nb", d_rot[ti], d[:, None] * n_rows)
        # depth term: d d_t / d V_rest = R_t^T N
        term2 = np.einsum("nab,na->nb", rots[ti + 1], dv_n[:, None] * n_rows)
        np.add.at(proj_grad_v, vi, scale * (term1 + term2))
        live = (d * s) > 0
        phy_rows = np.einsum("nab,na->nb", rots[ti + 1],
                             (live * s)[:, None] * n_rows)
        np.add.at(phy_grad_v, vi, scale * phy_rows)
    return SimResult(pene, proj, proj_grad_v=proj_grad_v, phy_grad_v=phy_grad_v,
                     mask=mask_out, group_pene=group_pene, group_proj=group_proj)


def frozen_proj_loss(v_rest: np.ndarray, ref: TriMesh, joint: Joint,
                     n_steps: int, mask: np.ndarray) -> float:
    """Projection loss evaluated with a fixed crossing mask.

    Displacements and depths are recomputed from ``v_rest``; only the mask is
    held at the reference run's value, which makes the loss differentiable.
    """
    v_rest = np.asarray(v_rest, dtype=np.float64)
    normals = face_normals(ref)
    rots, trans = _step_transforms(joint, n_steps)
    v_all = np.einsum("tab,vb->tva", rots[1:], v_rest) + trans[1:, None, :]
    v_all = np.concatenate([v_rest[None], v_all], axis=0)
    plane_d = np.einsum("fa,fa->f", ref.vertices[ref.faces[:, 0]], normals)
    d_all = np.einsum("tva,fa->tvf", v_all, normals) - plane_d
    dv = v_all[1:] - v_all[:-1]
    w = mask * d_all[1:]
    per_vertex = np.einsum("tvf,fa->tva", w, normals)
    nv, nf = v_rest.shape[0], ref.n_faces
    return float(np.einsum("tva,tva->", dv, per_vertex) / (n_steps * nv * nf))


# ---------------------------------------------------------------------------
# Deformable objects: vertices affine in the global coefficient


@dataclass
class DeformablePart:
    """One part whose merged vertices are v(z) = v0 + J z."""

    name: str
    v0: np.ndarray                 # (nv, 3)
    jac: np.ndarray                # (nv, 3, K)
    faces: np.ndarray
    joint: Joint
    ref_states: tuple[float, ...] = ()
    convex_slices: list[tuple[int, int]] = field(default_factory=list)
    convex_faces: list[np.ndarray] = field(default_factory=list)

    def mesh_at(self, z: np.ndarray) -> TriMesh:
        return TriMesh(self.v0 + self.jac @ np.asarray(z, dtype=np.float64),
                       self.faces)

    def convex_meshes_at(self, z: np.ndarray) -> list[TriMesh]:
        v = self.v0 + self.jac @ np.asarray(z, dtype=np.float64)
        return [TriMesh(v[a:b], f) for (a, b), f in
                zip(self.convex_slices, self.convex_faces)]


@dataclass
class DeformableObject:
    parts: list[DeformablePart]
    k: int

    def to_object(self, z: np.ndarray) -> ArticulatedObject:
        from .mesh import ArticulationState, Part

        parts = [
            Part(name=p.name, convexes=tuple(p.convex_meshes_at(z)),
                 joint=p.joint, ref_states=p.ref_states)
            for p in self.parts
        ]
        return ArticulatedObject(parts=tuple(parts))


def rigid_part(name: str, mesh: TriMesh, joint: Joint, k: int,
               ref_states=()) -> DeformablePart:
    """A part that ignores z (zero Jacobian); useful for fixtures."""
    return DeformablePart(
        name=name, v0=np.array(mesh.vertices), jac=np.zeros((mesh.n_vertices, 3, k)),
        faces=np.array(mesh.faces), joint=joint, ref_states=tuple(ref_states),
        convex_slices=[(0, mesh.n_vertices)], convex_faces=[np.array(mesh.faces)],
    )


# ---------------------------------------------------------------------------
# Alg. 4 driver


def _sample_ref_states(parts, mover_idx: int, rng) -> dict[int, float]:
    states = {}
    for j, part in enumerate(parts):
        if j == mover_idx:
            continue
        if part.joint.is_fixed:
            states[j] = 0.0
            continue
        if part.ref_states:
            states[j] = float(rng.choice(np.asarray(part.ref_states)))
        else:
            lo, hi = part.joint.range
            states[j] = float(rng.uniform(lo, hi))
    return states


def _articulated_ref_mesh(parts_meshes, parts, mover_idx, states) -> TriMesh:
    from .mesh import articulate

    pieces = []
    for j, (mesh, part) in enumerate(zip(parts_meshes, parts)):
        if j == mover_idx:
            continue
        pieces.append(articulate(mesh, part.joint, states[j]))
    return merge_meshes(pieces)


def _run_losses(parts, part_meshes, cfg: SimConfig, want_grad: bool = False):
    """Shared Alg. 4 loop over (part, detection process) pairs."""
    breakdown = []
    penes, projs = [], []
    grads = [SimResult(0.0, 0.0,
                       proj_grad_v=np.zeros((m.n_vertices, 3)),
                       phy_grad_v=np.zeros((m.n_vertices, 3)))
             for m in part_meshes] if want_grad else None
    for i, (part, mesh) in enumerate(zip(parts, part_meshes)):
        if len(parts) > 1:
            # every detection process shares the mover trajectory and has an
            # equal-topology reference, so one stacked simulation covers all
            refs = []
            for det in range(cfg.n_det):
                rng = np.random.default_rng([cfg.seed, i, det])
                states = _sample_ref_states(parts, i, rng)
                refs.append(_articulated_ref_mesh(part_meshes, parts, i, states))
            res = single_simulation(mesh, merge_meshes(refs), part.joint,
                                    cfg.n_steps, want_grad=want_grad,
                                    n_face_groups=cfg.n_det)
            det_pene, det_proj = res.group_pene, res.group_proj
        else:
            res = SimResult(0.0, 0.0,
                            proj_grad_v=np.zeros((mesh.n_vertices, 3)),
                            phy_grad_v=np.zeros((mesh.n_vertices, 3)))
            det_pene = det_proj = np.zeros(cfg.n_det)
        penes.extend(det_pene)
        projs.extend(det_proj)
        for det in range(cfg.n_det):
            breakdown.append((part.name, det, float(det_pene[det]),
                              float(det_proj[det])))
        if want_grad:
            # the stacked gradient already averages over detections
            grads[i].proj_grad_v += res.proj_grad_v * cfg.n_det
            grads[i].phy_grad_v += res.phy_grad_v * cfg.n_det
    n = len(penes)
    report = CollisionReport(float(np.mean(penes)), float(np.mean(projs)), breakdown)
    if want_grad:
        for g in grads:
            g.proj_grad_v /= n
            g.phy_grad_v /= n
    return report, grads


def physics_losses(obj: ArticulatedObject, cfg: SimConfig) -> CollisionReport:
    """Average penetration and projection losses over all single simulations."""
    part_meshes = [p.merged() for p in obj.parts]
    report, _ = _run_losses(obj.parts, part_meshes, cfg)
    return report


def physics_losses_z(dobj: DeformableObject, z: np.ndarray,
                     cfg: SimConfig) -> CollisionReport:
    part_meshes = [p.mesh_at(z) for p in dobj.parts]
    report, _ = _run_losses(dobj.parts, part_meshes, cfg)
    return report


def grad_proj_wrt_z(dobj: DeformableObject, z: np.ndarray,
                    cfg: SimConfig) -> tuple[float, np.ndarray]:
    """Projection loss and its gradient with masks/depths/normals frozen.

    The gradient flows only through the per-step displacement of the moving
    part, which is affine in z.
    """
    part_meshes = [p.mesh_at(z) for p in dobj.parts]
    report, grads = _run_losses(dobj.parts, part_meshes, cfg, want_grad=True)
    grad = np.zeros(dobj.k)
    for part, g in zip(dobj.parts, grads):
        grad += np.einsum("va,vak->k", g.proj_grad_v, part.jac)
    return report.l_proj, grad


def grad_phy_wrt_vertices(dobj: DeformableObject, z: np.ndarray,
                          cfg: SimConfig) -> tuple[float, list[np.ndarray]]:
    """Penetration loss and frozen-mask rest-frame vertex gradients per part."""
    part_meshes = [p.mesh_at(z) for p in dobj.parts]
    report, grads = _run_losses(dobj.parts, part_meshes, cfg, want_grad=True)
    return report.l_phy, [g.phy_grad_v for g in grads]


def correct_shape(dobj: DeformableObject, z: np.ndarray, proj_cfg: ProjConfig,
                  sim_cfg: SimConfig):
    """Descend the projection loss in z; returns (z', report before, report after)."""
    z = np.array(z, dtype=np.float64)
    before = None
    for it in range(proj_cfg.iters):
        part_meshes = [p.mesh_at(z) for p in dobj.parts]
        report, grads = _run_losses(dobj.parts, part_meshes, sim_cfg,
                                    want_grad=True)
        if it == 0:
            before = report          # gradient pass already evaluates at z
        grad = np.zeros(dobj.k)
        for part, g in zip(dobj.parts, grads):
            grad += np.einsum("va,vak->k", g.proj_grad_v, part.jac)
        if not np.isfinite(grad).all():
            raise FloatingPointError("non-finite projection gradient")
        z = z - proj_cfg.eps_proj * grad
    if before is None:
        before = physics_losses_z(dobj, z, sim_cfg)
    after = physics_losses_z(dobj, z, sim_cfg) if proj_cfg.iters else before
    return z, before, after

"""End-to-end orchestration: fitting, synchronization, sampling, evaluation."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .basis import (
    BasisSet,
    FitConfig,
    GaussianMixture,
    fit_bases,
    fit_gmm,
    sample_gmm,
)
from .cage import Cage, CageCache, build_cage, smooth_weights
from .mesh import ArticulatedObject, TriMesh, load_manifest, merge_meshes, save_obj
from .physics import (
    DeformableObject,
    DeformablePart,
    ProjConfig,
    SimConfig,
    TEST_PROJ,
    TRAIN_PROJ,
    correct_shape,
    grad_phy_wrt_vertices,
)
from .sync import SyncState, synced_bases, synchronize


class PipelineError(ValueError):
    pass


@dataclass
class PipelineConfig:
    k: int = 16
    shots: int = 5
    n_samples_per_reference: int = 40
    sync_iters: int = 100
    gmm_components: int = 3
    lambda_phy: float = 1.0
    finetune_outer_iters: int = 10
    blend_radius_rel: float = 0.05   # smooth-layer radius as a bbox-diagonal fraction
    eval_points: int = 4096
    epsilon: float = 0.05
    seed: int = 0
    jobs: int = 1
    fit: FitConfig = field(default_factory=FitConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    proj_train: ProjConfig = field(default_factory=lambda: replace(TRAIN_PROJ))
    proj_test: ProjConfig = field(default_factory=lambda: replace(TEST_PROJ))


def desk_profile(cfg: PipelineConfig | None = None) -> PipelineConfig:
    """Reduced-cost settings for interactive runs and CI."""
    cfg = cfg or PipelineConfig()
    cfg.sim = SimConfig(n_steps=20, n_det=10, seed=cfg.sim.seed)
    cfg.fit = replace(cfg.fit, chamfer_samples=512)
    cfg.eval_points = 512
    return cfg


def paper_profile(cfg: PipelineConfig | None = None) -> PipelineConfig:
    return cfg or PipelineConfig()


def apply_overrides(cfg: PipelineConfig, rec: dict) -> PipelineConfig:
    """Apply a flat/nested dict of overrides loaded from a config file."""
    for key, val in rec.items():
        if key == "fit":
            cfg.fit = replace(cfg.fit, **val)
        elif key == "sim":
            cfg.sim = replace(cfg.sim, **val)
        elif key == "proj_train":
            cfg.proj_train = replace(cfg.proj_train, **val)
        elif key == "proj_test":
            cfg.proj_test = replace(cfg.proj_test, **val)
        elif hasattr(cfg, key):
            setattr(cfg, key, val)
        else:
            raise PipelineError(f"unknown config key {key!r}")
    return cfg


# ---------------------------------------------------------------------------
# Dataset manifests


@dataclass
class Dataset:
    objects: list[ArticulatedObject]
    paths: list[str]
    role: str = "pretrain"


def load_dataset(path) -> Dataset:
    """A dataset manifest is a JSON list of object manifests plus a role."""
    path = Path(path)
    rec = json.loads(path.read_text())
    if "objects" not in rec or not rec["objects"]:
        raise PipelineError(f"{path}: dataset manifest lists no objects")
    objs, names = [], []
    for entry in rec["objects"]:
        p = path.parent / entry
        objs.append(load_manifest(p))
        names.append(str(entry))
    ds = Dataset(objects=objs, paths=names, role=rec.get("role", "pretrain"))
    check_correspondence(ds)
    return ds


def check_correspondence(ds: Dataset) -> None:
    """All objects must share part count, joint kinds, and convex counts."""
    ref = ds.objects[0]
    for name, obj in zip(ds.paths[1:], ds.objects[1:]):
        if len(obj.parts) != len(ref.parts):
            raise PipelineError(
                f"object {name!r} has {len(obj.parts)} parts, expected {len(ref.parts)}"
            )
        for rp, op in zip(ref.parts, obj.parts):
            if op.joint.kind != rp.joint.kind:
                raise PipelineError(
                    f"object {name!r} part {op.name!r}: joint kind "
                    f"{op.joint.kind!r} != {rp.joint.kind!r}"
                )
            if len(op.convexes) != len(rp.convexes):
                raise PipelineError(
                    f"object {name!r} part {op.name!r}: {len(op.convexes)} "
                    f"convexes, expected {len(rp.convexes)}"
                )


def _flat_convexes(obj: ArticulatedObject) -> list[tuple[int, int, TriMesh]]:
    """(part index, index within part, convex) in manifest order."""
    out = []
    for pi, part in enumerate(obj.parts):
        for ci, convex in enumerate(part.convexes):
            out.append((pi, ci, convex))
    return out


# ---------------------------------------------------------------------------
# Model file


@dataclass
class ConvexModel:
    part_index: int
    convex_index: int
    cage: Cage
    bases: BasisSet
    coeffs: np.ndarray      # (|A|, K) per-convex coefficients, pre-sync
    loss_history: list[float]
    converged: bool


@dataclass
class Model:
    k: int
    epsilon: float
    convexes: list[ConvexModel]
    sync: SyncState | None = None
    gmm: GaussianMixture | None = None
    source_manifest: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "epsilon": self.epsilon,
            "source_manifest": self.source_manifest,
            "seed": self.seed,
            "convexes": [
                {
                    "part_index": c.part_index,
                    "convex_index": c.convex_index,
                    "cage_vertices": c.cage.mesh.vertices.tolist(),
                    "cage_faces": c.cage.mesh.faces.tolist(),
                    "cage_phi": c.cage.phi.tolist(),
                    "bases": c.bases.bases.tolist(),
                    "coeffs": np.asarray(c.coeffs).tolist(),
                    "loss_history": list(c.loss_history),
                    "converged": c.converged,
                }
                for c in self.convexes
            ],
            "sync": self.sync.to_dict() if self.sync else None,
            "gmm": self.gmm.to_dict() if self.gmm else None,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "Model":
        convexes = [
            ConvexModel(
                part_index=c["part_index"],
                convex_index=c["convex_index"],
                cage=Cage(
                    mesh=TriMesh(np.array(c["cage_vertices"]),
                                 np.array(c["cage_faces"])),
                    phi=np.array(c["cage_phi"]),
                ),
                bases=BasisSet(np.array(c["bases"])),
                coeffs=np.array(c["coeffs"]),
                loss_history=list(c["loss_history"]),
                converged=bool(c["converged"]),
            )
            for c in rec["convexes"]
        ]
        return cls(
            k=rec["k"], epsilon=rec["epsilon"], convexes=convexes,
            sync=SyncState.from_dict(rec["sync"]) if rec.get("sync") else None,
            gmm=GaussianMixture.from_dict(rec["gmm"]) if rec.get("gmm") else None,
            source_manifest=rec.get("source_manifest", ""),
            seed=rec.get("seed", 0),
        )


def save_model(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path) -> Model:
    return Model.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Deformable synthesis


def _object_blend_radius(obj: ArticulatedObject, rel: float) -> float:
    verts = np.concatenate([m.vertices for p in obj.parts for m in p.convexes])
    return rel * float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))


def build_deformable(model: Model, source: ArticulatedObject,
                     blend_radius: float | None = None,
                     blend_radius_rel: float = 0.05,
                     use_sync: bool = True,
                     cages: list[Cage] | None = None) -> DeformableObject:
    """Assemble the affine-in-z object: synced bases -> cages -> smooth layer.

    With ``use_sync`` the global coefficient (length K) drives every convex
    through its synchronization matrix; otherwise the coefficient is the
    stacked per-convex vector (length M*K) and each convex only responds to
    its own block. Basis offsets index template cage vertices, so when
    ``cages`` is not given they are rebuilt for this object's convexes; the
    model's own cages are only reused when the object is the fitting source.
    """
    flat = _flat_convexes(source)
    if len(flat) != len(model.convexes):
        raise PipelineError(
            f"model has {len(model.convexes)} convexes, object has {len(flat)}"
        )
    if cages is None:
        cages = [build_cage(convex, epsilon=model.epsilon)
                 for _, _, convex in flat]
    m_total = len(flat)
    k = model.k
    if use_sync:
        if model.sync is None:
            raise PipelineError("model has no synchronization state")
        eff = [BasisSet(synced_bases(c.bases, s))
               for c, s in zip(model.convexes, model.sync.s_matrices)]
        k_total = k
    else:
        eff = [c.bases for c in model.convexes]
        k_total = m_total * k
    if blend_radius is None:
        blend_radius = _object_blend_radius(source, blend_radius_rel)

    parts = []
    flat_idx = 0
    for pi, part in enumerate(source.parts):
        convexes = list(part.convexes)
        idxs = list(range(flat_idx, flat_idx + len(convexes)))
        flat_idx += len(convexes)
        part_cages = [cages[i] for i in idxs]
        weights = smooth_weights(part_cages, convexes, blend_radius)
        v0_blocks, jac_blocks, slices, faces_list = [], [], [], []
        offset = 0
        for local, (convex, gi) in enumerate(zip(convexes, idxs)):
            nv = convex.n_vertices
            jac = np.zeros((nv, 3, k_total))
            for other_local, other_gi in enumerate(idxs):
                w = weights[local][other_local]          # (nv, N_t)
                b = eff[other_gi].bases                   # (K, N_t, 3)
                block = np.einsum("vt,jta->vaj", w, b)
                if use_sync:
                    jac += block
                else:
                    jac[:, :, other_gi * k:(other_gi + 1) * k] += block
            v0_blocks.append(convex.vertices)
            jac_blocks.append(jac)
            slices.append((offset, offset + nv))
            faces_list.append(np.array(convex.faces))
            offset += nv
        merged = merge_meshes(convexes)
        parts.append(DeformablePart(
            name=part.name, v0=np.concatenate(v0_blocks),
            jac=np.concatenate(jac_blocks), faces=np.array(merged.faces),
            joint=part.joint, ref_states=part.ref_states,
            convex_slices=slices, convex_faces=faces_list,
        ))
    return DeformableObject(parts=parts, k=k_total)


def stack_coeffs(model: Model, target_index: int) -> np.ndarray:
    """Concatenate every convex's coefficient for one target into one vector."""
    return np.concatenate([np.asarray(c.coeffs)[target_index]
                           for c in model.convexes])


def unstack_coeffs(z: np.ndarray, m_total: int, k: int) -> list[np.ndarray]:
    return [z[m * k:(m + 1) * k] for m in range(m_total)]


# ---------------------------------------------------------------------------
# Pretraining


def _fit_one_convex(args):
    (pi, ci, source_convex, targets, cage, k, fit_cfg, init, hook) = args
    pairs = [(source_convex, t) for t in targets]
    fit = fit_bases(pairs, cage, k, cfg=fit_cfg, init=init, extra_basis_grad=hook)
    return ConvexModel(
        part_index=pi, convex_index=ci, cage=cage, bases=fit.bases,
        coeffs=np.stack(fit.coeffs), loss_history=fit.loss_history,
        converged=fit.converged,
    )


def cmd_pretrain(dataset_path, out_path, cfg: PipelineConfig,
                 cache_dir=None) -> Model:
    """Fit per-convex deformation bases on all correspondence pairs."""
    ds = load_dataset(dataset_path)
    if len(ds.objects) < 2:
        raise PipelineError("pretraining needs at least 2 corresponding objects")
    source, targets = ds.objects[0], ds.objects[1:]
    cache = CageCache(cache_dir) if cache_dir else None

    jobs = []
    for pi, ci, convex in _flat_convexes(source):
        cage = (cache.get_or_build(convex, cfg.epsilon) if cache
                else build_cage(convex, epsilon=cfg.epsilon))
        tgt = [t.parts[pi].convexes[ci] for t in targets]
        fit_cfg = replace(cfg.fit, seed=cfg.seed + 31 * (pi * 97 + ci))
        jobs.append((pi, ci, convex, tgt, cage, cfg.k, fit_cfg, None, None))

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            convexes = list(pool.map(_fit_one_convex, jobs))
    else:
        convexes = [_fit_one_convex(j) for j in jobs]

    model = Model(k=cfg.k, epsilon=cfg.epsilon, convexes=convexes,
                  source_manifest=ds.paths[0], seed=cfg.seed)
    save_model(model, out_path)
    return model


# ---------------------------------------------------------------------------
# Fine-tuning


def _phy_basis_grads(model: Model, dobj: DeformableObject,
                     n_targets: int, cfg: PipelineConfig) -> list[np.ndarray]:
    """Frozen-mask d(lambda_phy * L_phy)/dB per convex, averaged over targets.

    The penetration loss's rest-frame vertex gradient is computed once per
    target and pulled back through each convex's interpolation weights and
    its per-target coefficient.
    """
    k = model.k
    grads = [np.zeros((k, cm.cage.phi.shape[1], 3)) for cm in model.convexes]
    for i in range(n_targets):
        z = stack_coeffs(model, i)
        _, part_grads = grad_phy_wrt_vertices(dobj, z, cfg.sim)
        for m, cm in enumerate(model.convexes):
            g = part_grads[cm.part_index]
            a, b = dobj.parts[cm.part_index].convex_slices[cm.convex_index]
            pull = cm.cage.phi.T @ g[a:b]      # (N_t, 3)
            grads[m] += np.einsum("j,ta->jta",
                                  np.asarray(cm.coeffs)[i], pull)
    return [cfg.lambda_phy * g / max(n_targets, 1) for g in grads]


def cmd_finetune(dataset_path, out_path, cfg: PipelineConfig,
                 pretrained_path=None, cache_dir=None) -> Model:
    """Continue basis optimization with collision terms, then synchronize.

    Each outer iteration runs the train-time correction on the stacked
    per-convex coefficients, freezes the collision gradient for the basis
    update, and refits every convex for one alternation round. Ends with
    synchronization and a Gaussian mixture over the global coefficients.
    """
    ds = load_dataset(dataset_path)
    if len(ds.objects) < 2:
        raise PipelineError("finetuning needs at least 2 corresponding objects")
    source, targets = ds.objects[0], ds.objects[1:]
    n_targets = len(targets)
    cache = CageCache(cache_dir) if cache_dir else None

    pre = load_model(pretrained_path) if pretrained_path else None
    flat = _flat_convexes(source)
    if pre is not None and len(pre.convexes) != len(flat):
        raise PipelineError(
            f"pretrained model has {len(pre.convexes)} convexes, "
            f"object has {len(flat)}"
        )

    convexes: list[ConvexModel] = []
    for fi, (pi, ci, convex) in enumerate(flat):
        if pre is not None:
            cage, init = pre.convexes[fi].cage, pre.convexes[fi].bases
        else:
            cage = (cache.get_or_build(convex, cfg.epsilon) if cache
                    else build_cage(convex, epsilon=cfg.epsilon))
            init = None
        convexes.append(ConvexModel(
            part_index=pi, convex_index=ci, cage=cage,
            bases=init if init is not None else BasisSet(
                np.random.default_rng(cfg.seed + fi).normal(
                    scale=0.1 * max(np.ptp(convex.vertices), 1e-6),
                    size=(cfg.k, cage.mesh.n_vertices, 3))),
            coeffs=np.zeros((n_targets, cfg.k)), loss_history=[],
            converged=False,
        ))
    model = Model(k=cfg.k, epsilon=cfg.epsilon, convexes=convexes,
                  source_manifest=ds.paths[0], seed=cfg.seed)

    one_round = replace(cfg.fit, outer_iters=1)
    multi_part = len(source.parts) > 1
    lc_history: list[float] = []
    for outer in range(cfg.finetune_outer_iters):
        phy_grads = None
        if cfg.lambda_phy > 0 and multi_part:
            # train-time correction on the stacked coefficients, per target
            dobj = build_deformable(model, source, blend_radius=0.0,
                                    use_sync=False,
                                    cages=[c.cage for c in model.convexes])
            for i in range(n_targets):
                z, _, _ = correct_shape(dobj, stack_coeffs(model, i),
                                        cfg.proj_train, cfg.sim)
                for m, zm in enumerate(unstack_coeffs(z, len(flat), cfg.k)):
                    model.convexes[m].coeffs[i] = zm
            phy_grads = _phy_basis_grads(model, dobj, n_targets, cfg)

        round_losses = []
        for fi, (pi, ci, convex) in enumerate(flat):
            cm = model.convexes[fi]
            hook = None
            if phy_grads is not None:
                hook = lambda bases, coeffs, g=phy_grads[fi]: g
            pairs = [(convex, t.parts[pi].convexes[ci]) for t in targets]
            fit_cfg = replace(one_round, seed=cfg.seed + 31 * (pi * 97 + ci))
            fit = fit_bases(pairs, cm.cage, cfg.k, cfg=fit_cfg,
                            init=cm.bases, extra_basis_grad=hook)
            cm.bases = fit.bases
            cm.coeffs = np.stack(fit.coeffs)
            cm.loss_history.extend(fit.loss_history)
            round_losses.append(fit.loss_history[-1])
        lc = float(np.mean(round_losses))
        lc_history.append(lc)
        if len(lc_history) > 1 and lc_history[-2] > 0:
            if (lc_history[-2] - lc) / lc_history[-2] < 1e-6:
                break

    y = np.stack([np.asarray(c.coeffs) for c in model.convexes])  # (M, |A|, K)
    model.sync = synchronize([c.bases for c in model.convexes], y,
                             iters=cfg.sync_iters)
    model.gmm = fit_gmm(model.sync.global_coeffs,
                        n_components=cfg.gmm_components, seed=cfg.seed)
    save_model(model, out_path)
    return model


# ---------------------------------------------------------------------------
# Sampling and correction


def cmd_sample(model_path, reference_path, out_dir, cfg: PipelineConfig,
               n: int | None = None, seed: int | None = None,
               z_zero: bool = False) -> dict:
    """Draw coefficients, synthesize meshes, apply test-time correction."""
    model = load_model(model_path)
    reference = load_manifest(reference_path)
    if model.gmm is None or model.sync is None:
        raise PipelineError("model is not fine-tuned (missing sync/GMM state)")
    n = n if n is not None else cfg.n_samples_per_reference
    seed = seed if seed is not None else cfg.seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    dobj = build_deformable(model, reference,
                            blend_radius_rel=cfg.blend_radius_rel)
    if z_zero:
        zs = np.zeros((n, model.k))
    else:
        zs = sample_gmm(model.gmm, seed=seed, n=n)
    multi_part = len(reference.parts) > 1

    samples = []
    for i in range(n):
        if multi_part:
            z, before, after = correct_shape(dobj, zs[i], cfg.proj_test, cfg.sim)
            apd_before, apd_after = before.l_phy, after.l_phy
        else:
            z, apd_before, apd_after = zs[i], 0.0, 0.0
        obj = dobj.to_object(z)
        path = out_dir / f"sample_{i:03d}.obj"
        save_obj(merge_meshes([p.merged() for p in obj.parts]), path)
        samples.append({"file": path.name, "z": np.asarray(z).tolist(),
                        "apd_before": apd_before, "apd_after": apd_after})
    report = {
        "n": n, "seed": seed, "z_zero": z_zero,
        "mean_apd_before": float(np.mean([s["apd_before"] for s in samples])),
        "mean_apd_after": float(np.mean([s["apd_after"] for s in samples])),
        "samples": samples,
    }
    (out_dir / "samples_report.json").write_text(json.dumps(report, indent=2))
    return report


def cmd_correct(model_path, reference_path, cfg: PipelineConfig,
                z: np.ndarray | None = None, out_path=None) -> dict:
    """Run the test-time correction on one coefficient and report both losses."""
    model = load_model(model_path)
    reference = load_manifest(reference_path)
    if model.sync is None:
        raise PipelineError("model is not fine-tuned (missing sync state)")
    dobj = build_deformable(model, reference,
                            blend_radius_rel=cfg.blend_radius_rel)
    if z is None:
        z = model.gmm.mean() if model.gmm else np.zeros(model.k)
    z_new, before, after = correct_shape(dobj, z, cfg.proj_test, cfg.sim)
    if out_path:
        obj = dobj.to_object(z_new)
        save_obj(merge_meshes([p.merged() for p in obj.parts]), out_path)
    return {"z": np.asarray(z_new).tolist(), "before": before.to_dict(),
            "after": after.to_dict()}


def cmd_simulate(manifest_path, cfg: PipelineConfig) -> dict:
    from .physics import physics_losses

    obj = load_manifest(manifest_path)
    return physics_losses(obj, cfg.sim).to_dict()


# ---------------------------------------------------------------------------
# Evaluation


def _load_generated(gen_dir) -> tuple[list[TriMesh], float | None]:
    gen_dir = Path(gen_dir)
    from .mesh import load_obj

    files = sorted(gen_dir.glob("*.obj"))
    if not files:
        raise PipelineError(f"no .obj files in {gen_dir}")
    meshes = [load_obj(f) for f in files]
    apd = None
    report = gen_dir / "samples_report.json"
    if report.exists():
        apd = float(json.loads(report.read_text())["mean_apd_after"])
    return meshes, apd


def cmd_eval(generated_dir, reference_dataset_path, cfg: PipelineConfig) -> dict:
    """Point-sample both populations and compute the distribution metrics."""
    from .mesh import sample_surface
    from .metrics import evaluate

    gen_meshes, apd = _load_generated(generated_dir)
    ds = load_dataset(reference_dataset_path)
    ref_meshes = [merge_meshes([p.merged() for p in o.parts]) for o in ds.objects]

    def _cloud(args):
        i, m = args
        return sample_surface(m, cfg.eval_points, seed=cfg.seed + i)

    # seed by position within each set so identical populations get
    # identical clouds
    items = list(enumerate(gen_meshes)) + list(enumerate(ref_meshes))
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            clouds = list(pool.map(_cloud, items))
    else:
        clouds = [_cloud(it) for it in items]
    gen = clouds[: len(gen_meshes)]
    ref = clouds[len(gen_meshes):]
    result = evaluate(gen, ref, apd_value=apd)
    return {"metrics": result.to_dict(), "table": result.table()}

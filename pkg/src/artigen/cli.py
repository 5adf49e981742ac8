"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .pipeline import PipelineConfig, apply_overrides, desk_profile


def _load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        import tomllib

        return tomllib.loads(text)
    return json.loads(text)


def _build_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.profile == "desk":
        cfg = desk_profile(cfg)
    if args.config:
        cfg = apply_overrides(cfg, _load_config_file(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.sim.seed = args.seed
    cfg.jobs = args.jobs
    return cfg


def _write_provenance(run_dir, args, cfg: PipelineConfig, extra=None) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    rec = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": cfg.seed,
        "profile": args.profile,
        "jobs": cfg.jobs,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": {
            "k": cfg.k, "shots": cfg.shots,
            "n_samples_per_reference": cfg.n_samples_per_reference,
            "sync_iters": cfg.sync_iters, "lambda_phy": cfg.lambda_phy,
            "epsilon": cfg.epsilon, "eval_points": cfg.eval_points,
            "sim": {"n_steps": cfg.sim.n_steps, "n_det": cfg.sim.n_det},
            "proj_train": {"iters": cfg.proj_train.iters,
                           "eps_proj": cfg.proj_train.eps_proj},
            "proj_test": {"iters": cfg.proj_test.iters,
                          "eps_proj": cfg.proj_test.eps_proj},
        },
    }
    if extra:
        rec.update(extra)
    (run_dir / "run.json").write_text(json.dumps(rec, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="artigen",
        description="Few-shot articulated mesh generation via cage deformation",
    )
    parser.add_argument("--config", help="JSON or TOML config override file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--profile", choices=("paper", "desk"), default="paper")
    parser.add_argument("--jobs", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="fit per-convex deformation bases")
    p.add_argument("dataset", help="dataset manifest JSON")
    p.add_argument("out", help="output run directory")

    p = sub.add_parser("finetune", help="adapt bases, synchronize, fit sampler")
    p.add_argument("dataset")
    p.add_argument("out")
    p.add_argument("--pretrained", help="model.json from pretrain (optional)")
    p.add_argument("--lambda-phy", type=float, default=None)

    p = sub.add_parser("sample", help="generate corrected mesh samples")
    p.add_argument("model")
    p.add_argument("reference", help="reference object manifest")
    p.add_argument("out")
    p.add_argument("-n", type=int, default=None)
    p.add_argument("--z-zero", action="store_true",
                   help="force zero coefficients (identity deformation)")

    p = sub.add_parser("simulate", help="collision losses for one object")
    p.add_argument("manifest")
    p.add_argument("out")

    p = sub.add_parser("eval", help="distribution metrics for generated meshes")
    p.add_argument("generated", help="directory of .obj samples")
    p.add_argument("reference", help="reference dataset manifest")
    p.add_argument("out")

    p = sub.add_parser("correct", help="run test-time correction on one shape")
    p.add_argument("model")
    p.add_argument("reference")
    p.add_argument("out")
    p.add_argument("--z-file", help="JSON file with a coefficient vector")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _build_config(args)

    if args.command == "pretrain":
        out = Path(args.out)
        _write_provenance(out, args, cfg, {"dataset": args.dataset})
        model = pipeline.cmd_pretrain(args.dataset, out / "model.json", cfg,
                                      cache_dir=out / "cages")
        print(f"pretrained {len(model.convexes)} convex bases -> {out/'model.json'}")

    elif args.command == "finetune":
        if args.lambda_phy is not None:
            cfg.lambda_phy = args.lambda_phy
        out = Path(args.out)
        _write_provenance(out, args, cfg, {"dataset": args.dataset,
                                           "pretrained": args.pretrained})
        model = pipeline.cmd_finetune(args.dataset, out / "model.json", cfg,
                                      pretrained_path=args.pretrained,
                                      cache_dir=out / "cages")
        print(f"finetuned model with sync + GMM -> {out/'model.json'}")

    elif args.command == "sample":
        out = Path(args.out)
        _write_provenance(out, args, cfg, {"model": args.model,
                                           "reference": args.reference})
        report = pipeline.cmd_sample(args.model, args.reference, out, cfg,
                                     n=args.n, seed=args.seed,
                                     z_zero=args.z_zero)
        print(f"wrote {report['n']} samples to {out}; "
              f"mean APD {report['mean_apd_before']:.3e} -> "
              f"{report['mean_apd_after']:.3e}")

    elif args.command == "simulate":
        out = Path(args.out)
        report = pipeline.cmd_simulate(args.manifest, cfg)
        _write_provenance(out, args, cfg, {"manifest": args.manifest})
        (out / "collision.json").write_text(json.dumps(report, indent=2))
        print(f"L_phy {report['l_phy']:.6e}  L_proj {report['l_proj']:.6e}")

    elif args.command == "eval":
        out = Path(args.out)
        _write_provenance(out, args, cfg, {"generated": args.generated,
                                           "reference": args.reference})
        result = pipeline.cmd_eval(args.generated, args.reference, cfg)
        (out / "metrics.json").write_text(json.dumps(result["metrics"], indent=2))
        print(result["table"])

    elif args.command == "correct":
        out = Path(args.out)
        _write_provenance(out, args, cfg, {"model": args.model,
                                           "reference": args.reference})
        z = None
        if args.z_file:
            z = np.array(json.loads(Path(args.z_file).read_text()))
        result = pipeline.cmd_correct(args.model, args.reference, cfg, z=z,
                                      out_path=out / "corrected.obj")
        (out / "correct.json").write_text(json.dumps(result, indent=2))
        print(f"L_phy {result['before']['l_phy']:.6e} -> "
              f"{result['after']['l_phy']:.6e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

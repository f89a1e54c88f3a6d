"""Operator command line: dataset generation, training, evaluation, ablation,
gradient checking, and static overlay rendering.

Every command resolves one JSON config, refuses to clobber a non-empty output
directory without --force, and leaves a run manifest from which the run can
be reproduced. Failures print a machine-readable error JSON; unknown config
keys exit with code 2.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__
from .config import RunSettings, hash_config, load_config_file
from .data import load_slice_dataset, make_synthetic_dataset, write_slice_dataset
from .episodes import load_episode_archive
from .errors import ConfigError, LoadError, ValidationError
from .superpixels import export_superpixels, felzenszwalb_segment
from .training import (
    GRADCHECK_COMPONENTS,
    evaluate,
    finite_difference_check,
    model_from_checkpoint,
    run_ablation,
    train,
)

GRADCHECK_THRESHOLD = 1e-5


def _prepare_out_dir(out_dir: Path, force: bool) -> Path:
    if not out_dir.parent.exists():
        raise LoadError(f"parent directory does not exist: {out_dir.parent}")
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ValidationError(
            f"output directory {out_dir} is not empty (use --force to overwrite)"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_run_manifest(out_dir: Path, command: str, args, settings: RunSettings):
    manifest = {
        "command": command,
        "config_path": str(Path(args.config).resolve()) if args.config else None,
        "config_hash": settings.config_hash,
        "resolved_config": settings.resolved,
        "seed": settings.seed,
        "out_dir": str(out_dir.resolve()),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "version": __version__,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1))


def _train_dataset(settings: RunSettings):
    data = settings.data
    if data.kind == "manifest":
        if not data.root or not data.manifest:
            raise ValidationError("data.kind=manifest requires data.root and data.manifest")
        return load_slice_dataset(data.root, data.manifest)
    seed = data.dataset_seed if data.dataset_seed is not None else settings.seed
    return make_synthetic_dataset(data.synthetic, seed)


def _eval_dataset(settings: RunSettings):
    ev = settings.eval
    if ev.manifest:
        return load_slice_dataset(ev.root or Path(ev.manifest).parent, ev.manifest)
    from dataclasses import replace

    seed = ev.dataset_seed if ev.dataset_seed is not None else settings.seed + 1000
    spec = settings.data.synthetic
    if ev.n_slices:
        spec = replace(spec, n_slices=ev.n_slices)
    return make_synthetic_dataset(spec, seed)


def cmd_gen_data(args) -> int:
    settings = load_config_file(args.config, seed_override=args.seed)
    out = _prepare_out_dir(Path(args.out), args.force)
    dataset = _train_dataset(settings)
    write_slice_dataset(dataset, out / "dataset")
    if args.debug_superpixels:
        spx_dir = out / "superpixels"
        spx_dir.mkdir(exist_ok=True)
        cfg = settings.train.superpixels
        for rec in dataset.slices:
            spx = felzenszwalb_segment(rec.image, cfg.k, cfg.min_size, cfg.sigma)
            export_superpixels(spx, spx_dir / f"spx_{rec.slice_id}")
    _write_run_manifest(out, "gen-data", args, settings)
    print(json.dumps({"out": str(out), "slices": len(dataset)}))
    return 0


def cmd_train(args) -> int:
    settings = load_config_file(args.config, seed_override=args.seed)
    out = _prepare_out_dir(Path(args.out), args.force)
    dataset = _train_dataset(settings)
    result = train(settings.train, dataset, out_dir=out, resume=args.resume)
    _write_run_manifest(out, "train", args, settings)
    print(
        json.dumps(
            {
                "checkpoint": str(result.checkpoint_path),
                "loss_log": str(result.loss_log_path),
                "skipped_episodes": result.skipped,
                "final": result.loss_log[-1] if result.loss_log else None,
            }
        )
    )
    return 0


def cmd_eval(args) -> int:
    settings = load_config_file(args.config, seed_override=args.seed)
    out = _prepare_out_dir(Path(args.out), args.force)
    model, ckpt_config, _ = model_from_checkpoint(args.checkpoint)
    dataset = _eval_dataset(settings)
    report = evaluate(
        model,
        dataset,
        ckpt_config.alp,
        class_list=settings.eval.classes,
        exclusion_list=tuple(settings.eval.exclude),
        use_support_mask=ckpt_config.use_support_mask,
        use_cross_reference=ckpt_config.use_cross_reference,
        max_episodes=settings.eval.episodes,
        sample_seed=settings.seed,
    )
    (out / "dice_report.json").write_text(json.dumps(report.to_json(), indent=1))
    _write_run_manifest(out, "eval", args, settings)
    print(json.dumps(report.to_json()))
    return 0


def cmd_ablate(args) -> int:
    settings = load_config_file(args.config, seed_override=args.seed)
    out = _prepare_out_dir(Path(args.out), args.force)
    dataset = _train_dataset(settings)
    eval_ds = _eval_dataset(settings)
    report = run_ablation(
        settings.train,
        dataset,
        eval_ds,
        class_list=settings.eval.classes,
        max_episodes=settings.eval.episodes,
    )
    (out / "ablation.json").write_text(json.dumps(report.to_json(), indent=1))
    (out / "ablation.tsv").write_text(report.to_tsv())
    _write_run_manifest(out, "ablate", args, settings)
    print(json.dumps(report.to_json()))
    return 0


def cmd_gradcheck(args) -> int:
    results = {}
    for component in GRADCHECK_COMPONENTS:
        worst = 0.0
        for i in range(args.instances):
            worst = max(worst, finite_difference_check(component, seed=args.seed + i, epsilon=args.epsilon))
        results[component] = worst
        print(f"{component}: max relative error {worst:.3e}")
    ok = all(v < GRADCHECK_THRESHOLD for v in results.values())
    if args.out:
        out = _prepare_out_dir(Path(args.out), args.force)
        (out / "gradcheck.json").write_text(
            json.dumps({"results": results, "threshold": GRADCHECK_THRESHOLD, "pass": ok}, indent=1)
        )
    print(json.dumps({"results": results, "pass": ok}))
    return 0 if ok else 1


def cmd_render(args) -> int:
    from .render import render_episode
    from .training import predict_episode

    out = _prepare_out_dir(Path(args.out), args.force)
    model, ckpt_config, _ = model_from_checkpoint(args.checkpoint)
    if args.config:
        settings = load_config_file(args.config, seed_override=args.seed)
        from .training import config_snapshot

        ckpt_hash = hash_config(config_snapshot(ckpt_config))
        cfg_hash = hash_config(config_snapshot(settings.train))
        if ckpt_hash != cfg_hash:
            raise ValidationError(
                f"checkpoint config hash {ckpt_hash} does not match "
                f"--config hash {cfg_hash}"
            )
    episodes = load_episode_archive(args.episodes)
    written = []
    for i, episode in enumerate(episodes):
        pred = predict_episode(
            model,
            episode,
            ckpt_config.alp,
            ckpt_config.use_support_mask,
            ckpt_config.use_cross_reference,
        )
        written += render_episode(episode, pred, out, f"ep{i:04d}")
    print(json.dumps({"out": str(out), "files": len(written)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crtseg",
        description="Self-supervised few-shot segmentation pipeline",
    )
    parser.add_argument("--version", action="version", version=f"crtseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite non-empty output dir")

    p = sub.add_parser("gen-data", help="generate a synthetic slice dataset")
    common(p)
    p.add_argument("--debug-superpixels", action="store_true", help="export superpixel rasters + PNGs")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run episodic training")
    common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the three-row ablation")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", help="export support/truth/prediction overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", required=True, help="episode archive directory")
    p.add_argument("--config", default=None, help="optional config to cross-check against the checkpoint")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        unknown = [v for v in exc.violations if v.startswith("unknown config key")]
        print(json.dumps({"error": "ConfigError", "violations": exc.violations}))
        return 2 if unknown else 1
    except (ValidationError, LoadError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        return 1


if __name__ == "__main__":
    sys.exit(main())

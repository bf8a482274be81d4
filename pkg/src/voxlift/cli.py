"""Command-line entry points: generate, train, eval, bench, export."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline as pl
from .config import RunConfig
from .numerics import ParameterStore
from .scenesim import (DatasetManifest, GenConfig, ManifestError, SceneFormatError, generate_dataset,
                       load_scene)

EXIT_USAGE = 2
EXIT_ERROR = 1
EXIT_TRAINING = 30


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def load_split(manifest: DatasetManifest, split: str, cfg: RunConfig) -> list[pl.SceneData]:
    out = []
    for path in manifest.paths(split):
        scene, rendered = load_scene(path)
        out.append(pl.prepare_scene(scene, rendered, cfg))
    return out


def cmd_generate(args) -> int:
    gen = GenConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else GenConfig()
    manifest = generate_dataset(gen, args.out, args.count, args.split, args.seed or 0)
    n_train = sum(1 for v in manifest.split.values() if v == "train")
    print(f"wrote {len(manifest.scenes)} scenes ({n_train} train / {len(manifest.scenes) - n_train} val) "
          f"to {args.out}, hash {manifest.config_hash[:12]}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.steps is not None:
        cfg = cfg.with_overrides(steps=args.steps)
    manifest = DatasetManifest.load(args.data)
    scenes = load_split(manifest, "train", cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = pl.init_store(cfg, scenes[0])
    initial = pl.mean_losses(cfg, store, scenes)
    try:
        store, log = pl.train(cfg, scenes, store)
    except pl.TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    final = pl.mean_losses(cfg, store, scenes)
    store.save(out / "params.npz")
    _write(out / "train_log.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n" for e in log))
    summary = {"config": cfg.to_dict(), "steps": cfg.steps, "initial": initial, "final": final}
    _write(out / "train_summary.json", json.dumps(summary, indent=2, sort_keys=True))
    print(f"trained {cfg.steps} steps: mean total loss {initial['total']:.4f} -> {final['total']:.4f}")
    return 0


def _load_params(path, cfg: RunConfig) -> ParameterStore:
    if not path or not Path(path).exists():
        raise FileNotFoundError(f"parameter file not found: {path}")
    return ParameterStore.load(path, seed=cfg.seed).astype(cfg.dtype)


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    store = _load_params(args.params, cfg)
    manifest = DatasetManifest.load(args.data)
    scenes = load_split(manifest, args.split, cfg)
    if not scenes:
        raise ValueError(f"the {args.split} split is empty")
    report, cost, preds = pl.evaluate(cfg, store, scenes, threads=args.threads)
    out = Path(args.out)
    _write(out / "eval_report.json", report.to_json())
    _write(out / "eval_report.csv", report.to_csv())
    _write(out / "cost_report.json", json.dumps(cost.to_dict(timing=args.timing), indent=2, sort_keys=True))
    _write(out / "predictions.json", pl.predictions_json(preds))
    print(f"mAP@0.25 {report.map_25:.4f}  mAP@0.50 {report.map_50:.4f}  over {len(scenes)} scenes")
    return 0


def cmd_bench(args) -> int:
    base = _run_config(args)
    configs = [RunConfig.load(p) for p in args.run_config] + [base.with_overrides(stages=s) for s in args.stages]
    if args.seed is not None:
        configs = [c.with_overrides(seed=args.seed) for c in configs]
    manifest = DatasetManifest.load(args.data)
    scenes = load_split(manifest, args.split, configs[0] if configs else base)[: args.scenes]
    rows = pl.bench(configs, scenes, threads=args.threads)
    text = pl.bench_csv(rows, timing=args.timing)
    _write(Path(args.out) / "bench.csv", text)
    sys.stdout.write(text)
    return 0


def cmd_export(args) -> int:
    cfg = _run_config(args)
    store = _load_params(args.params, cfg)
    manifest = DatasetManifest.load(args.data)
    paths = manifest.paths(args.split)
    if not 0 <= args.scene < len(paths):
        raise pl.ExportError(f"scene index {args.scene} outside [0, {len(paths)})")
    scene, rendered = load_scene(paths[args.scene])
    data = pl.prepare_scene(scene, rendered, cfg)
    _, _, fwd = pl.predict(cfg, store, data, threads=args.threads)
    stage = fwd.stages[args.stage]
    if args.what == "occupancy":
        if stage.occupancy is None:
            raise pl.ExportError("the dense coarse stage has no occupancy; pick a refinement stage")
        volume = stage.occupancy.data
    else:
        volume = stage.features.data
    pl.export_slice(volume, args.axis, args.index, args.out)
    print(f"wrote {args.what} slice axis={args.axis} index={args.index} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
    common.add_argument("--timing", action="store_true", help="include wall-clock seconds in reports")

    parser = argparse.ArgumentParser(prog="voxlift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="generate and render a synthetic dataset")
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--split", type=float, default=0.8, help="train fraction (floored)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train on the train split")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate trained parameters")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="compare volume construction cost across configs")
    p.add_argument("--data", required=True)
    p.add_argument("--run-config", action="append", default=[], help="additional config file (repeatable)")
    p.add_argument("--stages", action="append", default=[], help="stage spec on top of --config (repeatable)")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--scenes", type=int, default=1, help="number of scenes to run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export", parents=[common], help="write a 2D CSV slice of a volume")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--stage", type=int, default=-1)
    p.add_argument("--what", choices=("occupancy", "features"), default="occupancy")
    p.add_argument("--axis", type=int, default=2)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV file")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (SceneFormatError, ManifestError, pl.ExportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

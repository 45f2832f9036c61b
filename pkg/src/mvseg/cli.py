"""Command-line entry point: ``mvseg synth | train | infer | eval``.

Every run is described by one YAML config file plus flag overrides; flags win.
Data lives under ``data_dir/<split>/<scene>.ply`` with a ``<scene>.labels``
file next to each cloud.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, RunConfig, config_to_dict, load_config
from .evaluation import evaluate
from .merge_nms import SegmentationResult, read_instance_summary, write_instance_summary
from .mtpnet import export_predictions, load_params, save_params, train
from .pipeline import ABLATIONS, segment_scene
from .scene_io import (
    PointCloud,
    generate_synthetic_scene,
    random_recipe,
    read_labels,
    read_ply,
    write_labels,
    write_ply,
)

log = logging.getLogger("mvseg")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--ablation", choices=ABLATIONS, help="MV-CRF variant ('none' = mean-shift init only)")
    common.add_argument("--bandwidth", type=float, help="mean-shift bandwidth")
    common.add_argument("--jobs", type=int, help="scenes processed concurrently")
    common.add_argument("--dump-intermediate", action="store_true", default=None)
    common.add_argument("--data-dir", help="root of the train/ and test/ scene folders")
    common.add_argument("--model", dest="model_path", help="network parameter file")
    common.add_argument("--output-dir", help="where infer writes results and eval reads them")
    common.add_argument("--split", help="scene folder used by infer and eval")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mvseg", description="Joint semantic-instance point-cloud segmentation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write synthetic train/test scenes")
    sub.add_parser("train", parents=[common], help="train the network on the train split")
    sub.add_parser("infer", parents=[common], help="segment every scene of a split")
    sub.add_parser("eval", parents=[common], help="score inferred results against ground truth")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None and not args.config.is_file():
        raise ConfigError("config", f"{args.config} does not exist")
    cfg = load_config(args.config)
    top = {k: getattr(args, k) for k in ("seed", "ablation", "jobs", "dump_intermediate", "data_dir", "model_path", "output_dir", "split")}
    cfg = dataclasses.replace(cfg, **{k: v for k, v in top.items() if v is not None})
    if args.bandwidth is not None:
        if args.bandwidth <= 0:
            raise ConfigError("meanshift.bandwidth", "must be > 0")
        cfg.meanshift = dataclasses.replace(cfg.meanshift, bandwidth=args.bandwidth)
    if cfg.ablation not in ABLATIONS:
        raise ConfigError("ablation", f"expected one of {', '.join(ABLATIONS)}")
    if cfg.jobs < 1:
        raise ConfigError("jobs", "must be >= 1")
    return cfg


# ---------------------------------------------------------------- scene folders


def scene_paths(cfg: RunConfig, split: str) -> list[Path]:
    folder = Path(cfg.data_dir) / split
    if not folder.is_dir():
        raise ConfigError("data_dir", f"{folder} does not exist")
    paths = sorted(folder.glob("*.ply"))
    if not paths:
        raise ConfigError("data_dir", f"no .ply files in {folder}")
    return paths


def load_scene(path: Path) -> PointCloud:
    cloud = read_ply(path)
    labels = path.with_suffix(".labels")
    if labels.is_file():
        sem, inst = read_labels(labels)
        if len(sem) != len(cloud):
            raise ValueError(f"{labels}: {len(sem)} lines for {len(cloud)} vertices")
        cloud = cloud.with_labels(sem, inst)
    return cloud


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> None:
    syn = cfg.synth
    if not 0 <= syn.n_train <= syn.n_scenes:
        raise ConfigError("synth.n_train", "must lie in [0, n_scenes]")
    rng = np.random.default_rng(cfg.seed)
    root = Path(cfg.data_dir)
    for k in range(syn.n_scenes):
        split = "train" if k < syn.n_train else "test"
        folder = root / split
        folder.mkdir(parents=True, exist_ok=True)
        recipe = random_recipe(rng, syn)
        cloud = generate_synthetic_scene(int(rng.integers(2**31)), recipe)
        stem = folder / f"scene_{k:03d}"
        write_ply(stem.with_suffix(".ply"), cloud)
        write_labels(stem.with_suffix(".labels"), cloud.gt_semantic, cloud.gt_instance)
        with open(stem.with_suffix(".recipe.yaml"), "w") as fh:
            yaml.safe_dump(recipe, fh, sort_keys=True)
    log.info("wrote %d scenes to %s", syn.n_scenes, root)


def cmd_train(cfg: RunConfig) -> None:
    scenes = [load_scene(p) for p in scene_paths(cfg, "train")]
    if not any(s.has_labels for s in scenes):
        raise ConfigError("data_dir", "training scenes carry no labels")
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    result = train(scenes, tcfg, cfg.loss, cfg.window)
    model = Path(cfg.model_path)
    model.parent.mkdir(parents=True, exist_ok=True)
    save_params(model, result.params)
    with open(model.with_name(model.name + ".loss.txt"), "w") as fh:
        fh.write("epoch lr loss\n")
        for e, (lr, loss) in enumerate(zip(result.epoch_lr, result.epoch_loss), start=1):
            fh.write(f"{e} {lr:.8g} {loss:.10f}\n")


def _class_names(cloud: PointCloud, cfg: RunConfig, num_classes: int) -> list[str]:
    names = list(cloud.class_names) or list(cfg.synth.classes)
    if len(names) < num_classes:
        names += [str(c) for c in range(len(names), num_classes)]
    return names


def _infer_one(job):
    path, params, cfg, out_dir = job
    cloud = load_scene(path)
    name = path.stem
    if cloud.class_names and len(cloud.class_names) != params.num_classes:
        raise ConfigError(
            "model_path", f"model predicts {params.num_classes} classes, {path.name} declares {len(cloud.class_names)}"
        )
    out = segment_scene(cloud, params, cfg, name, track_energy=cfg.dump_intermediate)
    res = out.result
    write_labels(out_dir / f"{name}.labels", res.semantic, res.instance)
    write_instance_summary(out_dir / f"{name}.instances.txt", res, _class_names(cloud, cfg, params.num_classes))
    if cfg.dump_intermediate:
        dump = out_dir / "intermediate" / name
        dump.mkdir(parents=True, exist_ok=True)
        with open(dump / "energy.txt", "w") as fh:
            for w, o in enumerate(out.windows):
                fh.write(f"window {w} " + " ".join(f"{e:.10f}" for e in o.energies) + "\n")
        for w, o in enumerate(out.windows):
            np.savetxt(dump / f"w{w:03d}.indices.txt", o.indices, fmt="%d")
            export_predictions(dump / f"w{w:03d}.pred.txt", o.pred)
            np.savetxt(dump / f"w{w:03d}.meanshift.txt", o.clusters, fmt="%d")
            write_labels(dump / f"w{w:03d}.crf.labels", o.semantic, o.instance)
        np.savetxt(dump / "merged.txt", out.merged_ids, fmt="%d")
    return name, len(res.confidences)


def cmd_infer(cfg: RunConfig) -> None:
    model = Path(cfg.model_path)
    if not model.is_file():
        raise ConfigError("model_path", f"{model} does not exist")
    params = load_params(model)
    if params.embed_dim != cfg.train.embed_dim:
        raise ConfigError("train.embed_dim", f"model embeds in {params.embed_dim} dims, config says {cfg.train.embed_dim}")
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_config.yaml", "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
    jobs = [(p, params, cfg, out_dir) for p in scene_paths(cfg, cfg.split)]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(jobs))) as pool:
            done = list(pool.map(_infer_one, jobs))
    else:
        done = [_infer_one(j) for j in jobs]
    for name, k in done:
        log.info("%s: %d instances", name, k)


def load_result(out_dir: Path, name: str, names: list[str]) -> SegmentationResult:
    sem, inst = read_labels(out_dir / f"{name}.labels")
    rows = read_instance_summary(out_dir / f"{name}.instances.txt")
    lookup = {n: c for c, n in enumerate(names)}
    try:
        cls = np.array([lookup[r[1]] for r in rows], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"{name}.instances.txt: unknown class {exc.args[0]}") from None
    conf = np.array([r[3] for r in rows], dtype=np.float64)
    if len(inst) and inst.max() >= len(rows):
        raise ValueError(f"{name}.labels: instance id {inst.max()} has no summary line")
    return SegmentationResult(sem, inst, conf, cls)


def cmd_eval(cfg: RunConfig) -> None:
    out_dir = Path(cfg.output_dir)
    scenes = []
    names: list[str] = []
    for path in scene_paths(cfg, cfg.split):
        cloud = load_scene(path)
        if not cloud.has_labels:
            raise ConfigError("data_dir", f"{path.name} has no ground-truth labels")
        names = names or _class_names(cloud, cfg, int(cloud.gt_semantic.max()) + 1)
        res = load_result(out_dir, path.stem, names)
        if len(res.semantic) != len(cloud):
            raise ValueError(f"{path.stem}.labels: {len(res.semantic)} lines for {len(cloud)} vertices")
        scenes.append((path.stem, res, cloud.gt_semantic, cloud.gt_instance))
    report = evaluate(scenes, len(names), names)
    report.write(out_dir / "eval.txt", out_dir / "eval.json")
    for line in report.lines():
        print(line)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, OSError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split())
        print(f"mvseg {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""``densegrade`` command line: synth, train, eval, explain, params, augment-preview.

Exit codes: 0 success, 1 runtime error, 2 usage error. Errors print one line
to stderr starting with ``densegrade: error:`` or ``densegrade: usage error:``.
Environment: ``DENSEGRADE_OUT`` sets the default output root and
``DENSEGRADE_THREADS`` the default BLAS thread limit.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import filecmp
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from . import data as D
from .augmentation import AugmentationPolicy, augment_sample
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config_text
from .gradcam import explain, render_overlay, save_heatmap
from .metrics import MetricsReport
from .model import PRESETS, build_model, count_trainable_params, preset
from .train import TrainingDiverged, evaluate, train

log = logging.getLogger("densegrade")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _out_root() -> Path:
    return Path(os.environ.get("DENSEGRADE_OUT", "runs"))


def _threads_default() -> Optional[int]:
    v = os.environ.get("DENSEGRADE_THREADS")
    return int(v) if v else None


@contextlib.contextmanager
def _thread_limit(n: Optional[int]):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=int(n)):
        yield


# -- shared helpers -------------------------------------------------------------

def _datasets(records, resolution, task, workers):
    out = {}
    for split in D.SPLITS:
        recs = D.select_split(records, split)
        images = D.load_images(recs, (resolution, resolution), workers)
        out[split] = D.ArrayDataset(images, D.relabel(recs, task), recs)
    return out


def _metrics_for(model, dataset, task, split, normalization, batch_size) -> MetricsReport:
    report = evaluate(model, dataset, task, batch_size=batch_size, normalization=normalization)
    report.extra["split"] = split
    return report


def _write_reports(model, dataset, split, normalization, batch_size, out_dir: Path, tag: str = "metrics"):
    """Write ``<tag>.json``/``.txt`` for the model's task (plus coarse projections for fine18)."""
    task = D.TaskMode.parse(model.meta.get("task", "fine18"))
    tasks = [task]
    if task is D.TaskMode.FINE18:
        tasks += [D.TaskMode.FRUIT6, D.TaskMode.QUALITY3]
    reports = {}
    for t in tasks:
        r = _metrics_for(model, dataset, t, split, normalization, batch_size)
        stem = tag if t is task else f"{tag}.{t.value}"
        r.save(out_dir / f"{stem}.json", out_dir / f"{stem}.txt")
        reports[t.value] = r
    return reports


def _collect_images(inputs: List[str]) -> List[Path]:
    paths: List[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths += sorted(q for q in p.rglob("*") if q.suffix.lower() in D.IMAGE_EXTENSIONS)
        elif p.is_file():
            paths.append(p)
        else:
            raise FileNotFoundError(f"input not found: {p}")
    if not paths:
        raise D.DatasetError("no input images found")
    return paths


# -- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthetic import generate_synthetic
    out = Path(args.out) if args.out else _out_root() / "synthetic"
    if args.check:
        with tempfile.TemporaryDirectory() as tmp:
            generate_synthetic(tmp, args.per_class, args.resolution, args.seed)
            fresh = sorted(p.relative_to(tmp) for p in Path(tmp).rglob("*") if p.is_file())
            changed = [str(r) for r in fresh
                       if not (out / r).is_file() or not filecmp.cmp(Path(tmp) / r, out / r, shallow=False)]
        if changed:
            print(f"{len(changed)} of {len(fresh)} files differ, first: {changed[0]}")
            return 1
        print(f"all {len(fresh)} files identical")
        return 0
    generate_synthetic(out, args.per_class, args.resolution, args.seed)
    records = D.scan_dataset(out)
    print(D.format_counts(records))
    print(f"wrote {len(records)} images to {out}")
    return 0


def _train_overrides(args) -> dict:
    o = dict(kv for kv in (_split_kv(s) for s in args.set or []))
    flag_map = {
        "dataset": "data.root", "task": "data.task", "resolution": "data.resolution",
        "preset": "model.preset", "epochs": "train.max_epochs", "lr": "train.learning_rate",
        "batch_size": "train.batch_size", "seed": "run.seed", "out": "run.out",
        "workers": "data.workers", "threads": "run.threads",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            o[key] = str(v)
    if args.no_augment:
        for f in ("rotation_max_deg", "width_shift_frac", "height_shift_frac", "shear_max_deg",
                  "hflip_prob", "vflip_prob"):
            o[f"augment.{f}"] = "0.0"
    return o


def _split_kv(text: str):
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def cmd_train(args) -> int:
    overrides = _train_overrides(args)
    config_path = args.config
    if args.resume:
        run_dir = Path(overrides.get("run.out", ""))
        if not overrides.get("run.out") or not (run_dir / "config.resolved").is_file():
            raise UsageError("--resume needs --out pointing at an existing run directory")
        config_path = config_path or str(run_dir / "config.resolved")
    elif "run.out" not in overrides and not config_path:
        overrides["run.out"] = str(_out_root() / "run")
    cfg = load_config(config_path, overrides)
    if not cfg.data.root:
        raise UsageError("no dataset root; pass --dataset or set data.root")
    root = Path(cfg.data.root)
    if not root.is_dir():
        raise D.DatasetError(f"dataset root not found: {root}")
    run_dir = Path(cfg.run.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(cfg.dumps())

    with _thread_limit(cfg.run.threads or args.threads):
        return _run_training(cfg, run_dir, args.resume)


def _run_training(cfg: RunConfig, run_dir: Path, resume: bool) -> int:
    split_csv = run_dir / "split.csv"
    if resume and split_csv.is_file():
        records = D.read_split_manifest(split_csv)
    else:
        records = D.stratified_split(D.scan_dataset(cfg.data.root), cfg.data.ratio_tuple(),
                                     cfg.data.split_seed)
        D.write_split_manifest(records, split_csv)
    log.info("dataset %s: %d images", cfg.data.root, len(records))
    sets = _datasets(records, cfg.data.resolution, cfg.data.task, cfg.data.workers)
    norm = D.Normalization.from_images(sets["train"].images) if cfg.data.normalize else None

    model = build_model(cfg.model_config(), rng_seed=cfg.run.seed)
    model.meta.update({
        "task": cfg.data.task,
        "resolution": cfg.data.resolution,
        "normalization": norm.to_dict() if norm else None,
        "split_seed": cfg.data.split_seed,
        "ratios": cfg.data.ratios,
        "dataset_root": str(cfg.data.root),
        "eval_batch_size": cfg.train.batch_size,
    })
    history = train(model, sets["train"], sets["val"], cfg.train, cfg.augment, norm,
                    run_dir=run_dir, resume=resume, log=log.info)
    history.to_csv(run_dir / "history.csv")
    reports = _write_reports(model, sets["test"], "test", norm, cfg.train.batch_size, run_dir)
    print(f"stopped: {history.stop_reason} after {len(history.records)} epochs, best epoch {history.best_epoch}")
    for task, r in reports.items():
        print(f"test accuracy ({task}): {r.accuracy:.4f}")
    print(f"run directory: {run_dir}")
    return 0


def _load_for_inference(checkpoint: str):
    model = load_checkpoint(checkpoint)
    meta = model.meta
    norm = D.Normalization.from_dict(meta.get("normalization"))
    res = int(meta.get("resolution", model.config.input_resolution[0]))
    return model, norm, res


def cmd_eval(args) -> int:
    if args.run:
        run_dir = Path(args.run)
        checkpoint = args.checkpoint or run_dir / "checkpoints" / "best.ckpt"
    elif args.checkpoint:
        run_dir, checkpoint = None, args.checkpoint
    else:
        raise UsageError("pass --run or --checkpoint")
    model, norm, res = _load_for_inference(str(checkpoint))
    meta = model.meta
    model_task = D.TaskMode.parse(meta.get("task", "fine18"))
    task = D.TaskMode.parse(args.task) if args.task else model_task
    if task is not model_task and model_task is not D.TaskMode.FINE18:
        raise ValueError(f"checkpoint has a {model_task.num_classes}-class {model_task.value} head; "
                         f"cannot evaluate task {task.value}")
    if args.dataset:
        records = D.stratified_split(D.scan_dataset(args.dataset),
                                     tuple(float(v) for v in meta.get("ratios", "0.6,0.2,0.2").split(",")),
                                     int(meta.get("split_seed", 0)))
    elif run_dir is not None and (run_dir / "split.csv").is_file():
        records = D.read_split_manifest(run_dir / "split.csv")
    else:
        raise UsageError("no dataset: pass --dataset or a --run directory containing split.csv")
    recs = D.select_split(records, args.split)
    images = D.load_images(recs, (res, res))
    dataset = D.ArrayDataset(images, D.relabel(recs, model_task), recs)
    report = _metrics_for(model, dataset, task, args.split, norm, int(meta.get("eval_batch_size", 32)))
    out = Path(args.out) if args.out else (run_dir / "eval" if run_dir else _out_root() / "eval")
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.split}.{task.value}"
    report.save(out / f"{stem}.json", out / f"{stem}.txt")
    print(report.to_text(), end="")
    print(f"wrote {out / (stem + '.json')}")
    return 0


def cmd_explain(args) -> int:
    model, norm, res = _load_for_inference(args.checkpoint)
    target = "predicted" if args.target == "predicted" else int(args.target)
    if args.out:
        out = Path(args.out)
    else:
        ck = Path(args.checkpoint).resolve()
        out = ck.parent.parent / "explain" if ck.parent.name == "checkpoints" else _out_root() / "explain"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, path in enumerate(_collect_images(args.inputs)):
        image = D.load_image(path, (res, res))
        x = norm.apply(image[None])[0] if norm else image
        hm = explain(model, x, target=target, layer=args.layer, signal=args.signal)
        stem = f"{i:04d}_{path.stem}"
        overlay = out / f"{stem}_overlay.png"
        save_heatmap(hm, out / f"{stem}_heatmap.png")
        render_overlay(image.transpose(1, 2, 0), hm, overlay, alpha=args.alpha, colormap=args.colormap)
        rows.append([str(path), hm.predicted_class, hm.target_class, hm.peak[0], hm.peak[1], str(overlay)])
    with open(out / "index.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["input", "predicted_class", "target_class", "peak_row", "peak_col", "output"])
        w.writerows(rows)
    print(f"explained {len(rows)} images into {out}")
    return 0


def cmd_params(args) -> int:
    res = args.resolution
    model = build_model(preset(args.preset, args.classes, (res, res, 3)), rng_seed=0)
    n = count_trainable_params(model, include_head=not args.no_head)
    print(f"{args.preset} classes={args.classes} trainable parameters: {n} ({n / 1e6:.2f}M)")
    return 0


def _policy_from(spec: str) -> AugmentationPolicy:
    if spec == "default":
        return AugmentationPolicy()
    if spec == "none":
        return AugmentationPolicy.none()
    p = Path(spec)
    if not p.is_file():
        raise UsageError(f"--policy must be 'default', 'none' or a config file, got {spec!r}")
    values = {k: v for k, v in parse_config_text(p.read_text(), str(p)).items() if k.startswith("augment.")}
    cfg = RunConfig().apply(values, str(p))
    cfg.augment.validate()
    return cfg.augment


def cmd_augment_preview(args) -> int:
    policy = _policy_from(args.policy)
    out = Path(args.out) if args.out else _out_root() / "augment_preview"
    out.mkdir(parents=True, exist_ok=True)
    res = args.resolution
    differing = total = 0
    for i, path in enumerate(_collect_images(args.inputs)):
        before = D.load_image(path, (res, res))
        tiles = [before]
        for e in range(args.samples):
            after = augment_sample(before, policy, args.seed, e, i)
            differing += int(not np.array_equal(after, before))
            total += 1
            tiles.append(after)
        grid = np.concatenate([t.transpose(1, 2, 0) for t in tiles], axis=1)
        Image.fromarray((np.clip(grid, 0, 1) * 255 + 0.5).astype(np.uint8), "RGB").save(
            out / f"{i:04d}_{path.stem}.png", format="PNG")
    print(f"{differing}/{total} augmented samples differ from their source; previews in {out}")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="densegrade", description="DenseNet fruit quality grading from scratch")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--threads", type=_positive_int, default=_threads_default(),
                   help="BLAS thread limit; 1 gives bitwise-reproducible runs")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate the synthetic 18-class dataset")
    s.add_argument("--out")
    s.add_argument("--per-class", type=_positive_int, default=50)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--check", action="store_true", help="verify existing files are byte-identical")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="split, train and evaluate")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--task", choices=[m.value for m in D.TaskMode])
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--resolution", type=_positive_int)
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=_positive_int)
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=_positive_int)
    t.add_argument("--out")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics for a checkpoint on one split")
    e.add_argument("--run")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--task", choices=[m.value for m in D.TaskMode])
    e.add_argument("--split", choices=D.SPLITS, default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="Grad-CAM heatmaps and overlays")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--inputs", nargs="+", required=True)
    x.add_argument("--target", default="predicted")
    x.add_argument("--signal", choices=("logit", "loss"), default="logit")
    x.add_argument("--layer")
    x.add_argument("--alpha", type=float, default=0.5)
    x.add_argument("--colormap", choices=("hot", "gray"), default="hot")
    x.add_argument("--out")
    x.set_defaults(func=cmd_explain)

    c = sub.add_parser("params", help="count trainable parameters")
    c.add_argument("--preset", choices=sorted(PRESETS), default="densenet201")
    c.add_argument("--classes", type=_positive_int, default=18)
    c.add_argument("--resolution", type=_positive_int, default=256)
    c.add_argument("--no-head", action="store_true")
    c.set_defaults(func=cmd_params)

    a = sub.add_parser("augment-preview", help="before/after augmentation grids")
    a.add_argument("--policy", default="default")
    a.add_argument("--inputs", nargs="+", required=True)
    a.add_argument("--out")
    a.add_argument("--resolution", type=_positive_int, default=64)
    a.add_argument("--samples", type=_positive_int, default=4)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_augment_preview)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "resolution", None) is not None and args.resolution < 8:
            raise UsageError(f"--resolution must be >= 8, got {args.resolution}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        if args.command == "train":
            return args.func(args)
        with _thread_limit(args.threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"densegrade: usage error: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (D.DatasetError, CheckpointError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"densegrade: error: {_one_line(exc)}", file=sys.stderr)
        return 1


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())

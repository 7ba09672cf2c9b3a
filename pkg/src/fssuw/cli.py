"""Command-line entry point.

Subcommands: ``build-suim-fss``, ``sample-episodes``, ``train``, ``eval``,
``probe-prior``, ``report``. Exit codes: 0 success, 1 domain error (message
on stderr), 2 usage error. Set ``FSSUW_DETERMINISTIC=1`` to force
deterministic mode regardless of config.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import torch

from . import __version__
from .config import load_config, model_config_from, train_config_from, write_manifest
from .dataset import ClassMap, build_folds, filter_all_small_targets, load_dataset
from .episodes import (materialize_episode, read_episode_list, sample_test_pairs,
                       sample_training_pairs, write_episode_list)
from .errors import FssuwError
from .evaluation import MetricsReport, evaluate_fold, render_table
from .matching import downsample_mask, fragility_score, prior_mask
from .model import FssuwNet
from .training import load_checkpoint, seed_everything, train


def _load_class_map(root, explicit=None) -> ClassMap:
    if explicit:
        return ClassMap.from_csv(explicit)
    candidate = Path(root) / "classmap.csv"
    if candidate.exists():
        return ClassMap.from_csv(candidate)
    return ClassMap.suim()


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FssuwError(f"{what} not found: {path}")
    return path


def cmd_build_suim_fss(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    class_map = _load_class_map(args.root, args.class_map)
    index = load_dataset(args.root, class_map)
    index = filter_all_small_targets(index, args.min_fraction)
    folds = build_folds(index, args.scheme)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "n_samples": len(index),
        "classes": {
            str(cid): {"name": class_map.name_of(cid), "instances": len(index.instances(cid))}
            for cid in class_map.class_ids()
        },
        "samples": {
            sid: sorted(index.records[sid].class_pixels)
            for sid in index.source_ids()
        },
    }
    (out / "dataset.json").write_text(json.dumps(summary, indent=2))
    from .dataset import folds_to_json
    (out / "folds.json").write_text(folds_to_json(folds))
    class_map.to_csv(out / "classmap.csv")
    write_manifest(out, "build-suim-fss", cfg, corpus_hash=index.content_hash())
    print(f"indexed {len(index)} samples, {len(folds)} folds -> {out}")
    return 0


def cmd_sample_episodes(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    class_map = _load_class_map(args.root, args.class_map)
    index = load_dataset(args.root, class_map)
    index = filter_all_small_targets(index, args.min_fraction)
    folds = build_folds(index, args.scheme)
    if not 0 <= args.fold < len(folds):
        raise FssuwError(f"fold {args.fold} out of range; scheme {args.scheme} has {len(folds)}")
    fold = folds[args.fold]
    sampler = sample_training_pairs if args.split == "train" else sample_test_pairs
    specs = sampler(fold, index, n=args.n, seed=args.seed, k=args.k)
    out = write_episode_list(specs, args.out)
    write_manifest(out.parent, "sample-episodes", cfg, corpus_hash=index.content_hash(),
                   seed=args.seed, extra={"out_file": out.name})
    print(f"wrote {len(specs)} episodes -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    class_map = _load_class_map(args.data, args.class_map)
    index = load_dataset(args.data, class_map)
    specs = read_episode_list(_require_file(args.episodes, "episode list"))
    model_cfg = model_config_from(cfg)
    train_cfg = train_config_from(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "train", cfg, corpus_hash=index.content_hash(), seed=train_cfg.seed)
    result = train(train_cfg, model_cfg, specs, index, out_dir=out,
                   resume_from=args.resume)
    last = result.log_rows[-1] if result.log_rows else {}
    print(f"trained {result.iterations} iterations; final total loss "
          f"{last.get('total', float('nan')):.4f}; checkpoint -> {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    ckpt = _require_file(args.checkpoint, "checkpoint")
    class_map = _load_class_map(args.data, args.class_map)
    index = load_dataset(args.data, class_map)
    specs = read_episode_list(_require_file(args.episodes, "episode list"))
    model_cfg = model_config_from(cfg)
    seed_everything(int(cfg["train"]["seed"]), bool(cfg["train"]["deterministic"]))
    model = FssuwNet(model_cfg)
    load_checkpoint(ckpt, model)
    report = evaluate_fold(model, specs, index, resolution=int(cfg["data"]["resolution"]),
                           fold_id=args.fold, per_episode_mean=bool(cfg["eval"]["per_episode_mean"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    write_manifest(out.parent, "eval", cfg, corpus_hash=index.content_hash(),
                   extra={"out_file": out.name})
    print(f"fold {report.fold_id} mIoU {report.fold_miou:.4f} "
          f"({report.n_episodes} episodes) -> {out}")
    return 0


def cmd_probe_prior(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    class_map = _load_class_map(args.data, args.class_map)
    index = load_dataset(args.data, class_map)
    model_cfg = model_config_from(cfg)
    seed_everything(args.seed, True)
    model = FssuwNet(model_cfg)
    if args.checkpoint:
        load_checkpoint(_require_file(args.checkpoint, "checkpoint"), model)

    if args.episodes:
        specs = read_episode_list(_require_file(args.episodes, "episode list"))
    else:
        # one pseudo-fold over every registered class that has instances
        from .dataset import FoldConfig
        classes = frozenset(cid for cid in class_map.class_ids() if index.instances(cid))
        if not classes:
            raise FssuwError("no class with instances to probe")
        fold = FoldConfig(fold_id=0, train_classes=frozenset(), test_classes=classes,
                          scheme="custom")
        specs = sample_test_pairs(fold, index, n=args.n, seed=args.seed, k=1)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .plots import save_heatmap
    rows = []
    with torch.no_grad():
        for i, spec in enumerate(specs):
            episode = materialize_episode(spec, index, args.resolution)
            q_high = model.sfe(episode.query_image).high
            s_high = model.sfe(episode.supports[0][0]).high
            prior = prior_mask(q_high, s_high, episode.supports[0][1])
            gt_feat = downsample_mask(episode.query_gt, tuple(prior.values.shape))
            if gt_feat.any() and not gt_feat.all():
                score = fragility_score(prior, gt_feat)
            else:
                score = float("nan")
            name = f"prior_{i:03d}_{spec.query_id}"
            save_heatmap(prior.values.numpy(), out / f"{name}.png",
                         title=f"{spec.query_id} (class {spec.class_id})")
            rows.append({"episode": i, "class_id": spec.class_id,
                         "query": spec.query_id, "support": spec.support_ids[0],
                         "fragility": score})
    with open(out / "fragility.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["episode", "class_id", "query",
                                                "support", "fragility"])
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out, "probe-prior", cfg, corpus_hash=index.content_hash(), seed=args.seed)
    finite = [r["fragility"] for r in rows if r["fragility"] == r["fragility"]]
    mean = sum(finite) / len(finite) if finite else float("nan")
    print(f"probed {len(rows)} episodes; mean fragility {mean:.4f} -> {out}")
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        p = Path(path)
        if p.is_dir():
            p = p / "report.json"
        reports.append(MetricsReport.from_json(_require_file(p, "report").read_text()))
    per_fold = {}
    for r in reports:
        if r.per_fold_miou:
            per_fold.update(r.per_fold_miou)
        else:
            per_fold[r.fold_id] = r.fold_miou
    flat = [MetricsReport(per_class_iou={}, fold_miou=v, fold_id=k)
            for k, v in sorted(per_fold.items())]
    md, csv_text = render_table(flat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.md").write_text(md)
    (out / "results.csv").write_text(csv_text)
    if args.plot:
        from .plots import save_miou_bars
        save_miou_bars(per_fold, out / "miou.png")
    write_manifest(out, "report", {"inputs": [str(p) for p in args.reports]})
    print(md, end="")
    return 0


def _add_common(parser, config=True):
    if config:
        parser.add_argument("--config", default=None, help="TOML config file")
        parser.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                            help="override a config value (e.g. train.lr0=0.01)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fssuw",
                                     description="few-shot underwater segmentation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-suim-fss", help="index a corpus, filter small targets, emit folds")
    p.add_argument("--root", required=True, help="dataset root with images/ and masks/")
    p.add_argument("--out", required=True)
    p.add_argument("--min-fraction", type=float, default=0.10)
    p.add_argument("--scheme", default="suim2", choices=["suim2", "uws4"])
    p.add_argument("--class-map", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_build_suim_fss)

    p = sub.add_parser("sample-episodes", help="sample a reproducible episode list")
    p.add_argument("--root", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=1, choices=[1, 5])
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--scheme", default="suim2", choices=["suim2", "uws4"])
    p.add_argument("--min-fraction", type=float, default=0.10)
    p.add_argument("--class-map", default=None)
    p.add_argument("--out", required=True, help="output .jsonl path")
    _add_common(p)
    p.set_defaults(func=cmd_sample_episodes)

    p = sub.add_parser("train", help="train on a frozen episode list")
    p.add_argument("--config", default=None)
    p.add_argument("--episodes", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--class-map", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VAL")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a frozen episode list")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output report.json path")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--class-map", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe-prior", help="render prior-mask heatmaps and fragility scores")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", default=None, help="optional frozen episode list")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--class-map", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_probe_prior)

    p = sub.add_parser("report", help="render results tables (and plots) from report JSONs")
    p.add_argument("reports", nargs="+", help="report.json files or run directories")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true", help="also render a mIoU bar chart PNG")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except FssuwError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

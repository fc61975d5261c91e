"""Command-line entry point: ``terrain-twin {gen,train,eval,infer,gradcheck}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config, evalkit, gradcheck, netpbm, plots, sampler, tiler, trainer, worldgen
from .labeler import CLASS_NAMES

log = logging.getLogger("terrain_twin")


def _common(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="terrain-twin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize a world and sample a labeled patch dataset")
    _common(p)
    p.add_argument("--seed", type=int, help="world and sampler seed")
    p.add_argument("--patches", type=int, help="number of accepted patches")
    p.add_argument("--base", type=int, help="patch size in pixels")
    p.add_argument("--world-width", type=int)
    p.add_argument("--world-height", type=int)
    p.add_argument("--out", required=True, help="dataset directory")

    p = sub.add_parser("train", help="train the U-Net on a dataset directory")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="run directory (default: <data>/run)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--val-every", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--plot", action="store_true", help="render train_curves.ppm")

    p = sub.add_parser("eval", help="ROC/AUC/Jaccard report on held-out patches")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("val", "all"), default="val")
    p.add_argument("--plot", action="store_true", help="render ROC/AUC/Jaccard figures as P6")

    p = sub.add_parser("infer", help="tiled segmentation of a P6 image")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--tile-size", type=int)
    p.add_argument("--no-normalize", action="store_true", help="skip color matching")
    p.add_argument("--binary", action="store_true", help="also write per-class binary views")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _resolve(args, overrides):
    cfg = config.resolve(args.config, overrides)
    print("# resolved configuration")
    print(config.format_config(cfg), end="")
    return cfg


def cmd_gen(args):
    over = {
        "world.seed": args.seed, "sampler.seed": args.seed,
        "sampler.n_patches": args.patches, "sampler.base": args.base,
        "world.width": args.world_width, "world.height": args.world_height,
    }
    cfg = _resolve(args, over)
    print(f"# seeds: world={cfg['world.seed']} sampler={cfg['sampler.seed']} "
          f"labeler={cfg['labeler.seed']}")
    world = worldgen.synth_world(cfg["world.seed"], cfg["world.width"], cfg["world.height"],
                                 cfg["world.octaves"], cfg["world.persistence"],
                                 cfg["world.sea_level_bias"], cfg["world.lat_max"],
                                 cfg["world.cell_size"])
    patches = sampler.build_dataset(world, config.sampler_config(cfg),
                                    config.labeler_config(cfg), config.worker_count())
    sampler.write_dataset(args.out, world, patches)
    print(f"wrote {len(patches)} patches to {args.out}")


def cmd_train(args):
    over = {"train.max_epochs": args.epochs, "train.val_every": args.val_every,
            "train.batch_size": args.batch_size, "train.learning_rate": args.lr,
            "train.seed": args.seed}
    cfg = _resolve(args, over)
    tcfg = config.train_config(cfg)
    print(f"# seeds: train={tcfg.seed}")
    out = args.out or os.path.join(args.data, "run")
    os.makedirs(out, exist_ok=True)
    patches = sampler.load_dataset(args.data)
    resume = trainer.load_checkpoint(args.resume) if args.resume else None
    ucfg = resume.model.config if resume else config.unet_config(cfg)
    previous = []
    log_path = os.path.join(out, "train_log.tsv")
    if resume and os.path.exists(log_path):
        previous = [r for r in trainer.read_log(log_path) if r.epoch <= resume.epoch]
    result = trainer.train(patches, ucfg, tcfg, resume=resume)
    records = previous + result.log
    trainer.write_log(log_path, records)
    trainer.save_checkpoint(os.path.join(out, "final.ckpt"), result.final)
    if result.best is not None:
        trainer.save_checkpoint(os.path.join(out, "best.ckpt"), result.best)
    if args.plot:
        plots.save_figure(plots.training_figure(records), os.path.join(out, "train_curves.ppm"))
    n_val = sum(r.split == "val" for r in records)
    print(f"trained to epoch {result.final.epoch}; {n_val} validation records; outputs in {out}")


def cmd_eval(args):
    cfg = _resolve(args, {})
    ck = trainer.load_checkpoint(args.model)
    print(f"# seeds: checkpoint={ck.seed}")
    patches = sampler.load_dataset(args.data)
    if args.split == "val":
        _, ids = trainer.split_dataset(range(len(patches)), cfg["train.val_fraction"], ck.seed)
        patches = [patches[i] for i in ids]
    report = evalkit.evaluate(ck.model, patches, ck.color_stats)
    evalkit.write_report(args.out, report)
    if args.plot:
        plots.save_figure(plots.roc_figure(report), os.path.join(args.out, "roc.ppm"))
        plots.save_figure(plots.auc_histogram_figure(report),
                          os.path.join(args.out, "auc_per_image.ppm"))
        plots.save_figure(plots.jaccard_figure(report), os.path.join(args.out, "jaccard.ppm"))
    print(f"mean AUC {report.mean_auc:.4f}  mean Jaccard {report.mean_jaccard:.4f}  "
          f"pixel accuracy {report.accuracy:.4f}")


def cmd_infer(args):
    cfg = _resolve(args, {"tiler.tile_size": args.tile_size,
                          "tiler.normalize": False if args.no_normalize else None})
    ck = trainer.load_checkpoint(args.model)
    if ck.color_stats is None:
        raise ValueError("checkpoint carries no color statistics")
    img = netpbm.read_ppm(args.image)
    grid = tiler.tile_image(img, cfg["tiler.tile_size"])
    masks = tiler.infer_tiles(ck.model, grid, ck.color_stats, normalize=cfg["tiler.normalize"],
                              workers=config.worker_count())
    mosaic = tiler.stitch(masks, grid)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    netpbm.write_netpbm(f"{args.out}_mask.pgm", mosaic)
    netpbm.write_netpbm(f"{args.out}_mask.ppm", tiler.colorize_mosaic(mosaic))
    if args.binary:
        for c, name in enumerate(CLASS_NAMES):
            netpbm.write_netpbm(f"{args.out}_{name}.ppm", tiler.colorize_mosaic(mosaic, cls=c))
    counts = np.bincount(mosaic.ravel(), minlength=len(CLASS_NAMES))
    print(f"{grid.rows}x{grid.cols} tiles -> {mosaic.shape[1]}x{mosaic.shape[0]} mosaic; "
          + " ".join(f"{n}={c}" for n, c in zip(CLASS_NAMES, counts)))


def cmd_gradcheck(args):
    print(f"# seeds: gradcheck={args.seed}")
    results = gradcheck.run_suite(args.seed)
    for r in results:
        print(r.line())
    if not all(r.passed for r in results):
        raise RuntimeError("gradient check failed")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "gradcheck": cmd_gradcheck}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"terrain-twin {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()

"""
Command-line surface: one subcommand per pipeline step plus `run` and `report`.

Every subcommand takes the experiment config (``--config``) and the shared overrides;
results go to stdout as JSON, failures to stderr as one JSON error record.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .core import config
from .core.errors import ProgSegError
from .core.experiment import ExperimentConfig, apply_overrides, from_dict, load_experiment
from .managers.model_manager import load_checkpoint, model_from_checkpoint, save_checkpoint
from .managers.patch_manager import Split, load_patch_set
from .managers.pipeline_manager import patchify_tiles, preprocess_tiles, run_pipeline
from .managers.raster_manager import RasterFormat, load_raster, save_mask, save_mask_preview
from .managers.report_manager import report
from .managers.synth_manager import generate_dataset
from .managers.train_manager import evaluate, predict_map, run_progressive, save_history_csv

logger = logging.getLogger(__name__)

# subcommands whose unexpected failures count as training failures
TRAINING_COMMANDS = ("run", "train")


# --- Argument types ---

def _int_list(value: str) -> list:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def _grid(value: str) -> tuple:
    parts = _int_list(value)
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'rows,cols', got '{value}'")
    return tuple(parts)


# --- Parser ---

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="Experiment config (JSON).")
    common.add_argument("--seed", type=int, help="Master seed.")
    common.add_argument("--out", metavar="PATH", help="Output directory (or file for predict).")
    common.add_argument("--bands", help="Band subset, e.g. RGB, RGBN, RGBNS1S2Th or red,green,nir.")
    common.add_argument("--plan", type=_int_list, help="Patch-size plan, e.g. 64,128,256.")
    common.add_argument("--alpha", type=float, help="BCE weight of the hybrid loss.")
    common.add_argument("--beta", type=float, help="Dice weight of the hybrid loss.")
    common.add_argument("--p-low", type=float, help="Lower normalization percentile.")
    common.add_argument("--p-high", type=float, help="Upper normalization percentile.")
    common.add_argument("--clahe-clip", type=float, help="CLAHE clip limit (fraction per bin).")
    common.add_argument("--clahe-grid", type=_grid, help="CLAHE tile grid, e.g. 8,8.")
    common.add_argument("--clahe-bins", type=int, help="CLAHE histogram bins.")
    common.add_argument("--backbone", help="SMALL_RESNET, UNET_ENCODER or a registered name (resnet18, resnet50).")
    common.add_argument("--extend-init", choices=config.EXTEND_INIT_STRATEGIES,
                        help="Initialization of channels added to a checkpoint.")
    common.add_argument("--force", action="store_true", help="Overwrite a completed run.")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging on stderr.")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog=config.APP_NAME,
                                     description="Progressive patch-size segmentation for irrigation mapping.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="Run the whole pipeline for one experiment.")

    p = sub.add_parser("synth", parents=[common], help="Generate synthetic tiles with ground truth.")
    p.add_argument("--tiles", type=int, help="Number of tiles.")
    p.add_argument("--nir-only", action="store_true", help="FLOOD differs from OTHER in NIR only.")

    p = sub.add_parser("preprocess", parents=[common], help="Normalize and CLAHE-enhance a tile set.")
    p.add_argument("--manifest", required=True, help="Input tiles.json.")
    p.add_argument("--no-clahe", action="store_true", help="Percentile normalization only.")

    p = sub.add_parser("patchify", parents=[common], help="Filter, split and cut tiles into patch sets.")
    p.add_argument("--manifest", required=True, help="Input tiles.json (preprocessed).")
    p.add_argument("--size", type=int, action="append", choices=config.PATCH_SIZES,
                   help="Patch size; repeat for several (default: the plan's sizes).")
    p.add_argument("--other-threshold", type=float, help="Patch-level OTHER threshold.")
    p.add_argument("--tile-threshold", type=float, help="Tile-level OTHER threshold.")
    p.add_argument("--val-ratio", type=float, help="Share of tiles held out for validation.")

    p = sub.add_parser("train", parents=[common], help="Train a stage plan on existing patch sets.")
    p.add_argument("--data-root", required=True, help="Directory holding patches_<S>/.")
    p.add_argument("--init-ckpt", help="Start from this checkpoint (widened if it covers fewer bands).")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint on a patch set.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--val", required=True, help="Patch manifest.jsonl.")
    p.add_argument("--split", choices=[s.value for s in Split], default=Split.VAL.value)

    p = sub.add_parser("predict", parents=[common], help="Predict a label map for one raster.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--tile-size", type=int, help="Inference window (default: last trained patch size).")

    p = sub.add_parser("report", parents=[common], help="Compare completed runs.")
    p.add_argument("roots", nargs="+", help="Run directories or directories containing runs.")
    return parser


# --- Helpers ---

def _experiment(args) -> ExperimentConfig:
    if args.config:
        cfg = load_experiment(args.config)
    else:
        cfg = from_dict({"plan": list(config.DEFAULT_PLAN)})
    return apply_overrides(
        cfg,
        seed=args.seed, out=args.out if args.command in ("run", "train") else None, bands=args.bands,
        plan=args.plan, alpha=args.alpha, beta=args.beta, p_low=args.p_low, p_high=args.p_high,
        clahe_clip=args.clahe_clip, clahe_grid=args.clahe_grid, clahe_bins=args.clahe_bins,
        backbone=args.backbone, extend_init=args.extend_init,
    )


def _emit(payload):
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


# --- Commands ---

def _cmd_run(args, cfg):
    _emit(run_pipeline(cfg, force=args.force))


def _cmd_synth(args, cfg):
    scene = cfg.data.scene
    if args.nir_only:
        scene = replace(scene, nir_only_class=True)
    out_dir = Path(args.out) if args.out else cfg.run_dir / "tiles"
    manifest = generate_dataset(args.tiles or cfg.data.n_tiles, scene, cfg.seed, out_dir,
                                workers=max(1, cfg.workers))
    _emit({"tiles_manifest": manifest})


def _cmd_preprocess(args, cfg):
    out_dir = Path(args.out) if args.out else Path(args.manifest).parent.with_name("preprocessed")
    clahe = None if args.no_clahe else cfg.preprocess.clahe
    manifest = preprocess_tiles(args.manifest, out_dir, cfg.preprocess.normalize, clahe,
                                workers=max(1, cfg.workers))
    _emit({"tiles_manifest": manifest})


def _cmd_patchify(args, cfg):
    out_root = Path(args.out) if args.out else Path(args.manifest).parent.parent
    patches = cfg.patches
    manifests, (train_ids, val_ids) = patchify_tiles(
        args.manifest, out_root, args.size or cfg.plan.sizes, cfg.band_list,
        tile_other_threshold=patches.tile_other_threshold if args.tile_threshold is None else args.tile_threshold,
        patch_other_threshold=patches.patch_other_threshold if args.other_threshold is None else args.other_threshold,
        val_ratio=patches.val_ratio if args.val_ratio is None else args.val_ratio,
        seed=cfg.seed, stride=patches.stride, workers=max(1, cfg.workers),
    )
    _emit({"manifests": {str(k): v for k, v in manifests.items()},
           "train_tiles": len(train_ids), "val_tiles": len(val_ids)})


def _cmd_train(args, cfg):
    out_dir = cfg.run_dir
    init_path = args.init_ckpt or cfg.model.init_checkpoint
    init = load_checkpoint(init_path) if init_path else None
    ckpt, histories = run_progressive(
        cfg.plan, args.data_root, cfg.band_list, cfg.loss, cfg.seed, cfg.augment,
        model_spec=cfg.model.spec(len(cfg.band_list)), init_checkpoint=init,
        extend_init=cfg.model.extend_init, checkpoint_dir=out_dir / "checkpoints", workers=cfg.workers,
    )
    final = save_checkpoint(ckpt, out_dir / "checkpoints" / f"final{config.CHECKPOINT_SUFFIX}")
    history = save_history_csv(histories, out_dir / config.HISTORY_CSV_NAME)
    _emit({"checkpoint": final, "history": history, "stages": [h.summary() for h in histories]})


def _cmd_eval(args, cfg):
    ckpt = load_checkpoint(args.ckpt)
    patch_set = load_patch_set(args.val, Split(args.split), ckpt.bands)
    _emit(evaluate(model_from_checkpoint(ckpt), patch_set))


def _cmd_predict(args, cfg):
    ckpt = load_checkpoint(args.ckpt)
    img = load_raster(args.image, ckpt.bands)
    tile_size = args.tile_size or (ckpt.stage_history[-1][0] if ckpt.stage_history else config.TILE_SIZE)
    mask = predict_map(model_from_checkpoint(ckpt), img, tile_size)
    out = Path(args.out) if args.out else Path(args.image).with_name(f"{Path(args.image).stem}_pred{config.ARCHIVE_SUFFIX}")
    fmt = RasterFormat.GEOTIFF if out.suffix.lower() in config.GEOTIFF_SUFFIXES else RasterFormat.ARCHIVE
    config.ensure_dir(out.parent)
    _emit({
        "mask": save_mask(mask, out, fmt, img.resolution_m),
        "preview": save_mask_preview(mask, out.with_suffix(".png")),
        "tile_size": tile_size,
    })


def _cmd_report(args, cfg):
    _emit(report(args.roots, args.out))


COMMANDS = {
    "run": _cmd_run,
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "patchify": _cmd_patchify,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    """Parses `argv`, runs the subcommand and returns its exit code."""
    args = build_parser().parse_args(argv)
    try:
        cfg = _experiment(args)
        COMMANDS[args.command](args, cfg)
    except ProgSegError as e:
        logger.error(f"{args.command} failed: {e}")
        print(json.dumps(e.to_record(), sort_keys=True), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command}")
        code = config.EXIT_TRAINING_ERROR if args.command in TRAINING_COMMANDS else config.EXIT_DATA_ERROR
        print(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": code, "details": {}},
                         sort_keys=True), file=sys.stderr)
        return code
    return config.EXIT_OK

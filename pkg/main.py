"""
Mask-Text Engine - Main Entry Point
Command-line surface for fusing per-view mask captions into 3D mask-text
pairs, merging them onto 3D proposals, computing dataset statistics,
evaluating predictions and evaluating the training losses.
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, Optional, Sequence

import numpy as np

from caption_merge import MergeConfig, concat_captions, merge_captions
from config import apply_overrides, load_config
from errors import ContractError, MaskTextError
from file_formats import (
    load_class_groups,
    load_embeddings,
    load_frame,
    load_label_set,
    load_manifest,
    load_pointcloud,
    load_scene_cloud,
    load_wordlist,
    read_instance_predictions,
    read_pairs,
    read_proposals,
    read_regions,
    write_merged,
    write_pairs,
)
from logger import log_fuse_report, log_merge_report, setup_logger
from losskit import (
    ContrastiveConfig,
    LossWeights,
    ObjectnessScores,
    point_contrastive_loss,
    sigmoid_masks,
    total_mask_loss,
)
from metrics import dataset_statistics, fg_miou_macc, gt_instances, instance_ap, semantic_predict
from projection_fusion import FusionConfig, fuse_scene
from utils import write_json

logger = logging.getLogger("main")


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def cmd_fuse(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    """Project every frame's masks onto the scene cloud and write pairs.jsonl."""
    config = apply_overrides(config, {
        "epsilon": args.epsilon,
        "frame_stride": args.stride,
        "dataset": args.dataset,
    })
    cfg = FusionConfig.from_config(config)
    manifest = load_manifest(args.manifest)
    logger.info("Fusing scene %s: %d frames, stride %d, epsilon %.4f",
                manifest.scene_id, len(manifest.frames), cfg.frame_stride, cfg.epsilon)

    cloud = load_scene_cloud(manifest)
    frames, frame_masks, frame_captions = [], [], []
    for entry in manifest.frames:
        frame, masks, captions = load_frame(entry)
        frames.append(frame)
        frame_masks.append(masks)
        frame_captions.append(captions)

    pairs, report = fuse_scene(cloud, frames, frame_masks, frame_captions, cfg, threads=config["threads"])

    out_dir = _ensure_dir(args.out)
    write_pairs(os.path.join(out_dir, "pairs.jsonl"), pairs)
    write_json(os.path.join(out_dir, "fuse_report.json"), report.to_dict())
    log_fuse_report(logger, manifest.scene_id, report)


def cmd_merge(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    """Assign pairs to proposals and write merged.jsonl."""
    config = apply_overrides(config, {
        "iou_threshold": args.iou_threshold,
        "max_captions": args.max_captions,
        "shuffle_seed": args.seed,
    })
    cfg = MergeConfig.from_config(config)
    if args.n_points < 1:
        raise ContractError(f"--n-points must be >= 1, got {args.n_points}")

    pairs = read_pairs(args.pairs, args.n_points)
    proposals = read_proposals(args.proposals, args.n_points)
    merged, report = merge_captions(pairs, proposals, cfg)

    captions = {pair.pair_id: pair.caption for pair in pairs}
    concatenated = [concat_captions(proposal, captions, cfg) for proposal in merged]

    out_dir = _ensure_dir(args.out)
    write_merged(os.path.join(out_dir, "merged.jsonl"), merged, concatenated)
    write_json(os.path.join(out_dir, "merge_report.json"), report.to_dict())
    log_merge_report(logger, report)


def cmd_stats(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    """Dataset statistics over one or more (manifest, pairs) scenes."""
    config = apply_overrides(config, {"entropy_scale": args.entropy_scale})
    stopwords = load_wordlist(args.stopwords) if args.stopwords else config["stopwords"]

    scenes = []
    frame_counts = []
    for manifest_path, pairs_path in args.scene:
        manifest = load_manifest(manifest_path)
        cloud = load_scene_cloud(manifest)
        pairs = read_pairs(pairs_path, cloud.n_points)
        logger.info("Scene %s: %d pairs over %d points", manifest.scene_id, len(pairs), cloud.n_points)
        scenes.append((pairs, cloud))
        frame_counts.append(len(manifest.frames))

    stats = dataset_statistics(scenes, stopwords, float(config["entropy_scale"]))
    stats["frames_per_scene"] = float(np.mean(frame_counts))
    write_json(args.out, stats)
    logger.info("STATS: scenes=%d pairs=%d coverage=%.2f", stats["scenes"], stats["pairs"], stats["coverage"])


def cmd_eval_sem(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    """Open-vocabulary semantic segmentation scores."""
    labels = load_label_set(args.labels)
    point_feats = load_embeddings(args.point_feats)
    class_emb = load_embeddings(args.class_emb)
    cloud = load_pointcloud(args.cloud)
    groups = load_class_groups(args.groups) if args.groups else None

    if cloud.semantic_id is None:
        raise ContractError(f"{args.cloud} carries no semantic_id labels")
    if point_feats.count != cloud.n_points:
        raise ContractError(f"{point_feats.count} point features for {cloud.n_points} points")
    if class_emb.count != len(labels.classes):
        raise ContractError(f"{class_emb.count} class embeddings for {len(labels.classes)} classes")

    pred = np.array(labels.ids, dtype=np.int64)[semantic_predict(point_feats, class_emb)]
    scores = fg_miou_macc(pred, cloud.semantic_id, labels, groups)
    write_json(args.out, scores.to_dict())
    logger.info("EVAL-SEM: f-mIoU=%.2f f-mAcc=%.2f", scores.f_miou, scores.f_macc)


def cmd_eval_inst(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    """Instance segmentation AP against the instances of a labeled cloud."""
    labels = load_label_set(args.labels)
    cloud = load_pointcloud(args.cloud)
    predictions = read_instance_predictions(args.predictions, cloud.n_points)
    scores = instance_ap(predictions, gt_instances(cloud), labels)
    write_json(args.out, scores.to_dict())
    logger.info("EVAL-INST: mAP=%.4f AP50=%.4f AP25=%.4f", scores.mAP, scores.AP50, scores.AP25)


def cmd_loss(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    """Evaluate the mask decoder objective (and optionally the point-text loss)."""
    config = apply_overrides(config, {"temperature": args.temperature})
    cfg = ContrastiveConfig.from_config(config)
    weights = LossWeights.from_config(config)

    mask_emb = load_embeddings(args.mask_emb)
    point_emb = load_embeddings(args.point_emb)
    caption_emb = load_embeddings(args.caption_emb)
    scores = ObjectnessScores(load_embeddings(args.scores).data)
    gt_regions = read_regions(args.gt, point_emb.count)

    breakdown = total_mask_loss(scores, sigmoid_masks(mask_emb, point_emb), gt_regions,
                                mask_emb, caption_emb, weights, cfg)
    result = breakdown.to_dict()

    if (args.text_emb is None) != (args.pairs is None):
        raise ContractError("--text-emb and --pairs must be given together")
    if args.text_emb is not None:
        text_emb = load_embeddings(args.text_emb)
        regions = read_regions(args.pairs, point_emb.count)
        result["point_contrastive"] = point_contrastive_loss(point_emb, text_emb, regions, cfg)

    write_json(args.out, result)
    logger.info("LOSS: total=%.6f obj=%.6f dice=%.6f bce=%.6f cap=%.6f", breakdown.total,
                breakdown.obj, breakdown.dice, breakdown.bce, breakdown.cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masktext",
        description="Build and evaluate 3D mask-text training data.",
    )
    parser.add_argument("--config", help="JSON configuration file (default: ./config.json when present)")
    parser.add_argument("--threads", type=int, help="worker threads for per-frame jobs")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    parser.add_argument("--log-file", help="also write logs to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    fuse = sub.add_parser("fuse", help="fuse per-view mask captions into 3D mask-text pairs")
    fuse.add_argument("--manifest", required=True, help="scene manifest JSON")
    fuse.add_argument("--out", required=True, help="output directory")
    fuse.add_argument("--epsilon", type=float, help="depth tolerance in meters")
    fuse.add_argument("--stride", type=int, help="process every n-th frame")
    fuse.add_argument("--dataset", help="dataset whose frame stride preset applies")
    fuse.set_defaults(handler=cmd_fuse)

    merge = sub.add_parser("merge", help="assign mask-text pairs to 3D proposals")
    merge.add_argument("--pairs", required=True, help="pairs.jsonl from fuse")
    merge.add_argument("--proposals", required=True, help="proposals JSONL {proposal_id, point_indices}")
    merge.add_argument("--n-points", type=int, required=True, help="number of points in the scene cloud")
    merge.add_argument("--out", required=True, help="output directory")
    merge.add_argument("--iou-threshold", type=float)
    merge.add_argument("--max-captions", type=int)
    merge.add_argument("--seed", type=int, help="caption shuffle seed (unsigned 64-bit)")
    merge.set_defaults(handler=cmd_merge)

    stats = sub.add_parser("stats", help="dataset quality statistics")
    stats.add_argument("--scene", nargs=2, action="append", required=True, metavar=("MANIFEST", "PAIRS"),
                       help="scene manifest and its pairs.jsonl (repeatable)")
    stats.add_argument("--stopwords", help="newline-separated stopword list")
    stats.add_argument("--entropy-scale", type=float, help="multiplier for reported entropy")
    stats.add_argument("--out", required=True, help="output JSON file")
    stats.set_defaults(handler=cmd_stats)

    eval_sem = sub.add_parser("eval-sem", help="open-vocabulary semantic segmentation scores")
    eval_sem.add_argument("--point-feats", required=True, help="N x D point features (MSEMB001)")
    eval_sem.add_argument("--class-emb", required=True, help="C x D class embeddings in label-set order")
    eval_sem.add_argument("--cloud", required=True, help="PLY with semantic_id labels")
    eval_sem.add_argument("--labels", required=True, help="label-set JSON")
    eval_sem.add_argument("--groups", help="class groups JSON, e.g. head/common/tail")
    eval_sem.add_argument("--out", required=True, help="output JSON file")
    eval_sem.set_defaults(handler=cmd_eval_sem)

    eval_inst = sub.add_parser("eval-inst", help="instance segmentation average precision")
    eval_inst.add_argument("--predictions", required=True, help="JSONL {point_indices, score, semantic_id}")
    eval_inst.add_argument("--cloud", required=True, help="PLY with instance_id and semantic_id labels")
    eval_inst.add_argument("--labels", required=True, help="label-set JSON")
    eval_inst.add_argument("--out", required=True, help="output JSON file")
    eval_inst.set_defaults(handler=cmd_eval_inst)

    loss = sub.add_parser("loss", help="evaluate the training losses")
    loss.add_argument("--mask-emb", required=True, help="Q x D mask embeddings")
    loss.add_argument("--point-emb", required=True, help="N x D point features")
    loss.add_argument("--caption-emb", required=True, help="M x D caption embeddings aligned with --gt")
    loss.add_argument("--scores", required=True, help="Q x 2 objectness logits")
    loss.add_argument("--gt", required=True, help="JSONL of GT masks (point_indices per line)")
    loss.add_argument("--text-emb", help="K x D caption embeddings for the point-text loss")
    loss.add_argument("--pairs", help="JSONL of the K regions aligned with --text-emb")
    loss.add_argument("--temperature", type=float)
    loss.add_argument("--out", required=True, help="output JSON file")
    loss.set_defaults(handler=cmd_loss)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    setup_logger("WARNING" if args.quiet else "INFO", args.log_file)

    try:
        config = load_config(args.config)
        config = apply_overrides(config, {"threads": args.threads, "log_file": args.log_file})
        setup_logger("WARNING" if args.quiet else config["log_level"], config["log_file"])
        logger.debug("Running command %s", args.command)
        args.handler(args, config)
    except MaskTextError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected error occurred: %s", str(e))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

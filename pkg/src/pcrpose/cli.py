"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, load_config
from .evaluation import (
    COCO_KAPPAS,
    EvalConfig,
    PoseResult,
    evaluate_ap,
    load_ground_truth,
    load_results,
    oks_nms,
    write_results,
)
from .gradcheck import model_check, op_checks
from .heatmap import decode, encode
from .model import HEATMAP_STRIDE, PcrModel, load_checkpoint, predict, save_checkpoint, train_step
from .tensor import NumericalError, load_array, save_array

logger = logging.getLogger("pcrpose")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_images(image_ids, images_dir: Path, index: dict[int, dict] | None) -> dict[int, np.ndarray]:
    out = {}
    for image_id in sorted(set(image_ids)):
        candidates = []
        if index and image_id in index and "file_name" in index[image_id]:
            candidates.append(images_dir / index[image_id]["file_name"])
        candidates += [images_dir / f"{image_id:06d}.npy", images_dir / f"{image_id}.npy", images_dir / f"{image_id}.png"]
        path = next((p for p in candidates if p.exists()), None)
        if path is None:
            raise DataError(f"no image file for image_id {image_id} in {images_dir}")
        out[image_id] = D.load_image(path)
    return out


def _write_scenes(scenes: D.SyntheticScenes, out: Path) -> None:
    (out / "images").mkdir(parents=True, exist_ok=True)
    for info in scenes.image_info:
        np.save(out / "images" / info["file_name"], scenes.images[info["id"]])
    D.write_annotations(scenes.records, out / "annotations.json", scenes.image_info)
    D.write_detections(scenes.detections, out / "detections.json")


def _eval_config(joints: int, kappa: float | None) -> EvalConfig:
    if kappa is not None:
        return EvalConfig.uniform(joints, kappa)
    if joints == len(COCO_KAPPAS):
        return EvalConfig()
    raise ConfigError(f"no standard falloff constants for {joints} joints; pass --kappa")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    model_cfg = cfg.model_config()
    steps = args.steps if args.steps is not None else cfg.steps
    if args.synthetic:
        scenes = D.synthetic_scenes(args.synthetic, joints=model_cfg.joints, seed=cfg.seed)
        records, images, detections = scenes.records, scenes.images, scenes.detections
    else:
        ann = args.annotations or cfg.annotations
        img_dir = args.images or cfg.images
        if not ann or not img_dir:
            raise ConfigError("train needs --annotations and --images (or --synthetic N)")
        records = D.load_annotations(ann, model_cfg.joints)
        images = _load_images([r.image_id for r in records], Path(img_dir), D.load_image_index(ann))
        det_path = args.detections or cfg.detections
        detections = D.load_detections(det_path) if det_path else []
    if not records:
        raise DataError("no training records")
    if args.hndm:
        mined = D.mine_hard_negatives(detections, D.gt_boxes_by_image(records), cfg.hn_score_thr, model_cfg.joints)
        logger.info("mined %d hard-negative detections", len(mined))
        records = list(records) + mined
    pairs = D.COCO_FLIP_PAIRS if model_cfg.joints == 17 else ()
    batch = D.build_batch(records, images, (model_cfg.input_h, model_cfg.input_w), cfg.sigma,
                          flip=cfg.flip, flip_pairs=pairs, seed=cfg.seed, padding=cfg.crop_padding)
    model = PcrModel(model_cfg, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out / "loss.csv"
    header = ["step"] + [f"level_{l}" for l in range(1, model_cfg.L + 1)] + (["aux"] if model_cfg.aux else []) + ["total"]
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for step in range(steps):
            res = train_step(model, batch.images, batch.maps, batch.weights, cfg.lr,
                             cfg.level_weights, cfg.aux_weight)
            writer.writerow([step] + [repr(t) for t in res.terms] + [repr(res.loss)])
            if step % 50 == 0:
                logger.info("step %d loss %.6g", step, res.loss)
    save_checkpoint(model, out, seed=cfg.seed)
    print(f"checkpoint written to {out}")
    return EXIT_OK


def run_inference(model: PcrModel, detections, images: dict[int, np.ndarray], padding: float = 1.25,
                  chunk: int = 32) -> list[PoseResult]:
    cfg = model.cfg
    size = (cfg.input_h, cfg.input_w)
    results = []
    for start in range(0, len(detections), chunk):
        part = detections[start:start + chunk]
        tfs = [D.crop_transform(d.bbox, size, padding) for d in part]
        crops = np.stack([D.warp_image(images[d.image_id], tf, size) for d, tf in zip(part, tfs)])
        heatmaps = predict(model, crops)
        for det, tf, hm in zip(part, tfs, heatmaps):
            xy, scores = decode(hm, transform=tf, stride=HEATMAP_STRIDE)
            kps = np.column_stack([xy, np.full(len(xy), 2.0)])
            results.append(PoseResult(det.image_id, kps, scores, float(scores.mean()), bbox=det.bbox.copy()))
    return results


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").exists():
        raise DataError(f"no checkpoint manifest in {ckpt}")
    if not Path(args.detections).exists():
        raise DataError(f"detections file {args.detections} not found")
    model = load_checkpoint(ckpt)
    detections = [d for d in D.load_detections(args.detections) if d.score >= args.min_score]
    index = D.load_image_index(args.annotations) if args.annotations else None
    images = _load_images([d.image_id for d in detections], Path(args.images), index) if detections else {}
    results = run_inference(model, detections, images)
    if args.nms is not None and results:
        results = oks_nms(results, args.nms, _eval_config(model.cfg.joints, args.kappa).kappa_array)
    write_results(results, args.out)
    print(f"{len(results)} pose results written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gts = load_ground_truth(args.gt)
    joints = gts[0].keypoints.shape[0] if gts else 17
    if args.config:
        cfg = load_config(args.config)
        eval_cfg = cfg.eval_config()
    else:
        eval_cfg = _eval_config(joints, args.kappa)
    results = load_results(args.results, joints)
    metrics = evaluate_ap(results, gts, eval_cfg)
    print(metrics.table())
    if args.out:
        Path(args.out).write_text(json.dumps(metrics.values, indent=2))
    return EXIT_OK


def cmd_nms(args) -> int:
    results = load_results(args.results)
    joints = results[0].keypoints.shape[0] if results else 17
    kept = oks_nms(results, args.threshold, _eval_config(joints, args.kappa).kappa_array) if results else []
    write_results(kept, args.out)
    print(f"kept {len(kept)} of {len(results)}")
    return EXIT_OK


def cmd_mine_hn(args) -> int:
    dets = D.load_detections(args.detections)
    gt = D.load_annotations(args.gt, args.joints)
    mined = D.mine_hard_negatives(dets, D.gt_boxes_by_image(gt), args.score_thr, args.joints)
    D.write_annotations(mined, args.out, joints=args.joints)
    print(f"mined {len(mined)} hard negatives")
    return EXIT_OK


def cmd_pseudo(args) -> int:
    results = load_results(args.results)
    records = D.filter_pseudo_labels(results, args.thr)
    joints = results[0].keypoints.shape[0] if results else 17
    D.write_annotations(records, args.out, joints=joints)
    kept = sum(r.num_labeled for r in records)
    print(f"{len(records)} instances, {kept} joints kept")
    return EXIT_OK


def cmd_merge(args) -> int:
    cmap = D.load_category_map(args.map) if args.map else D.AIC_TO_COCO
    primary = D.load_annotations(args.primary, args.joints)
    external = D.load_annotations(args.external, args.external_joints)
    merged = D.merge_datasets(primary, external, cmap, args.joints)
    index = {**D.load_image_index(args.external), **D.load_image_index(args.primary)}
    images = [index[k] for k in sorted(index)] or None
    D.write_annotations(merged, args.out, images, joints=args.joints)
    print(f"merged {len(primary)} primary + {len(external)} external records")
    return EXIT_OK


def cmd_encode(args) -> int:
    records = D.load_annotations(args.annotations, args.joints)
    if not 0 <= args.index < len(records):
        raise DataError(f"record index {args.index} out of range ({len(records)} records)")
    rec = records[args.index]
    tf = D.crop_transform(rec.bbox, (args.input_h, args.input_w))
    target = encode(rec.keypoints, (args.input_h // HEATMAP_STRIDE, args.input_w // HEATMAP_STRIDE), args.sigma, tf)
    save_array(args.out, target.maps[None])
    print(f"encoded {int(target.weights.sum())} joints into {args.out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    maps = load_array(args.heatmaps)
    transform = None
    if args.annotations is not None:
        rec = D.load_annotations(args.annotations, maps.shape[1])[args.index]
        h, w = maps.shape[2] * HEATMAP_STRIDE, maps.shape[3] * HEATMAP_STRIDE
        transform = D.crop_transform(rec.bbox, (h, w))
    out = []
    for inst in maps:
        xy, scores = decode(inst, transform=transform)
        out.append({"keypoints": [float(v) for v in np.column_stack([xy, scores]).ravel()],
                    "score": float(scores.mean())})
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = op_checks(args.seed) + [model_check(args.seed, limit=args.samples)]
    failed = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{status} {r.name:<24} rel_err={r.rel_error:.3e} entries={r.checked}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_synth(args) -> int:
    scenes = D.synthetic_scenes(args.count, joints=args.joints, seed=args.seed)
    _write_scenes(scenes, Path(args.out))
    print(f"{args.count} synthetic scenes written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcrpose", description="Progressive context refinement keypoint toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model; writes a checkpoint and loss.csv")
    t.add_argument("--config", help="key = value run config")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--log", help="loss CSV path (default OUT/loss.csv)")
    t.add_argument("--annotations")
    t.add_argument("--images", help="directory of image files")
    t.add_argument("--detections", help="detector output, used with --hndm")
    t.add_argument("--synthetic", type=int, default=0, metavar="N", help="train on N procedural scenes")
    t.add_argument("--hndm", action="store_true", help="add mined hard-negative detections")
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="estimate poses for each detection")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--detections", required=True)
    i.add_argument("--images", required=True)
    i.add_argument("--annotations", help="COCO file whose 'images' list names the files")
    i.add_argument("--out", required=True)
    i.add_argument("--min-score", type=float, default=0.0)
    i.add_argument("--nms", type=float, help="apply OKS-NMS at this threshold")
    i.add_argument("--kappa", type=float)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="COCO keypoint AP/AR")
    e.add_argument("--results", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--config")
    e.add_argument("--kappa", type=float, help="uniform falloff constant for all joints")
    e.add_argument("--out", help="metrics JSON")
    e.set_defaults(func=cmd_eval)

    tools = sub.add_parser("tools", help="single-stage utilities")
    ts = tools.add_subparsers(dest="tool", required=True)

    n = ts.add_parser("nms")
    n.add_argument("--results", required=True)
    n.add_argument("--threshold", type=float, default=0.9)
    n.add_argument("--kappa", type=float)
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_nms)

    m = ts.add_parser("mine-hn")
    m.add_argument("--detections", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--score-thr", type=float, default=0.5)
    m.add_argument("--joints", type=int, default=17)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mine_hn)

    ps = ts.add_parser("pseudo")
    ps.add_argument("--results", required=True)
    ps.add_argument("--thr", type=float, default=0.9)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_pseudo)

    mg = ts.add_parser("merge")
    mg.add_argument("--primary", required=True)
    mg.add_argument("--external", required=True)
    mg.add_argument("--map", help="category map (default: built-in 14->17 table)")
    mg.add_argument("--joints", type=int, default=17)
    mg.add_argument("--external-joints", type=int, default=14)
    mg.add_argument("--out", required=True)
    mg.set_defaults(func=cmd_merge)

    en = ts.add_parser("encode")
    en.add_argument("--annotations", required=True)
    en.add_argument("--index", type=int, default=0)
    en.add_argument("--joints", type=int, default=17)
    en.add_argument("--input-h", type=int, default=256)
    en.add_argument("--input-w", type=int, default=192)
    en.add_argument("--sigma", type=float, default=2.0)
    en.add_argument("--out", required=True)
    en.set_defaults(func=cmd_encode)

    de = ts.add_parser("decode")
    de.add_argument("--heatmaps", required=True)
    de.add_argument("--annotations", help="map back to image pixels via this record's crop")
    de.add_argument("--index", type=int, default=0)
    de.add_argument("--out")
    de.set_defaults(func=cmd_decode)

    g = ts.add_parser("gradcheck")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=16, help="entries sampled per model parameter")
    g.set_defaults(func=cmd_gradcheck)

    sy = ts.add_parser("synth", help="write procedural scenes, annotations and detections")
    sy.add_argument("--count", type=int, default=8)
    sy.add_argument("--joints", type=int, default=4)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, D.AnnotationError, FileNotFoundError, KeyError, json.JSONDecodeError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

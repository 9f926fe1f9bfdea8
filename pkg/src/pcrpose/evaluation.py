"""Object keypoint similarity, OKS-based NMS and COCO-style AP/AR."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# COCO per-keypoint sigmas; the falloff constant used here is twice the sigma.
COCO_SIGMAS = np.array([
    0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62,
    1.07, 1.07, 0.87, 0.87, 0.89, 0.89,
]) / 10.0
COCO_KAPPAS = 2.0 * COCO_SIGMAS

METRIC_NAMES = ("AP", "AP@.5", "AP@.75", "AP^M", "AP^L", "AR")

_EPS = np.spacing(1)


class UndefinedOKSError(ValueError):
    pass


@dataclass
class PersonDetection:
    image_id: int
    bbox: np.ndarray  # x, y, w, h
    score: float
    category_id: int = 1

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64)
        if self.bbox.shape != (4,) or self.bbox[2] < 0 or self.bbox[3] < 0:
            raise ValueError(f"invalid bbox {self.bbox.tolist()}")


@dataclass
class PoseResult:
    image_id: int
    keypoints: np.ndarray      # (J, 3)
    joint_scores: np.ndarray   # (J,)
    score: float
    bbox: np.ndarray | None = None
    area: float | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.joint_scores = np.asarray(self.joint_scores, dtype=np.float64)
        if not np.isfinite(self.score):
            raise ValueError("instance score must be finite")
        if self.bbox is not None:
            self.bbox = np.asarray(self.bbox, dtype=np.float64)

    def extent_area(self) -> float:
        """Area used when this result plays the reference role in OKS."""
        if self.area is not None:
            return float(self.area)
        if self.bbox is not None:
            return float(self.bbox[2] * self.bbox[3])
        return keypoint_extent_area(self.keypoints)

    def to_json(self) -> dict:
        flat = np.column_stack([self.keypoints[:, :2], self.joint_scores]).ravel()
        out = {"image_id": int(self.image_id), "category_id": 1,
               "keypoints": [float(v) for v in flat], "score": float(self.score)}
        if self.bbox is not None:
            out["bbox"] = [float(v) for v in self.bbox]
        return out


def keypoint_extent_area(kps: np.ndarray) -> float:
    xy = np.asarray(kps, dtype=np.float64)[:, :2]
    if len(xy) == 0:
        return 0.0
    span = xy.max(axis=0) - xy.min(axis=0)
    return float(span[0] * span[1])


@dataclass(frozen=True)
class EvalConfig:
    kappas: tuple[float, ...] = tuple(COCO_KAPPAS)
    thresholds: tuple[float, ...] = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
    medium_range: tuple[float, float] = (32.0 ** 2, 96.0 ** 2)
    large_range: tuple[float, float] = (96.0 ** 2, 1e10)
    max_dets: int = 20
    recall_points: int = 101

    def __post_init__(self):
        if len(self.thresholds) != 10:
            raise ValueError(f"expected 10 OKS thresholds, got {len(self.thresholds)}")
        if any(k <= 0 for k in self.kappas):
            raise ValueError("falloff constants must be positive")

    @property
    def kappa_array(self) -> np.ndarray:
        return np.asarray(self.kappas, dtype=np.float64)

    @classmethod
    def uniform(cls, joints: int, kappa: float = 1.0, **kw) -> "EvalConfig":
        return cls(kappas=(float(kappa),) * joints, **kw)


def iou(a, b) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return inter / union


def _oks_terms(pred_xy: np.ndarray, gt_xy: np.ndarray, area: float, kappas: np.ndarray) -> np.ndarray:
    d2 = ((pred_xy - gt_xy) ** 2).sum(axis=-1)
    return np.exp(-d2 / (2.0 * (area + _EPS) * kappas ** 2))


def oks(pred, gt, area: float, kappas) -> float:
    """Mean similarity over the joints labeled in ``gt`` (``v > 0``)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    kappas = np.asarray(kappas, dtype=np.float64)
    labeled = gt[:, 2] > 0
    if not labeled.any():
        raise UndefinedOKSError("OKS is undefined for a ground truth with no labeled joints")
    terms = _oks_terms(pred[labeled, :2], gt[labeled, :2], area, kappas[labeled])
    return float(terms.mean())


def pose_similarity(candidate: PoseResult, reference: PoseResult, kappas) -> float:
    """OKS between two predictions, all joints counted, scaled by the reference area."""
    terms = _oks_terms(candidate.keypoints[:, :2], reference.keypoints[:, :2],
                       reference.extent_area(), np.asarray(kappas, dtype=np.float64))
    return float(terms.mean())


def oks_nms(results: Sequence[PoseResult], threshold: float = 0.9, kappas=COCO_KAPPAS) -> list[PoseResult]:
    """Greedy suppression per image.

    Results are visited by descending instance score (ties keep input order);
    one survives only if its OKS against every survivor so far is at most
    ``threshold``. The kept list is ordered by score.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    order = sorted(range(len(results)), key=lambda i: -results[i].score)
    kept: list[int] = []
    for i in order:
        cand = results[i]
        if all(
            results[k].image_id != cand.image_id
            or pose_similarity(cand, results[k], kappas) <= threshold
            for k in kept
        ):
            kept.append(i)
    return [results[i] for i in kept]


# ---------------------------------------------------------------------------
# AP / AR


@dataclass
class GroundTruth:
    image_id: int
    keypoints: np.ndarray  # (J, 3)
    area: float
    iscrowd: bool = False
    bbox: np.ndarray | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)

    @property
    def num_labeled(self) -> int:
        return int((self.keypoints[:, 2] > 0).sum())


@dataclass
class Metrics:
    values: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def as_row(self) -> list[float]:
        return [self.values[k] for k in METRIC_NAMES]

    def table(self) -> str:
        head = " | ".join(f"{k:>6}" for k in METRIC_NAMES)
        row = " | ".join(f"{v:6.3f}" for v in self.as_row())
        return f"{head}\n{row}"


def _evaluate_image(dets: list[PoseResult], gts: list[GroundTruth], cfg: EvalConfig, area_rng):
    """Match detections to ground truths for every threshold on one image.

    Returns detection scores, a (T, D) matched mask, a (T, D) ignore mask and
    the count of non-ignored ground truths.
    """
    kappas = cfg.kappa_array
    gt_ignore = np.array([not (area_rng[0] <= g.area <= area_rng[1]) for g in gts], dtype=bool)
    # non-ignored ground truths first so a detection prefers them
    g_order = np.argsort(gt_ignore, kind="stable")
    gts = [gts[i] for i in g_order]
    gt_ignore = gt_ignore[g_order]
    dets = sorted(dets, key=lambda d: -d.score)[: cfg.max_dets]
    t_count = len(cfg.thresholds)
    matched = np.zeros((t_count, len(dets)), dtype=bool)
    ignored = np.zeros((t_count, len(dets)), dtype=bool)
    if dets and gts:
        sims = np.array([[oks(d.keypoints, g.keypoints, g.area, kappas) for g in gts] for d in dets])
    else:
        sims = np.zeros((len(dets), len(gts)))
    for t, thr in enumerate(cfg.thresholds):
        gt_taken = np.zeros(len(gts), dtype=bool)
        for di in range(len(dets)):
            best, best_sim = -1, min(thr, 1 - 1e-10)
            for gi in range(len(gts)):
                if gt_taken[gi]:
                    continue
                # once a real match exists, stop at the ignored tail
                if best > -1 and not gt_ignore[best] and gt_ignore[gi]:
                    break
                if sims[di, gi] < best_sim:
                    continue
                best, best_sim = gi, sims[di, gi]
            if best == -1:
                continue
            gt_taken[best] = True
            matched[t, di] = True
            ignored[t, di] = gt_ignore[best]
    det_area_out = np.array(
        [not (area_rng[0] <= (d.area if d.area is not None else keypoint_extent_area(d.keypoints)) <= area_rng[1])
         for d in dets], dtype=bool)
    ignored |= (~matched) & det_area_out[None, :]
    return np.array([d.score for d in dets]), matched, ignored, int((~gt_ignore).sum())


def _accumulate(per_image, cfg: EvalConfig) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated precision and final recall per threshold."""
    t_count = len(cfg.thresholds)
    npig = sum(n for *_, n in per_image)
    ap = np.zeros(t_count)
    ar = np.zeros(t_count)
    if npig == 0:
        return ap, ar
    scores = np.concatenate([s for s, *_ in per_image]) if per_image else np.zeros(0)
    if scores.size == 0:
        return ap, ar
    matched = np.concatenate([m for _, m, _, _ in per_image], axis=1)
    ignored = np.concatenate([g for _, _, g, _ in per_image], axis=1)
    order = np.argsort(-scores, kind="mergesort")
    matched, ignored = matched[:, order], ignored[:, order]
    rec_thrs = np.linspace(0.0, 1.0, cfg.recall_points)
    for t in range(t_count):
        tp = np.cumsum(matched[t] & ~ignored[t]).astype(np.float64)
        fp = np.cumsum(~matched[t] & ~ignored[t]).astype(np.float64)
        recall = tp / npig
        precision = tp / np.maximum(tp + fp, _EPS)
        ar[t] = recall[-1] if recall.size else 0.0
        # precision envelope, then sample at the fixed recall grid
        for i in range(len(precision) - 1, 0, -1):
            precision[i - 1] = max(precision[i - 1], precision[i])
        idx = np.searchsorted(recall, rec_thrs, side="left")
        q = np.zeros(len(rec_thrs))
        valid = idx < len(precision)
        q[valid] = precision[idx[valid]]
        ap[t] = q.mean()
    return ap, ar


def evaluate_ap(results: Iterable[PoseResult], ground_truth: Iterable[GroundTruth], cfg: EvalConfig | None = None) -> Metrics:
    """COCO keypoint AP/AR at ten OKS thresholds.

    Ground truths with no labeled joint, and crowd annotations, take no part.
    Returns AP, AP@.5, AP@.75, AP^M, AP^L and AR (all-area recall).
    """
    cfg = cfg or EvalConfig()
    gts_by_img: dict[int, list[GroundTruth]] = defaultdict(list)
    for g in ground_truth:
        if g.iscrowd or g.num_labeled == 0:
            continue
        gts_by_img[g.image_id].append(g)
    dts_by_img: dict[int, list[PoseResult]] = defaultdict(list)
    for d in results:
        dts_by_img[d.image_id].append(d)
    images = sorted(set(gts_by_img) | set(dts_by_img))

    def run(area_rng):
        per_image = [_evaluate_image(dts_by_img.get(i, []), gts_by_img.get(i, []), cfg, area_rng) for i in images]
        return _accumulate(per_image, cfg)

    ap_all, ar_all = run((0.0, 1e10))
    ap_m, _ = run(cfg.medium_range)
    ap_l, _ = run(cfg.large_range)
    thr = np.asarray(cfg.thresholds)
    i50 = int(np.argmin(np.abs(thr - 0.5)))
    i75 = int(np.argmin(np.abs(thr - 0.75)))
    return Metrics({
        "AP": float(ap_all.mean()),
        "AP@.5": float(ap_all[i50]),
        "AP@.75": float(ap_all[i75]),
        "AP^M": float(ap_m.mean()),
        "AP^L": float(ap_l.mean()),
        "AR": float(ar_all.mean()),
    })


# ---------------------------------------------------------------------------
# file formats


def _reshape_keypoints(flat, joints: int | None, where: str) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size % 3 or (joints is not None and flat.size != 3 * joints):
        expected = "a multiple of 3" if joints is None else 3 * joints
        raise ValueError(f"{where}: keypoint array has {flat.size} values, expected {expected}")
    return flat.reshape(-1, 3)


def load_results(path: str | Path, joints: int | None = None) -> list[PoseResult]:
    """Read a COCO keypoint results file: ``[{image_id, keypoints, score}]``."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValueError(f"{path}: results file must hold a JSON array")
    out = []
    for i, item in enumerate(data):
        kps = _reshape_keypoints(item["keypoints"], joints, f"result {i}")
        xyv = kps.copy()
        xyv[:, 2] = 2.0
        out.append(PoseResult(int(item["image_id"]), xyv, kps[:, 2].copy(), float(item["score"]),
                              bbox=item.get("bbox"), area=item.get("area")))
    return out


def write_results(results: Sequence[PoseResult], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in results], indent=1))


def load_ground_truth(path: str | Path, joints: int | None = None) -> list[GroundTruth]:
    data = json.loads(Path(path).read_text())
    out = []
    for i, ann in enumerate(data.get("annotations", [])):
        kps = _reshape_keypoints(ann["keypoints"], joints, f"annotation {i}")
        bbox = ann.get("bbox")
        area = ann.get("area")
        if area is None:
            area = float(bbox[2] * bbox[3]) if bbox is not None else keypoint_extent_area(kps[kps[:, 2] > 0])
        out.append(GroundTruth(int(ann["image_id"]), kps, float(area), bool(ann.get("iscrowd", 0)),
                               None if bbox is None else np.asarray(bbox, dtype=np.float64)))
    return out


def results_from_ground_truth(gts: Sequence[GroundTruth], score: float = 1.0) -> list[PoseResult]:
    """Perfect predictions, handy for sanity runs of the evaluator."""
    out = []
    for g in gts:
        js = (g.keypoints[:, 2] > 0).astype(np.float64)
        out.append(PoseResult(g.image_id, g.keypoints.copy(), js, score, area=g.area))
    return out

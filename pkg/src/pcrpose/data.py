"""Annotation I/O, person crops, and the data-side training strategies:
hard-negative detection mining, pseudo-label filtering and dataset merging.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .evaluation import PersonDetection, PoseResult, iou
from .heatmap import encode, hard_negative_target
from .model import HEATMAP_STRIDE

logger = logging.getLogger(__name__)

SOURCES = ("labeled", "pseudo", "hard-negative", "external")

COCO_FLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))

# AI Challenger (0-based: r-sho, r-elb, r-wri, l-sho, l-elb, l-wri, r-hip, r-knee,
# r-ank, l-hip, l-knee, l-ank, head-top, neck) to COCO joint indices.
# UNVERIFIED placeholder; head-top and neck have no COCO counterpart.
AIC_TO_COCO: dict[int, int | None] = {
    0: 6, 1: 8, 2: 10, 3: 5, 4: 7, 5: 9, 6: 12, 7: 14, 8: 16, 9: 11, 10: 13, 11: 15,
    12: None, 13: None,
}


class AnnotationError(ValueError):
    pass


@dataclass
class InstanceRecord:
    image_id: int
    bbox: np.ndarray
    keypoints: np.ndarray  # (J, 3)
    source: str = "labeled"
    score: float | None = None
    ann_id: int | None = None
    area: float | None = None

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.source not in SOURCES:
            raise ValueError(f"unknown record source {self.source!r}")

    @property
    def num_labeled(self) -> int:
        return int((self.keypoints[:, 2] > 0).sum())

    def to_json(self, ann_id: int) -> dict:
        out = {
            "id": int(self.ann_id if self.ann_id is not None else ann_id),
            "image_id": int(self.image_id),
            "category_id": 1,
            "bbox": [float(v) for v in self.bbox],
            "keypoints": [float(v) for v in self.keypoints.ravel()],
            "num_keypoints": self.num_labeled,
            "area": float(self.area if self.area is not None else self.bbox[2] * self.bbox[3]),
            "iscrowd": 0,
            "source": self.source,
        }
        if self.score is not None:
            out["score"] = float(self.score)
        return out


# ---------------------------------------------------------------------------
# COCO-format files


def load_annotations(path: str | Path, joints: int = 17) -> list[InstanceRecord]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON ({exc})") from exc
    anns = data.get("annotations", []) if isinstance(data, dict) else None
    if anns is None:
        raise AnnotationError(f"{path}: expected an object with an 'annotations' list")
    records = []
    for i, ann in enumerate(anns):
        kps = np.asarray(ann.get("keypoints", []), dtype=np.float64)
        if kps.size != 3 * joints:
            raise AnnotationError(f"{path}: annotation {i} has {kps.size} keypoint values, expected {3 * joints}")
        records.append(InstanceRecord(
            image_id=int(ann["image_id"]),
            bbox=ann.get("bbox", [0, 0, 0, 0]),
            keypoints=kps.reshape(joints, 3),
            source=ann.get("source", "labeled"),
            score=ann.get("score"),
            ann_id=ann.get("id"),
            area=ann.get("area"),
        ))
    return records


def load_image_index(path: str | Path) -> dict[int, dict]:
    data = json.loads(Path(path).read_text())
    return {int(im["id"]): im for im in data.get("images", [])}


def write_annotations(records: Sequence[InstanceRecord], path: str | Path, images: Sequence[dict] | None = None,
                      joints: int | None = None) -> None:
    if images is None:
        images = [{"id": i} for i in sorted({r.image_id for r in records})]
    j = joints if joints is not None else (records[0].keypoints.shape[0] if records else 17)
    payload = {
        "images": list(images),
        "annotations": [r.to_json(i + 1) for i, r in enumerate(records)],
        "categories": [{"id": 1, "name": "person", "keypoints": [f"joint_{k}" for k in range(j)]}],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_detections(path: str | Path) -> list[PersonDetection]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise AnnotationError(f"{path}: detection file must hold a JSON array")
    return [PersonDetection(int(d["image_id"]), d["bbox"], float(d["score"]), int(d.get("category_id", 1)))
            for d in data]


def write_detections(dets: Sequence[PersonDetection], path: str | Path) -> None:
    Path(path).write_text(json.dumps(
        [{"image_id": d.image_id, "category_id": d.category_id, "bbox": [float(v) for v in d.bbox],
          "score": float(d.score)} for d in dets], indent=1))


def load_category_map(path: str | Path) -> dict[int, int | None]:
    """Parse ``external_index = primary_index`` lines; ``-`` as target discards."""
    mapping: dict[int, int | None] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise AnnotationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        src = int(key)
        if src in mapping:
            raise AnnotationError(f"{path}:{lineno}: external joint {src} mapped twice")
        mapping[src] = None if value in ("-", "none", "") else int(value)
    return mapping


# ---------------------------------------------------------------------------
# crops


@dataclass
class CropTransform:
    """Affine map from image pixels to network-input pixels and back."""

    matrix: np.ndarray   # (2, 3)
    inverse: np.ndarray  # (2, 3)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "CropTransform":
        m = np.asarray(m, dtype=np.float64)
        full = np.vstack([m, [0.0, 0.0, 1.0]])
        if abs(np.linalg.det(full)) < 1e-12:
            raise ValueError("crop transform is not invertible")
        return cls(m, np.linalg.inv(full)[:2])

    @staticmethod
    def _map(m: np.ndarray, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ m[:, :2].T + m[:, 2]

    def apply(self, xy) -> np.ndarray:
        return self._map(self.matrix, xy)

    def invert(self, xy) -> np.ndarray:
        return self._map(self.inverse, xy)

    def then(self, m: np.ndarray) -> "CropTransform":
        """Compose with a further input-space affine ``m``."""
        full = np.vstack([self.matrix, [0.0, 0.0, 1.0]])
        mm = np.vstack([np.asarray(m, dtype=np.float64), [0.0, 0.0, 1.0]])
        return CropTransform.from_matrix((mm @ full)[:2])


def crop_transform(bbox, input_size: tuple[int, int], padding: float = 1.25) -> CropTransform:
    """Fit ``bbox`` to the input aspect ratio, enlarge by ``padding``, centre it.

    ``input_size`` is ``(height, width)``.
    """
    x, y, w, h = (float(v) for v in bbox)
    if not (w > 0 and h > 0):
        raise ValueError(f"degenerate box {list(bbox)}")
    in_h, in_w = input_size
    aspect = in_w / in_h
    cx, cy = x + w / 2.0, y + h / 2.0
    if w > aspect * h:
        h = w / aspect
    else:
        w = h * aspect
    w *= padding
    s = in_w / w
    m = np.array([[s, 0.0, in_w / 2.0 - s * cx],
                  [0.0, s, in_h / 2.0 - s * cy]])
    return CropTransform.from_matrix(m)


def warp_image(image: np.ndarray, transform: CropTransform, input_size: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample an ``(H, W, C)`` image into a ``(C, h, w)`` crop."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    in_h, in_w = input_size
    gy, gx = np.mgrid[0:in_h, 0:in_w]
    src = transform.invert(np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64))
    coords = [src[:, 1], src[:, 0]]
    out = np.empty((image.shape[2], in_h, in_w))
    for c in range(image.shape[2]):
        out[c] = map_coordinates(image[:, :, c], coords, order=1, mode="constant", cval=0.0).reshape(in_h, in_w)
    return out


def flip_matrix(width: int) -> np.ndarray:
    return np.array([[-1.0, 0.0, width - 1.0], [0.0, 1.0, 0.0]])


def flip_sample(image_chw: np.ndarray, kps: np.ndarray, pairs: Sequence[tuple[int, int]]):
    """Mirror a crop and its input-space keypoints, swapping left/right joints."""
    width = image_chw.shape[2]
    img = image_chw[:, :, ::-1].copy()
    out = np.asarray(kps, dtype=np.float64).copy()
    out[:, 0] = width - 1 - out[:, 0]
    for a, b in pairs:
        out[[a, b]] = out[[b, a]]
    return img, out


# ---------------------------------------------------------------------------
# training strategies


def mine_hard_negatives(detections: Sequence[PersonDetection], gt_boxes: Mapping[int, Sequence],
                        score_thr: float = 0.5, joints: int = 17) -> list[InstanceRecord]:
    """Confident detections that touch no ground-truth person at all."""
    if not 0 <= score_thr <= 1:
        raise ValueError(f"score_thr must lie in [0, 1], got {score_thr}")
    mined = []
    for det in detections:
        if det.score < score_thr:
            continue
        if any(iou(det.bbox, g) > 0 for g in gt_boxes.get(det.image_id, ())):
            continue
        mined.append(InstanceRecord(det.image_id, det.bbox.copy(), np.zeros((joints, 3)),
                                    source="hard-negative", score=det.score))
    return mined


def gt_boxes_by_image(records: Sequence[InstanceRecord]) -> dict[int, list[np.ndarray]]:
    out: dict[int, list[np.ndarray]] = {}
    for r in records:
        if r.source == "hard-negative":
            continue
        out.setdefault(r.image_id, []).append(r.bbox)
    return out


def filter_pseudo_labels(results: Sequence[PoseResult], keep_thr: float = 0.9) -> list[InstanceRecord]:
    """Keep joints scoring strictly above ``keep_thr``; the rest become unlabeled."""
    records = []
    for r in results:
        keep = r.joint_scores > keep_thr
        if not keep.any():
            continue
        kps = np.zeros((len(keep), 3))
        kps[keep, :2] = r.keypoints[keep, :2]
        kps[keep, 2] = 2.0
        if r.bbox is not None:
            bbox = r.bbox.copy()
        else:
            lo, hi = kps[keep, :2].min(axis=0), kps[keep, :2].max(axis=0)
            bbox = np.array([lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1]])
        records.append(InstanceRecord(r.image_id, bbox, kps, source="pseudo", score=r.score))
    return records


def remap_keypoints(kps: np.ndarray, category_map: Mapping[int, int | None], joints: int) -> np.ndarray:
    targets = [t for t in category_map.values() if t is not None]
    if len(targets) != len(set(targets)):
        raise ValueError("category map sends two external joints to the same target")
    if any(not 0 <= t < joints for t in targets):
        raise ValueError(f"category map target outside [0, {joints})")
    out = np.zeros((joints, 3))
    for src, dst in category_map.items():
        if dst is None or src >= len(kps):
            continue
        out[dst] = kps[src]
    return out


def merge_datasets(primary: Sequence[InstanceRecord], external: Sequence[InstanceRecord],
                   category_map: Mapping[int, int | None], joints: int = 17) -> list[InstanceRecord]:
    """Primary records unchanged, followed by external ones remapped to the primary joints."""
    merged = list(primary)
    for r in external:
        merged.append(InstanceRecord(r.image_id, r.bbox.copy(), remap_keypoints(r.keypoints, category_map, joints),
                                     source="external", score=r.score, area=r.area))
    return merged


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    images: np.ndarray    # (N, C, H, W)
    maps: np.ndarray      # (N, J, h, w)
    weights: np.ndarray   # (N, J)
    transforms: list[CropTransform] = field(default_factory=list)
    flipped: np.ndarray | None = None
    input_keypoints: np.ndarray | None = None  # (N, J, 3) in input pixels


def build_batch(records: Sequence[InstanceRecord], images: Mapping[int, np.ndarray], input_size: tuple[int, int],
                sigma: float = 2.0, flip: bool = False, flip_pairs: Sequence[tuple[int, int]] = (),
                seed: int = 0, padding: float = 1.25) -> Batch:
    """Crop every record, optionally mirror it, and encode its heatmap target.

    Hard-negative records get all-zero targets with every joint weighted.
    Flip decisions come from ``seed`` alone, so the batch is reproducible.
    """
    if not records:
        raise ValueError("build_batch needs at least one record")
    rng = np.random.default_rng(seed)
    in_h, in_w = input_size
    hm_size = (in_h // HEATMAP_STRIDE, in_w // HEATMAP_STRIDE)
    crops, maps, weights, transforms, flags, kps_in = [], [], [], [], [], []
    for rec in records:
        if rec.image_id not in images:
            raise KeyError(f"no image data for image_id {rec.image_id}")
        image = np.asarray(images[rec.image_id])
        if image.ndim not in (2, 3) or not np.all(np.isfinite(image)):
            raise ValueError(f"unreadable image data for image_id {rec.image_id}")
        tf = crop_transform(rec.bbox, input_size, padding)
        crop = warp_image(image, tf, input_size)
        kp = rec.keypoints.copy()
        kp[:, :2] = tf.apply(kp[:, :2])
        do_flip = bool(flip and rng.random() < 0.5)
        if do_flip:
            crop, kp = flip_sample(crop, kp, flip_pairs)
            tf = tf.then(flip_matrix(in_w))
        if rec.source == "hard-negative":
            target = hard_negative_target(len(kp), hm_size)
        else:
            target = encode(kp, hm_size, sigma)
        crops.append(crop)
        maps.append(target.maps)
        weights.append(target.weights)
        transforms.append(tf)
        flags.append(do_flip)
        kps_in.append(kp)
    return Batch(np.stack(crops), np.stack(maps), np.stack(weights), transforms, np.array(flags), np.stack(kps_in))


# ---------------------------------------------------------------------------
# procedural scenes


def joint_palette(joints: int) -> np.ndarray:
    """Distinct RGB colours, one per joint."""
    base = np.array([
        [1.0, 0.1, 0.1], [0.1, 1.0, 0.1], [0.1, 0.1, 1.0], [1.0, 1.0, 0.1],
        [1.0, 0.1, 1.0], [0.1, 1.0, 1.0], [1.0, 0.6, 0.1], [0.6, 0.1, 1.0],
    ])
    reps = int(np.ceil(joints / len(base)))
    shades = np.concatenate([base * (1.0 - 0.3 * r) for r in range(reps)])
    return shades[:joints]


def draw_disk(image: np.ndarray, cx: float, cy: float, radius: float, color) -> None:
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    image[mask] = color


def draw_square(image: np.ndarray, cx: float, cy: float, half: float, color) -> None:
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    image[mask] = color


@dataclass
class SyntheticScenes:
    images: dict[int, np.ndarray]
    records: list[InstanceRecord]
    detections: list[PersonDetection]
    image_info: list[dict]


def synthetic_scenes(count: int, joints: int = 4, seed: int = 0, image_size: tuple[int, int] = (96, 128),
                     box_size: tuple[float, float] = (36.0, 48.0), radius: float = 3.0, min_sep: float = 10.0,
                     distractor: bool = True) -> SyntheticScenes:
    """Deterministic scenes: one 'person' of coloured joint disks on the left half,
    and optionally a cluster of same-coloured squares on the right half.

    Detections list the person box (score 0.98), the square cluster (0.9) and a
    low-confidence empty box (0.2).
    """
    rng = np.random.default_rng(seed)
    img_h, img_w = image_size
    bw, bh = box_size
    palette = joint_palette(joints)
    images, records, dets, info = {}, [], [], []
    margin = radius + 2.0
    for idx in range(count):
        image_id = idx + 1
        img = np.full((img_h, img_w, 3), 0.05)
        bx = rng.uniform(4.0, img_w / 2 - bw - 4.0)
        by = rng.uniform(4.0, img_h - bh - 4.0)
        pts = _separated_points(rng, joints, (bx + margin, by + margin, bw - 2 * margin, bh - 2 * margin), min_sep)
        kps = np.column_stack([pts, np.full(joints, 2.0)])
        for j, (x, y) in enumerate(pts):
            draw_disk(img, x, y, radius, palette[j])
        box = np.array([bx, by, bw, bh])
        records.append(InstanceRecord(image_id, box, kps, "labeled", ann_id=image_id, area=bw * bh))
        dets.append(PersonDetection(image_id, box + rng.uniform(-1.0, 1.0, 4) * [1, 1, 0, 0], 0.98))
        if distractor:
            dx = rng.uniform(img_w / 2 + 4.0, img_w - bw - 4.0)
            dy = rng.uniform(4.0, img_h - bh - 4.0)
            dpts = _separated_points(rng, joints, (dx + margin, dy + margin, bw - 2 * margin, bh - 2 * margin), min_sep)
            for j, (x, y) in enumerate(dpts):
                draw_square(img, x, y, radius, palette[rng.integers(joints)])
            dets.append(PersonDetection(image_id, [dx, dy, bw, bh], 0.9))
        dets.append(PersonDetection(image_id, [img_w - 20.0, img_h - 20.0, 12.0, 16.0], 0.2))
        images[image_id] = img
        info.append({"id": image_id, "file_name": f"{image_id:06d}.npy", "height": img_h, "width": img_w})
    return SyntheticScenes(images, records, dets, info)


def _separated_points(rng: np.random.Generator, n: int, box, min_sep: float) -> np.ndarray:
    x, y, w, h = box
    for _ in range(1000):
        pts = np.column_stack([rng.uniform(x, x + w, n), rng.uniform(y, y + h, n)])
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(n) * 1e9
        if d.min() >= min_sep:
            return pts
    raise RuntimeError("could not place separated points; box too small")


def load_image(path: str | Path) -> np.ndarray:
    """Minimal raster loader: ``.npy`` arrays, or anything Pillow can open."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise ValueError(f"cannot read {path}: install Pillow for non-.npy images") from exc
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0

"""KITTI-protocol matching and 11/40-point interpolated average precision."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import geometry as geo
from .data import KittiLabel, parse_calib, read_labels

log = logging.getLogger(__name__)

TP, FP, IGNORED = 1, 0, -1

# classes treated as "don't penalize" neighbours of the evaluated class
NEIGHBOURS = {"Car": ("Van",), "Pedestrian": ("Person_sitting",)}


@dataclass(frozen=True)
class DifficultyFilter:
    name: str
    min_height: float
    max_occlusion: int
    max_truncation: float

    def accepts(self, lab: KittiLabel) -> bool:
        return (
            lab.height_2d >= self.min_height
            and lab.occlusion <= self.max_occlusion
            and lab.truncation <= self.max_truncation
        )


EASY = DifficultyFilter("Easy", 40, 0, 0.15)
MODERATE = DifficultyFilter("Moderate", 25, 1, 0.30)
HARD = DifficultyFilter("Hard", 25, 2, 0.50)
DIFFICULTIES = (EASY, MODERATE, HARD)
# column order of the printed tables (sorted by the headline tier first)
TABLE_ORDER = (MODERATE, EASY, HARD)

IOU_FUNCS: dict[str, Callable[[geo.Box3D, geo.Box3D], float]] = {"3d": geo.iou_3d, "bev": geo.iou_bev}


@dataclass
class PRCurve:
    scores: np.ndarray  # operating-point thresholds, descending
    precision: np.ndarray
    recall: np.ndarray
    n_gt: int
    matches: list[tuple[int, int, int, float]] = field(default_factory=list)  # frame, det, gt, iou
    tp: np.ndarray | None = None
    fp: np.ndarray | None = None


def _overlap_2d(det, region) -> float:
    """Intersection area over the detection's own area."""
    w = min(det[2], region[2]) - max(det[0], region[0])
    h = min(det[3], region[3]) - max(det[1], region[1])
    area = (det[2] - det[0]) * (det[3] - det[1])
    if w <= 0 or h <= 0 or area <= 0:
        return 0.0
    return w * h / area


def detection_order(dets: Sequence[KittiLabel]) -> list[int]:
    """Indices by descending score; ties keep file order."""
    return sorted(range(len(dets)), key=lambda i: -_score(dets[i]))


def _score(lab: KittiLabel) -> float:
    return 1.0 if lab.score is None else lab.score


def match_frame(dets, gts, cls: str, iou_fn, thresh: float, filt: DifficultyFilter):
    """Greedy score-ordered assignment for one frame.

    Returns ``(status, matches, n_valid)`` where ``status[i]`` is TP, FP or
    IGNORED for detection ``i`` (detections of other classes are IGNORED).
    """
    neighbours = NEIGHBOURS.get(cls, ())
    valid, ignored, regions = [], [], []
    for j, g in enumerate(gts):
        if g.cls == cls:
            (valid if filt.accepts(g) else ignored).append(j)
        elif g.cls in neighbours:
            ignored.append(j)
        elif g.dont_care:
            regions.append(g.bbox)
    boxes = {j: gts[j].box3d() for j in valid + ignored}
    used = set()
    status = np.full(len(dets), IGNORED)
    matches = []
    for i in detection_order(dets):
        d = dets[i]
        if d.cls != cls:
            continue
        box = d.box3d()
        best, best_iou = -1, -1.0
        for j in valid:
            if j in used:
                continue
            iou = iou_fn(box, boxes[j])
            if iou >= thresh and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used.add(best)
            status[i] = TP
            matches.append((i, best, best_iou))
        elif any(iou_fn(box, boxes[j]) >= thresh for j in ignored):
            status[i] = IGNORED
        elif any(_overlap_2d(d.bbox, r) > 0.5 for r in regions):
            status[i] = IGNORED
        else:
            status[i] = FP
    return status, matches, len(valid)


def match(frames, cls: str = "Car", iou_fn=geo.iou_3d, thresh: float = 0.7, filt: DifficultyFilter = MODERATE) -> PRCurve:
    """Build the precision/recall curve over ``frames = [(dets, gts), ...]``."""
    rows = []  # (score, frame, det, status)
    n_gt = 0
    all_matches = []
    for f, (dets, gts) in enumerate(frames):
        status, matches, n_valid = match_frame(dets, gts, cls, iou_fn, thresh, filt)
        n_gt += n_valid
        for i, s in enumerate(status):
            if s != IGNORED:
                rows.append((-_score(dets[i]), f, i, s))
        all_matches.extend((f, i, j, iou) for i, j, iou in matches)
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    scores = np.array([-r[0] for r in rows])
    is_tp = np.array([r[3] == TP for r in rows], dtype=np.int64)
    tp = np.cumsum(is_tp)
    fp = np.cumsum(1 - is_tp)
    # one operating point per distinct score: the last row of each tie group
    last = np.flatnonzero(np.append(scores[1:] != scores[:-1], True)) if len(rows) else np.array([], int)
    tp, fp, scores = tp[last], fp[last], scores[last]
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_gt if n_gt else np.zeros(len(tp))
    return PRCurve(scores, precision.astype(float), recall.astype(float), n_gt, all_matches, tp, fp)


def interpolated_precision(curve: PRCurve, r: float) -> float:
    sel = curve.recall >= r
    return float(curve.precision[sel].max()) if sel.any() else 0.0


def ap_11(curve: PRCurve) -> float:
    if curve.n_gt == 0:
        return 0.0
    return sum(interpolated_precision(curve, i / 10) for i in range(11)) / 11


def ap_40(curve: PRCurve) -> float:
    if curve.n_gt == 0:
        return 0.0
    return sum(interpolated_precision(curve, i / 40) for i in range(1, 41)) / 40


AP_FUNCS = {11: ap_11, 40: ap_40}


# ---------------------------------------------------------------- split evaluation


@dataclass
class Report:
    rows: list[tuple[str, str, str, float]]  # class, metric, difficulty, AP in percent
    criterion: int

    def value(self, cls: str, metric: str, difficulty: str) -> float:
        for c, m, d, ap in self.rows:
            if (c, m, d) == (cls, metric, difficulty):
                return ap
        raise KeyError((cls, metric, difficulty))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "metric", "difficulty", "ap"])
        for c, m, d, ap in self.rows:
            w.writerow([c, m, d, f"{ap:.4f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        classes = list(dict.fromkeys(r[0] for r in self.rows))
        metrics = list(dict.fromkeys(r[1] for r in self.rows))
        names = [f.name for f in TABLE_ORDER]
        lines = []
        for cls in classes:
            lines.append(f"{cls} (AP|R{self.criterion}, IoU 0.7)")
            lines.append(f"{'':<10}" + "".join(f"{n:>10}" for n in names))
            for m in metrics:
                label = "AP_3D" if m == "3d" else "AP_BEV"
                vals = "".join(f"{self.value(cls, m, n):>10.2f}" for n in names)
                lines.append(f"{label:<10}{vals}")
        return "\n".join(lines) + "\n"


def load_split(det_dir, gt_dir, calib_dir=None):
    """Pair detection and ground-truth files by frame id."""
    gt_dir, det_dir = Path(gt_dir), Path(det_dir)
    frames = []
    for gt_path in sorted(gt_dir.glob("*.txt")):
        frame = gt_path.stem
        gts = read_labels(gt_path)
        det_path = det_dir / gt_path.name
        if det_path.exists():
            dets = read_labels(det_path)
        else:
            log.warning("no detections for frame %s; counting it as empty", frame)
            dets = []
        if calib_dir is not None:
            calib_path = Path(calib_dir) / gt_path.name
            parse_calib(calib_path.read_text(encoding="utf-8"), str(calib_path))
        frames.append((dets, gts))
    return frames


def evaluate_frames(frames, classes=("Car",), metrics=("3d", "bev"), criterion: int = 40, thresh: float = 0.7) -> Report:
    ap = AP_FUNCS[criterion]
    rows = []
    for cls in classes:
        for m in metrics:
            for filt in DIFFICULTIES:
                curve = match(frames, cls, IOU_FUNCS[m], thresh, filt)
                rows.append((cls, m, filt.name, 100.0 * ap(curve)))
    return Report(rows, criterion)


def evaluate_split(det_dir, gt_dir, calib_dir=None, metrics=("3d", "bev"), criterion: int = 40,
                   classes=("Car",)) -> Report:
    return evaluate_frames(load_split(det_dir, gt_dir, calib_dir), classes, metrics, criterion)

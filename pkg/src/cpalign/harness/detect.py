"""Energy-based box extraction from fused grids plus AP bookkeeping.

This is a deliberately simple read-out: per-cell RMS energy over the leading
channels, max-normalized, thresholded, then 4-connected components become
axis-aligned boxes.  It is linear enough that better-aligned features produce
measurably tighter boxes, which is all the delay sweeps need.
"""

import numpy as np
from dataclasses import dataclass
from scipy import ndimage

from ..featurizer import BevSpec
from ..numerics import ShapeError, ensure_tensor3
from ..pointcloud import OrientedBox

ENERGY_CHANNELS = 128
_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class Detection:
    """Axis-aligned box in metres: (x_min, y_min, x_max, y_max)."""

    aabb: np.ndarray
    confidence: float
    cells: int


@dataclass
class DetectionReport:
    ap: dict
    mean_matched_iou: float
    n_detections: int
    n_truth: int

    def as_dict(self):
        out = {f"ap{int(round(k * 100))}": v for k, v in self.ap.items()}
        out["mean_matched_iou"] = self.mean_matched_iou
        out["n_detections"] = self.n_detections
        out["n_truth"] = self.n_truth
        return out


def detection_map(features: np.ndarray, channels: int = ENERGY_CHANNELS) -> np.ndarray:
    """Per-cell RMS energy over the first `channels` maps, scaled to [0, 1]."""
    f = ensure_tensor3(features, "features")
    c = min(channels, f.shape[0])
    energy = np.sqrt(np.mean(f[:c] * f[:c], axis=0))
    peak = float(energy.max())
    if peak > 0.0:
        energy = energy / peak
    return energy[None]


def extract_detections(dmap: np.ndarray, spec: BevSpec,
                       threshold: float = 0.5) -> list:
    """Threshold + 4-connected components -> cell-aligned boxes in metres."""
    d = ensure_tensor3(dmap, "dmap")
    if d.shape[0] != 1:
        raise ShapeError("detection map must have a single channel")
    mask = d[0] >= threshold
    labels, count = ndimage.label(mask, structure=_FOUR_CONN)
    dets = []
    for lab in range(1, count + 1):
        rows, cols = np.nonzero(labels == lab)
        x_min = spec.origin_x + cols.min() * spec.cell
        x_max = spec.origin_x + (cols.max() + 1) * spec.cell
        y_min = spec.origin_y + rows.min() * spec.cell
        y_max = spec.origin_y + (rows.max() + 1) * spec.cell
        conf = float(d[0][rows, cols].mean())
        dets.append(Detection(np.array([x_min, y_min, x_max, y_max]), conf,
                              rows.size))
    dets.sort(key=lambda det: -det.confidence)
    return dets


def box_to_aabb(box: OrientedBox) -> np.ndarray:
    corners = box.corners_bev()
    return np.array([corners[:, 0].min(), corners[:, 1].min(),
                     corners[:, 0].max(), corners[:, 1].max()])


def iou_aabb(a: np.ndarray, b: np.ndarray) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


def _average_precision(matches, n_truth):
    """11-point interpolated AP over confidence-ranked detections."""
    if n_truth == 0:
        return 0.0
    tp = np.cumsum([1.0 if m else 0.0 for m in matches])
    fp = np.cumsum([0.0 if m else 1.0 for m in matches])
    recall = tp / n_truth
    precision = tp / np.maximum(tp + fp, 1e-12)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        sel = recall >= r
        ap += float(precision[sel].max()) if sel.any() else 0.0
    return ap / 11.0


def evaluate_detection(dmap: np.ndarray, gt_boxes: list, spec: BevSpec,
                       threshold: float = 0.5,
                       iou_thresholds=(0.5, 0.7)) -> DetectionReport:
    """Greedy confidence-ordered matching against ground truth boxes."""
    dets = extract_detections(dmap, spec, threshold)
    gts = [box_to_aabb(b) for b in gt_boxes]
    ap = {}
    for thr in iou_thresholds:
        taken = [False] * len(gts)
        flags = []
        for det in dets:
            best, best_iou = -1, 0.0
            for gi, g in enumerate(gts):
                if taken[gi]:
                    continue
                v = iou_aabb(det.aabb, g)
                if v > best_iou:
                    best, best_iou = gi, v
            if best >= 0 and best_iou >= thr:
                taken[best] = True
                flags.append(True)
            else:
                flags.append(False)
        ap[thr] = _average_precision(flags, len(gts))
    if gts and dets:
        per_gt = [max(iou_aabb(det.aabb, g) for det in dets) for g in gts]
        mean_iou = float(np.mean(per_gt))
    else:
        mean_iou = 0.0
    return DetectionReport(ap=ap, mean_matched_iou=mean_iou,
                           n_detections=len(dets), n_truth=len(gts))

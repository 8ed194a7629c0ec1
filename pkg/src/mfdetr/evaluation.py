"""Mask IoU and COCO-protocol mask AP at desk scale."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0, np.inf), "small": (0, 32 ** 2), "medium": (32 ** 2, 96 ** 2), "large": (96 ** 2, np.inf)}


def mask_iou(pred_bin, gt_bin) -> float:
    a = np.asarray(getattr(pred_bin, "data", pred_bin)) > 0
    b = np.asarray(getattr(gt_bin, "data", gt_bin)) > 0
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


@dataclass
class Detection:
    mask: np.ndarray  # binary (H, W)
    score: float
    label: int


@dataclass
class GroundTruth:
    masks: np.ndarray  # (K, H, W) binary
    labels: np.ndarray  # (K,)


def as_detections(preds) -> list[Detection]:
    """Accept Detection objects or anything with mask_probs/final_score/label."""
    out = []
    for p in preds:
        if isinstance(p, Detection):
            out.append(Detection(np.asarray(p.mask) > 0, float(p.score), int(p.label)))
        else:
            probs = np.asarray(getattr(p.mask_probs, "data", p.mask_probs))
            out.append(Detection(probs > 0.5, float(p.final_score), int(p.label)))
    return out


def as_ground_truth(g) -> GroundTruth:
    if isinstance(g, GroundTruth):
        return GroundTruth(np.asarray(g.masks) > 0, np.asarray(g.labels, dtype=np.int64))
    return GroundTruth(np.asarray(g.gt_masks) > 0, np.asarray(g.gt_labels, dtype=np.int64))


@dataclass
class APReport:
    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    per_class: dict[int, float | None] = field(default_factory=dict)
    precision: dict = field(default_factory=dict, repr=False)

    def rows(self) -> list[tuple[str, str]]:
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
        rows = [("AP", fmt(self.ap)), ("AP50", fmt(self.ap50)), ("AP75", fmt(self.ap75)),
                ("AP_S", fmt(self.ap_small)), ("AP_M", fmt(self.ap_medium)), ("AP_L", fmt(self.ap_large))]
        rows += [(f"AP[class {c}]", fmt(v)) for c, v in sorted(self.per_class.items())]
        return rows

    def to_text(self) -> str:
        rows = self.rows()
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v:>7}" for k, v in rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["metric", "value"])
        w.writerows(self.rows())
        return buf.getvalue()


def interpolated_ap(tp: np.ndarray, n_pos: int) -> float:
    """101-point interpolated AP from a score-ordered TP(1)/FP(0) vector."""
    tp = np.asarray(tp, dtype=np.float64)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_pos
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return math.fsum(q) / len(RECALL_GRID)  # correctly rounded, independent of summation order


def _match_class(dets, gts, thr: float, area_rng) -> tuple[np.ndarray, int]:
    """dets: score-ordered (score, img, mask, area); gts: {img: [(mask, area)]}.

    GTs outside ``area_rng`` are ignored: a detection matched to one is
    dropped, as is an unmatched detection outside the range. Returns the
    TP/FP vector over kept detections and the number of kept GTs.
    """
    lo, hi = area_rng
    n_pos = 0
    ordered, used = {}, {}
    for img, items in gts.items():
        flagged = [(not (lo <= a < hi), m) for m, a in items]
        ordered[img] = sorted(flagged, key=lambda x: x[0])  # kept GTs first
        used[img] = [False] * len(items)
        n_pos += sum(not ign for ign, _ in flagged)
    flags = []
    for _, img, mask, area in dets:
        best, best_iou = -1, thr
        cand = ordered.get(img, [])
        for j, (ign, g) in enumerate(cand):
            if used[img][j]:
                continue
            if best >= 0 and not cand[best][0] and ign:
                break
            iou = mask_iou(mask, g)
            if iou < best_iou:
                continue
            best, best_iou = j, iou
        if best >= 0:
            used[img][best] = True
            if not cand[best][0]:
                flags.append(1.0)
        elif lo <= area < hi:
            flags.append(0.0)
    return np.array(flags), n_pos


def evaluate_ap(preds, gts, thresholds=IOU_THRESHOLDS) -> APReport:
    """COCO-style mask AP.

    ``preds`` holds one list of detections per image (Detection or
    InstancePrediction); ``gts`` one GroundTruth (or scene) per image.
    """
    if len(preds) != len(gts):
        raise ShapeMismatch(f"{len(preds)} prediction lists for {len(gts)} images")
    dets = [as_detections(p) for p in preds]
    truths = [as_ground_truth(g) for g in gts]
    classes = sorted({int(c) for t in truths for c in t.labels} | {d.label for ds in dets for d in ds})
    thresholds = tuple(float(t) for t in thresholds)

    table = {}
    for name, rng in AREA_RANGES.items():
        for c in classes:
            cd = [(d.score, i, d.mask, int(d.mask.sum())) for i, ds in enumerate(dets) for d in ds if d.label == c]
            order = sorted(range(len(cd)), key=lambda k: (-cd[k][0], cd[k][1], k))
            cd = [cd[k] for k in order]
            cg = {i: [(t.masks[k], int(t.masks[k].sum())) for k in range(len(t.labels)) if t.labels[k] == c]
                  for i, t in enumerate(truths)}
            for thr in thresholds:
                flags, n_pos = _match_class(cd, cg, thr, rng)
                table[name, c, thr] = interpolated_ap(flags, n_pos) if n_pos else None

    def avg(name, thrs, cls=None):
        vals = [table[name, c, t] for c in (classes if cls is None else [cls]) for t in thrs]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def at(thr):
        return avg("all", [thr]) if thr in thresholds else None

    return APReport(
        ap=avg("all", thresholds), ap50=at(0.5), ap75=at(0.75),
        ap_small=avg("small", thresholds), ap_medium=avg("medium", thresholds),
        ap_large=avg("large", thresholds),
        per_class={c: avg("all", thresholds, c) for c in classes},
        precision=table,
    )


def mean_matched_iou(preds, gts, iou_threshold: float = 0.5) -> float:
    """Mean over GT instances of the mask IoU of the box-matched prediction (0 if unmatched)."""
    from .training import match_queries

    ious = []
    for ps, g in zip(preds, gts):
        t = as_ground_truth(g)
        boxes = np.array([p.box.as_array() for p in ps]).reshape(-1, 4)
        gt_boxes = np.asarray(g.gt_boxes) if hasattr(g, "gt_boxes") else _tight_boxes(t.masks)
        assign = match_queries(boxes, gt_boxes, iou_threshold)
        got = {gi: qi for qi, gi in assign.pairs}
        for k in range(len(t.labels)):
            if k in got:
                probs = np.asarray(getattr(ps[got[k]].mask_probs, "data", ps[got[k]].mask_probs))
                ious.append(mask_iou(probs > 0.5, t.masks[k]))
            else:
                ious.append(0.0)
    return float(np.mean(ious)) if ious else 0.0


def _tight_boxes(masks) -> np.ndarray:
    from .synth import tight_box

    return np.array([tight_box(m) for m in masks]).reshape(-1, 4)

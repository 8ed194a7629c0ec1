"""Query-to-instance assignment, mask losses, AdamW and the training loop."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import MaskHeadConfig
from .errors import EmptyDataset, MissingGradient
from .geometry import Box, PointSampleConfig, _usable, footprint, paste_mask, read_map, roi_grid, sample_points
from .geometry import box_iou_matrix
from .io import save_checkpoint
from .model import MaskHead
from .synth import DetectorOutput, SyntheticScene, get_detector, select_top_queries
from .tensor import Tensor

BASE_LR = 1.5e-4
WEIGHT_DECAY = 5e-5
SCORING_WEIGHT = 0.5
DICE_SMOOTH = 1.0


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched_queries: list[int]


def match_queries(pred_boxes, gt_boxes, iou_threshold: float = 0.5) -> Assignment:
    """Greedy one-to-one matching over all (query, gt) pairs in IoU order."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    nq, ng = len(pred_boxes), len(gt_boxes)
    pairs = []
    if nq and ng:
        iou = box_iou_matrix(pred_boxes, gt_boxes)
        flat = np.argsort(-iou.ravel(), kind="stable")
        q_used, g_used = set(), set()
        for k in flat:
            q, g = divmod(int(k), ng)
            if iou[q, g] < iou_threshold:
                break
            if q in q_used or g in g_used:
                continue
            q_used.add(q)
            g_used.add(g)
            pairs.append((q, g))
    taken = {q for q, _ in pairs}
    return Assignment(pairs, [q for q in range(nq) if q not in taken])


# -- mask loss -------------------------------------------------------------------

def gt_at_roi_points(gt_mask: np.ndarray, box, pts: np.ndarray, roi_h: int, roi_w: int) -> np.ndarray:
    """Bilinear read of the binary GT (zeroed outside the box footprint) at RoI-space points."""
    H, W = gt_mask.shape
    b = _usable(box, H, W)
    x0, y0, x1, y1 = footprint(b, H, W)
    restricted = np.zeros((H, W))
    restricted[y0:y1, x0:x1] = gt_mask[y0:y1, x0:x1] > 0
    img = np.empty_like(pts, dtype=np.float64)
    img[:, 0] = b.x0 + pts[:, 0] * (b.width / roi_w)
    img[:, 1] = b.y0 + pts[:, 1] * (b.height / roi_h)
    return read_map(restricted, img)


def bce_dice(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean BCE-with-logits plus soft Dice (smoothing 1) over a flat point set."""
    target = np.asarray(target, dtype=np.float64)
    bce = T.bce_with_logits(logits, target).mean()
    p = T.sigmoid(logits)
    inter = (p * target).sum()
    dice = 1.0 - (inter * 2.0 + DICE_SMOOTH) / (p.sum() + (float(target.sum()) + DICE_SMOOTH))
    return bce + dice


def point_mask_loss(pred_roi_logits: Tensor, gt_mask: np.ndarray, box, pts: np.ndarray) -> Tensor:
    """Loss at explicit RoI-space (x, y) points; logits are read bilinearly."""
    rh, rw = pred_roi_logits.shape
    target = gt_at_roi_points(gt_mask, box, pts, rh, rw)
    grid = T.reshape(pred_roi_logits, (1, rh, rw))
    z = T.bilinear_sample(grid, T.clamp_to_centres(pts, rh, rw)).reshape(-1)
    return bce_dice(z, target)


def mask_loss(pred_roi_logits: Tensor, gt_mask: np.ndarray, box, ps_cfg: PointSampleConfig | None = None,
              use_sampling: bool = True) -> Tensor:
    rh, rw = pred_roi_logits.shape
    if not use_sampling:
        centres = roi_grid(Box(0.0, 0.0, float(rw), float(rh)), rh, rw)
        target = gt_at_roi_points(gt_mask, box, centres, rh, rw)
        return bce_dice(pred_roi_logits.reshape(-1), target)
    pts = sample_points(T.sigmoid(T.detach(pred_roi_logits)).data, ps_cfg or PointSampleConfig())
    return point_mask_loss(pred_roi_logits, gt_mask, box, pts)


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def mask_scoring_loss(iou_pred: Tensor, pred_mask_bin: np.ndarray, gt_mask: np.ndarray) -> Tensor:
    target = binary_iou(pred_mask_bin, gt_mask)
    diff = T.as_tensor(iou_pred).reshape(-1) - target
    return (diff * diff).sum()


# -- optimiser ---------------------------------------------------------------------

def lr_at(step: int, total_steps: int, base_lr: float = BASE_LR) -> float:
    """Piecewise constant: /10 from 0.9 T, /100 from 0.95 T."""
    if step >= 0.95 * total_steps:
        return base_lr / 100.0
    if step >= 0.9 * total_steps:
        return base_lr / 10.0
    return base_lr


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    base_lr: float = BASE_LR
    weight_decay: float = WEIGHT_DECAY
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1


def adamw_step(named_params, state: OptimState, lr: float | None = None, allow_missing: bool = False) -> None:
    """One decoupled-weight-decay Adam update, parameters visited in name order."""
    lr = lr_at(state.step, state.total_steps, state.base_lr) if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in sorted(named_params, key=lambda kv: kv[0]):
        g = p.grad
        if g is None:
            if not allow_missing:
                raise MissingGradient(f"parameter {name} has no gradient")
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- training loop ---------------------------------------------------------------------

@dataclass
class TrainResult:
    model: MaskHead
    losses: list[float]
    lrs: list[float]
    seconds: float


def detector_outputs(scenes, cfg: MaskHeadConfig, weights_seed: int = 0) -> list[DetectorOutput]:
    det = get_detector(weights_seed, cfg.d, cfg.enc_layer_index, cfg.num_classes)
    return [det(s) for s in scenes]


def scene_loss(model: MaskHead, det: DetectorOutput, scene: SyntheticScene, sample_seed: int,
               ps_cfg: PointSampleConfig, use_sampling: bool, **forward_kw) -> tuple[list[Tensor], list[Tensor]]:
    """Per-pair mask and scoring losses for one scene (empty lists when nothing matches)."""
    cfg = model.cfg
    det = select_top_queries(det, min(cfg.n_queries, det.n))
    assign = match_queries(det.boxes_xyxy(), scene.gt_boxes)
    if not assign.pairs:
        return [], []
    qs = [q for q, _ in assign.pairs]
    out = model.forward(det, select=qs, **forward_kw)
    H, W = det.image_size
    mask_terms, score_terms = [], []
    for k, (_, g) in enumerate(assign.pairs):
        gt = scene.gt_masks[g]
        logits = out["logits"][k]
        if cfg.full_image_path:
            full = T.interpolate_bilinear(logits.reshape(1, *logits.shape), H, W).reshape(H, W)
            mask_terms.append(bce_dice(full.reshape(-1), (gt > 0).ravel().astype(np.float64)))
            continue
        pcfg = replace(ps_cfg, seed=sample_seed * 16 + k)
        mask_terms.append(mask_loss(logits, gt, out["boxes"][k], pcfg, use_sampling))
        if out["iou"] is not None:
            probs = paste_mask(T.sigmoid(T.detach(logits)), out["boxes"][k], H, W).data
            score_terms.append(mask_scoring_loss(out["iou"][k], probs > 0.5, gt))
    return mask_terms, score_terms


def train(scenes, cfg: MaskHeadConfig, total_steps: int, batch_size: int = 2, seed: int = 0,
          *, base_lr: float = BASE_LR, use_sampling: bool = True, ps_cfg: PointSampleConfig | None = None,
          loss_csv=None, checkpoint=None, detections=None, model: MaskHead | None = None,
          log_every: int = 0, log=print) -> TrainResult:
    """Train the mask head on ``scenes`` with the frozen detector; returns the model and loss curve."""
    scenes = list(scenes)
    if not scenes:
        raise EmptyDataset("training needs at least one scene")
    model = model or MaskHead(cfg)
    ps_cfg = ps_cfg or PointSampleConfig()
    dets = detections if detections is not None else detector_outputs(scenes, cfg)
    params = model.named_parameters()
    state = OptimState(base_lr=base_lr, total_steps=max(total_steps, 1))
    rng = np.random.default_rng([seed, 7])
    order = np.zeros(0, dtype=np.int64)
    losses, lrs = [], []
    t0 = time.perf_counter()
    for step in range(total_steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(len(scenes))])
        batch, order = order[:batch_size], order[batch_size:]
        mask_terms, score_terms = [], []
        for j, i in enumerate(batch):
            m, s = scene_loss(model, dets[i], scenes[i], step * batch_size + j, ps_cfg, use_sampling)
            mask_terms += m
            score_terms += s
        lr = lr_at(step, total_steps, base_lr)
        lrs.append(lr)
        if not mask_terms:
            losses.append(0.0)
            continue
        loss = T.stack(mask_terms).mean()
        if score_terms:
            loss = loss + T.stack(score_terms).mean() * SCORING_WEIGHT
        model.zero_grad()
        loss.backward()
        adamw_step(params, state, lr=lr, allow_missing=True)
        losses.append(float(loss.data))
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean(losses[-log_every:])
            log(f"step {step + 1}/{total_steps} loss {recent:.4f} lr {lr:.2e} "
                f"{time.perf_counter() - t0:.0f}s")
    seconds = time.perf_counter() - t0
    if loss_csv is not None:
        write_loss_csv(loss_csv, losses, lrs)
    if checkpoint is not None:
        save_checkpoint(checkpoint, model.state_dict(), cfg.to_dict())
    return TrainResult(model, losses, lrs, seconds)


def write_loss_csv(path, losses, lrs) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for i, (l, r) in enumerate(zip(losses, lrs)):
            w.writerow([i, repr(float(l)), repr(float(r))])

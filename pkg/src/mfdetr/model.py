"""The trainable mask head stacked on the frozen detector outputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import FeatureEncoder, block_params
from .config import MaskHeadConfig
from .errors import ShapeMismatch
from .geometry import Box, box_convert, paste_mask, roi_align
from .nn import (
    FFN,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    ffn_params,
    linear_params,
    mha_params,
    xavier,
)
from .synth import DetectorOutput, select_top_queries
from .tensor import Tensor


@dataclass
class InstancePrediction:
    mask_probs: np.ndarray  # (H, W)
    box: Box
    label: int
    raw_score: float
    iou_pred: float | None
    final_score: float
    query_index: int = -1


class Neck(Module):
    """Point-wise conv followed by group norm on the stride-4 backbone map."""

    def __init__(self, d: int, groups: int = 32):
        self.groups = groups
        self.conv_weight = Parameter(np.eye(d).reshape(d, d, 1, 1))
        self.conv_bias = Parameter(np.zeros(d))
        self.gn_gamma = Parameter(np.ones(d))
        self.gn_beta = Parameter(np.zeros(d))

    def __call__(self, c1: Tensor) -> Tensor:
        y = T.conv2d(c1, self.conv_weight, self.conv_bias)
        return T.group_norm(y, self.groups, self.gn_gamma, self.gn_beta)


class ChannelMapper(Module):
    def __init__(self, d: int, d_out: int, rng, init: str = "xavier"):
        self.proj = Linear(d, d_out, rng, init=init)

    def __call__(self, f: Tensor) -> Tensor:
        c, h, w = f.shape
        rows = self.proj(f.reshape(c, h * w).transpose(1, 0))
        return rows.transpose(1, 0).reshape(-1, h, w)


class QueryEncoder(Module):
    """Optional query projection, then O2O -> B2O -> FFN pre-norm residual sublayers."""

    def __init__(self, d: int, width: int, heads: int, rng, *, project: bool,
                 o2o: bool, b2o: bool, ffn: bool, ffn_ratio: int = 4):
        self.order = [name for name, on in (("o2o", o2o), ("b2o", b2o), ("ffn", ffn)) if on]
        if project:
            self.proj = Linear(d, width, rng)
        if o2o:
            self.o2o_norm = LayerNorm(width)
            self.o2o = MultiHeadAttention(width, heads, rng)
        if b2o:
            self.b2o_norm = LayerNorm(width)
            self.b2o = MultiHeadAttention(width, heads, rng)
        if ffn:
            self.ffn_norm = LayerNorm(width)
            self.ffn = FFN(width, ffn_ratio * width, rng)

    def __call__(self, q: Tensor, regions: Tensor | None, select=None) -> Tensor:
        """q: (N, d) all kept queries; regions: (n, m, width) keys for the
        ``select``-ed queries (or (1, m, width) shared by all)."""
        if hasattr(self, "proj"):
            q = self.proj(q)
        if hasattr(self, "o2o"):
            h = self.o2o_norm(q).reshape(1, q.shape[0], q.shape[1])
            q = q + self.o2o(h, h, h).reshape(q.shape)
        if select is not None:
            q = q[np.asarray(select, dtype=np.int64)]
        if hasattr(self, "b2o"):
            n, c = q.shape
            h = self.b2o_norm(q).reshape(n, 1, c)
            q = q + self.b2o(h, regions, regions).reshape(n, c)
        if hasattr(self, "ffn"):
            q = q + self.ffn(self.ffn_norm(q))
        return q


class MaskScoringHead(Module):
    """Cat(mask, region features) -> 2 strided convs -> flatten -> MLP -> sigmoid."""

    def __init__(self, width: int, roi_h: int, roi_w: int, rng, channels: int = 64, hidden: int = 256):
        self.roi_h, self.roi_w = roi_h, roi_w
        cin = width + 1
        self.conv1_weight = Parameter(xavier(rng, cin * 9, channels * 9, (channels, cin, 3, 3)))
        self.conv1_bias = Parameter(np.zeros(channels))
        self.conv2_weight = Parameter(xavier(rng, channels * 9, channels * 9, (channels, channels, 3, 3)))
        self.conv2_bias = Parameter(np.zeros(channels))
        flat = channels * _half(_half(roi_h)) * _half(_half(roi_w))
        self.fc1 = Linear(flat, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    def __call__(self, mask_probs: Tensor, regions: Tensor) -> Tensor:
        """mask_probs (rh, rw), regions (rh*rw, width) -> IoU estimate of shape (1,)."""
        rh, rw = self.roi_h, self.roi_w
        feats = regions.transpose(1, 0).reshape(-1, rh, rw)
        x = T.concat([mask_probs.reshape(1, rh, rw), feats], axis=0)
        x = T.gelu(T.conv2d(x, self.conv1_weight, self.conv1_bias, stride=2, pad=1))
        x = T.gelu(T.conv2d(x, self.conv2_weight, self.conv2_bias, stride=2, pad=1))
        h = T.gelu(self.fc1(x.reshape(1, -1)))
        return T.sigmoid(self.fc2(h)).reshape(1)


def _half(n: int) -> int:
    return (n + 1) // 2


def fuse_features(c1: Tensor, e: Tensor) -> Tensor:
    """F = C1 + bilinear upsample of the stride-8 map to C1's grid."""
    if c1.shape[0] != e.shape[0]:
        raise ShapeMismatch(f"channel mismatch {c1.shape} vs {e.shape}")
    _, h, w = c1.shape
    return c1 + T.interpolate_bilinear(e, h, w)


def confidence_score(c: float, mask_probs) -> float:
    """c times the mean probability over pixels above 0.5 (0 for an empty mask)."""
    p = np.asarray(mask_probs.data if isinstance(mask_probs, Tensor) else mask_probs)
    fg = p > 0.5
    if not fg.any():
        return 0.0
    return float(c) * float(p[fg].mean())


def mask_logits(q: Tensor, features: Tensor) -> Tensor:
    """Dot product of each query (n, c) with its feature rows (n, m, c) -> (n, m)."""
    n, c = q.shape
    return (features @ q.reshape(n, c, 1)).reshape(n, features.shape[1])


def predict_mask(q: Tensor, features: Tensor, image_size, box=None, roi=None) -> Tensor:
    """Probability mask at image resolution for one query.

    Full-image path: ``features`` is F (c, h, w); the sigmoid map is upsampled
    to the image. RoI path: ``features`` is R (rh*rw, c) for ``box`` (image
    pixels) with grid ``roi``; the sigmoid map is pasted into the image.
    """
    H, W = image_size
    q = T.as_tensor(q).reshape(1, -1)
    if box is None:
        c, h, w = features.shape
        rows = features.reshape(c, h * w).transpose(1, 0).reshape(1, h * w, c)
        probs = T.sigmoid(mask_logits(q, rows)).reshape(1, h, w)
        return T.interpolate_bilinear(probs, H, W).reshape(H, W)
    rh, rw = roi
    if features.shape[0] != rh * rw:
        raise ShapeMismatch(f"RoI features {features.shape} do not match grid {roi}")
    probs = T.sigmoid(mask_logits(q, features.reshape(1, rh * rw, -1))).reshape(rh, rw)
    return paste_mask(probs, box, H, W)


class MaskHead(Module):
    def __init__(self, cfg: MaskHeadConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 101])
        d, c = cfg.d, cfg.width
        if cfg.neck:
            self.neck = Neck(d, cfg.neck_groups)
        self.img_enc = FeatureEncoder(cfg.img_enc, cfg.img_depth, d, heads=cfg.heads,
                                      levels=cfg.levels, points=cfg.points,
                                      ffn_dim=cfg.ffn_ratio * d, window=cfg.window, rng=rng)
        if cfg.has_mapper:
            self.mapper = ChannelMapper(d, c, rng)
        self.box_enc = FeatureEncoder(cfg.box_enc, 0 if cfg.full_image_path else cfg.box_depth, c,
                                      heads=cfg.heads, levels=1, points=cfg.points,
                                      ffn_dim=cfg.ffn_ratio * c, window=cfg.window, rng=rng)
        self.query_enc = QueryEncoder(d, c, cfg.heads, rng, project=cfg.has_mapper,
                                      o2o=cfg.query_o2o, b2o=cfg.query_b2o, ffn=cfg.query_ffn,
                                      ffn_ratio=cfg.ffn_ratio)
        if cfg.mask_scoring:
            self.scoring = MaskScoringHead(c, cfg.roi_h, cfg.roi_w, rng,
                                           cfg.score_channels, cfg.score_hidden)

    # -- pipeline stages ---------------------------------------------------
    def image_features(self, det: DetectorOutput) -> Tensor:
        """Neck, image encoder, fusion and channel mapping -> (width, H/4, W/4)."""
        c1 = det.backbone_c1
        if hasattr(self, "neck"):
            c1 = self.neck(c1)
        levels = [e.reshape(1, *e.shape) for e in det.enc_levels]
        e1 = self.img_enc(levels)[0]
        f = fuse_features(c1, e1.reshape(*e1.shape[1:]))
        if hasattr(self, "mapper"):
            f = self.mapper(f)
        return f

    def region_features(self, f: Tensor, boxes_px: np.ndarray) -> Tensor:
        """RoIAlign every box on F, then the box encoder -> (n, rh*rw, width)."""
        cfg = self.cfg
        rh, rw = cfg.roi_h, cfg.roi_w
        _, fh, _ = f.shape
        scale = fh / float(self._image_h)
        rois = [roi_align(f, Box.of(b).scaled(scale), rh, rw) for b in boxes_px]
        r = T.stack(rois, axis=0)
        if self.box_enc.kind == "none":
            return r
        n, _, c = r.shape
        grid = r.reshape(n, rh, rw, c).transpose(0, 3, 1, 2)
        grid = self.box_enc([grid])[0]
        return grid.transpose(0, 2, 3, 1).reshape(n, rh * rw, c)

    def forward(self, det: DetectorOutput, select=None, scoring_probs=None) -> dict:
        """Differentiable forward for the queries in ``select`` (default: all).

        Returns logits (n, gh, gw) on the RoI grid (or the stride-4 grid on
        the full-image path), region features, IoU estimates and boxes.
        ``scoring_probs`` replaces the (stop-gradient) mask fed to the
        scoring head.
        """
        cfg = self.cfg
        self._image_h = det.image_size[0]
        idx = np.arange(det.n) if select is None else np.asarray(select, dtype=np.int64)
        boxes_px = det.boxes_xyxy()[idx]
        f = self.image_features(det)
        if cfg.full_image_path:
            c, h, w = f.shape
            regions = f.reshape(c, h * w).transpose(1, 0).reshape(1, h * w, c)
            q = self.query_enc(det.queries, regions, idx)
            logits = (q @ regions.reshape(h * w, c).transpose(1, 0)).reshape(len(idx), h, w)
            return {"logits": logits, "regions": None, "iou": None, "boxes": boxes_px}
        regions = self.region_features(f, boxes_px)
        q = self.query_enc(det.queries, regions, idx)
        logits = mask_logits(q, regions).reshape(len(idx), cfg.roi_h, cfg.roi_w)
        iou = None
        if hasattr(self, "scoring"):
            probs = T.detach(T.sigmoid(logits)) if scoring_probs is None else T.as_tensor(scoring_probs)
            iou = T.concat([self.scoring(probs[i], regions[i]) for i in range(len(idx))], axis=0)
        return {"logits": logits, "regions": regions, "iou": iou, "boxes": boxes_px}

    def segment(self, det: DetectorOutput) -> list[InstancePrediction]:
        """Full inference: top queries -> masks -> scores, sorted by final score."""
        cfg = self.cfg
        det = select_top_queries(det, min(cfg.n_queries, det.n))
        out = self.forward(det)
        H, W = det.image_size
        preds = []
        probs = T.sigmoid(out["logits"])
        for i in range(det.n):
            c_i = float(det.scores[i])
            box = Box.of(out["boxes"][i])
            if cfg.full_image_path:
                _, h, w = probs.shape
                mask = T.interpolate_bilinear(probs[i].reshape(1, h, w), H, W).data[0]
            else:
                mask = paste_mask(probs[i], box, H, W).data
            iou = None if out["iou"] is None else float(out["iou"].data[i])
            if iou is None:
                s = confidence_score(c_i, mask)
            elif cfg.compose_scores:
                s = c_i * iou * (confidence_score(1.0, mask))
            else:
                s = c_i * iou
            preds.append(InstancePrediction(mask, box, int(det.labels[i]), c_i, iou, s, i))
        order = sorted(range(len(preds)), key=lambda k: -preds[k].final_score)
        return [preds[k] for k in order]


def count_params(cfg: MaskHeadConfig) -> dict[str, int]:
    """Closed-form count of every trainable parameter added on top of the detector."""
    d, c = cfg.d, cfg.width
    counts = {
        "neck": d * d + d + 2 * d if cfg.neck else 0,
        "img_enc": cfg.img_depth * block_params(cfg.img_enc, d, cfg.heads, cfg.levels, cfg.points,
                                                cfg.ffn_ratio * d, cfg.window),
        "mapper": linear_params(d, c) if cfg.has_mapper else 0,
        "box_enc": 0 if cfg.full_image_path else cfg.box_depth * block_params(
            cfg.box_enc, c, cfg.heads, 1, cfg.points, cfg.ffn_ratio * c, cfg.window),
    }
    q = linear_params(d, c) if cfg.has_mapper else 0
    if cfg.query_o2o:
        q += 2 * c + mha_params(c)
    if cfg.query_b2o:
        q += 2 * c + mha_params(c)
    if cfg.query_ffn:
        q += 2 * c + ffn_params(c, cfg.ffn_ratio * c)
    counts["query_enc"] = q
    if cfg.mask_scoring:
        k = cfg.score_channels
        flat = k * _half(_half(cfg.roi_h)) * _half(_half(cfg.roi_w))
        counts["mask_scoring"] = ((c + 1) * k * 9 + k + k * k * 9 + k
                                  + linear_params(flat, cfg.score_hidden) + linear_params(cfg.score_hidden, 1))
    else:
        counts["mask_scoring"] = 0
    counts["total"] = sum(counts.values())
    return counts


def per_block_params(kind: str, d: int = 256, heads: int = 8, levels: int = 4, points: int = 4,
                     ffn_ratio: int = 4, window: int = 8) -> int:
    return block_params(kind, d, heads, levels, points, ffn_ratio * d, window)


def load_model(path) -> MaskHead:
    """Rebuild a MaskHead from a checkpoint, validating every tensor against its config."""
    from .io import load_checkpoint

    tensors, config = load_checkpoint(path)
    model = MaskHead(MaskHeadConfig.from_dict(config))
    model.load_state_dict(tensors)
    return model


def save_model(path, model: MaskHead) -> None:
    from .io import save_checkpoint

    save_checkpoint(path, model.state_dict(), model.cfg.to_dict())

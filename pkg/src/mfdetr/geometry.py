"""Boxes, RoIAlign, mask pasting and uncertainty-driven point sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox, UnknownFormat
from .tensor import (
    Tensor,
    as_tensor,
    bilinear_sample,
    clamp_to_centres,
    interpolate_bilinear,
    pad,
    reshape,
)

MIN_AREA = 1e-8


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous pixel coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)

    @classmethod
    def of(cls, b) -> "Box":
        if isinstance(b, Box):
            return b
        x0, y0, x1, y1 = (float(v) for v in b)
        return cls(x0, y0, x1, y1)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def normalized(self) -> "Box":
        return Box(min(self.x0, self.x1), min(self.y0, self.y1),
                   max(self.x0, self.x1), max(self.y0, self.y1))

    def clamped(self, h: float, w: float) -> "Box":
        return Box(min(max(self.x0, 0.0), w), min(max(self.y0, 0.0), h),
                   min(max(self.x1, 0.0), w), min(max(self.y1, 0.0), h))

    def scaled(self, s: float) -> "Box":
        return Box(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)

    def is_degenerate(self) -> bool:
        return self.area < MIN_AREA


def box_convert(b, src: str, dst: str, h: float, w: float) -> Box:
    """Convert between ``cxcywh_norm`` (fractions of the image) and ``xyxy_px``."""
    formats = ("cxcywh_norm", "xyxy_px")
    if src not in formats or dst not in formats:
        raise UnknownFormat(f"unknown box format {src!r} -> {dst!r}")
    v = np.asarray(b.as_array() if isinstance(b, Box) else b, dtype=np.float64)
    if src == dst:
        return Box.of(v)
    if src == "cxcywh_norm":
        cx, cy, bw, bh = v
        return Box((cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h)
    x0, y0, x1, y1 = v
    return Box.of([(x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h])


def box_iou(a, b) -> float:
    a, b = Box.of(a), Box.of(b)
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n,4) and (m,4) xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _usable(box, h: float, w: float) -> Box:
    box = Box.of(box).normalized().clamped(h, w)
    if box.is_degenerate():
        raise DegenerateBox(f"box {box} has area < {MIN_AREA} after clamping to {h}x{w}")
    return box


def roi_grid(box: Box, out_h: int, out_w: int) -> np.ndarray:
    """(x, y) of every RoI cell centre, row-major, shape (out_h*out_w, 2)."""
    xs = box.x0 + (np.arange(out_w) + 0.5) * (box.width / out_w)
    ys = box.y0 + (np.arange(out_h) + 0.5) * (box.height / out_h)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def roi_align(f: Tensor, box, out_h: int, out_w: int) -> Tensor:
    """One bilinear sample per cell centre of ``box`` (feature-map scale).

    Returns (out_h*out_w, C). Sample positions are clamped into the hull of
    pixel centres, matching :func:`interpolate_bilinear` at the borders.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"RoI size must be >= 1, got {out_h}x{out_w}")
    _, hf, wf = f.shape
    box = _usable(box, hf, wf)
    pts = clamp_to_centres(roi_grid(box, out_h, out_w), hf, wf)
    return bilinear_sample(f, pts)


def footprint(box, h: int, w: int) -> tuple[int, int, int, int]:
    """Integer pixel extent (x0, y0, x1, y1) of a box, rounded outward."""
    box = _usable(box, h, w)
    x0, y0 = int(math.floor(box.x0)), int(math.floor(box.y0))
    x1, y1 = int(math.ceil(box.x1)), int(math.ceil(box.y1))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(max(x1, x0 + 1), w), min(max(y1, y0 + 1), h)
    return x0, y0, x1, y1


def paste_mask(roi_probs: Tensor, box, h: int, w: int) -> Tensor:
    """Resize an RoI mask onto the box footprint inside an all-zero (h, w) canvas."""
    roi_probs = as_tensor(roi_probs)
    x0, y0, x1, y1 = footprint(box, h, w)
    rh, rw = roi_probs.shape
    resized = interpolate_bilinear(reshape(roi_probs, (1, rh, rw)), y1 - y0, x1 - x0)
    canvas = pad(resized, ((0, 0), (y0, h - y1), (x0, w - x1)))
    return reshape(canvas, (h, w))


# -- point sampling --------------------------------------------------------

@dataclass(frozen=True)
class PointSampleConfig:
    n_points: int = 1024
    oversample: float = 3.0
    importance_ratio: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not self.oversample > 1:
            raise ValueError("oversample ratio must exceed 1")
        if not 0.0 <= self.importance_ratio <= 1.0:
            raise ValueError("importance_ratio must lie in [0, 1]")

    @property
    def n_important(self) -> int:
        return int(math.floor(self.importance_ratio * self.n_points))

    @property
    def n_draws(self) -> int:
        return int(math.ceil(self.oversample * self.n_points))


def uniform_points(n: int, h: int, w: int, seed: int) -> np.ndarray:
    """``n`` uniform (x, y) points over a (h, w) grid, from the 'fresh' stream of ``seed``."""
    rng = np.random.default_rng([seed, 1])
    return rng.uniform(size=(n, 2)) * np.array([w, h], dtype=np.float64)


def read_map(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinear read of a 2-D array at points clamped to pixel centres."""
    h, w = m.shape
    pts = clamp_to_centres(pts, h, w)
    return bilinear_sample(Tensor(m[None]), pts).data[:, 0]


def uncertainty(p: np.ndarray) -> np.ndarray:
    return -np.abs(p - 0.5)


def sample_points(mask_probs, cfg: PointSampleConfig) -> np.ndarray:
    """Uncertainty-weighted point set of exactly ``cfg.n_points`` (x, y) rows.

    ceil(k N) uniform draws are scored by -|p - 0.5|; the floor(beta N) most
    uncertain are kept (ties broken by draw order) and followed by fresh
    uniform points.
    """
    probs = np.asarray(mask_probs.data if isinstance(mask_probs, Tensor) else mask_probs,
                       dtype=np.float64)
    h, w = probs.shape
    n_imp = cfg.n_important
    chosen = np.zeros((0, 2))
    if n_imp > 0:
        draws = np.random.default_rng([cfg.seed, 0]).uniform(size=(cfg.n_draws, 2))
        draws = draws * np.array([w, h], dtype=np.float64)
        u = uncertainty(read_map(probs, draws))
        order = np.argsort(-u, kind="stable")[:n_imp]
        chosen = draws[order]
    fresh = uniform_points(cfg.n_points - n_imp, h, w, cfg.seed)
    return np.concatenate([chosen, fresh], axis=0)

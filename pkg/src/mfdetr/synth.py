"""Synthetic shape scenes and a fixed-weight stand-in for a frozen DETR detector."""
from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import io
from .errors import InvalidN, InvalidSpec, TooFewQueries
from .geometry import Box, box_convert
from .tensor import Tensor, conv2d

SHAPES = ("rectangle", "ellipse", "triangle")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneSpec:
    H: int = 128
    W: int = 128
    num_classes: int = 3
    max_instances: int = 3

    def validate(self) -> None:
        if self.H < 64 or self.W < 64 or self.H % 64 or self.W % 64:
            raise InvalidSpec(f"H and W must be positive multiples of 64, got {self.H}x{self.W}")
        if self.num_classes < 1 or self.max_instances < 1:
            raise InvalidSpec("num_classes and max_instances must be >= 1")


@dataclass
class SyntheticScene:
    image: np.ndarray  # (3, H, W) in [0, 1]
    gt_masks: np.ndarray  # (K, H, W) uint8
    gt_boxes: np.ndarray  # (K, 4) xyxy px, tight around each mask
    gt_labels: np.ndarray  # (K,) int
    seed: int | None = None

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def __len__(self) -> int:
        return len(self.gt_labels)


def tight_box(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def _coverage(kind: str, params: dict, H: int, W: int) -> np.ndarray:
    s = SUPERSAMPLE
    ys = (np.arange(H * s) + 0.5) / s
    xs = (np.arange(W * s) + 0.5) / s
    gx, gy = np.meshgrid(xs, ys)
    cx, cy, r, th = params["cx"], params["cy"], params["r"], params["theta"]
    dx, dy = gx - cx, gy - cy
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    if kind == "rectangle":
        inside = (np.abs(u) <= r * params["a"]) & (np.abs(v) <= r * params["b"])
    elif kind == "ellipse":
        inside = (u / (r * params["a"])) ** 2 + (v / (r * params["b"])) ** 2 <= 1.0
    else:
        verts = params["verts"]
        inside = np.ones_like(gx, dtype=bool)
        for i in range(3):
            (x0, y0), (x1, y1) = verts[i], verts[(i + 1) % 3]
            inside &= (x1 - x0) * (gy - y0) - (y1 - y0) * (gx - x0) >= 0
    return inside.reshape(H, s, W, s).mean(axis=(1, 3))


def _random_shape(rng: np.random.Generator, kind: str, H: int, W: int) -> dict:
    side = min(H, W)
    r = rng.uniform(0.14, 0.28) * side
    cx = rng.uniform(r, W - r)
    cy = rng.uniform(r, H - r)
    th = rng.uniform(-np.pi / 6, np.pi / 6)
    params = {"cx": cx, "cy": cy, "r": r, "theta": th,
              "a": rng.uniform(0.6, 1.0), "b": rng.uniform(0.6, 1.0)}
    if kind == "rectangle":
        params["a"] *= 0.8
        params["b"] *= 0.8
    if kind == "triangle":
        base = rng.uniform(0, 2 * np.pi)
        angles = base + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.3, 0.3, 3)
        radii = r * rng.uniform(0.85, 1.0, 3)
        params["verts"] = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], 1)
    return params


def _background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W] / max(H, W)
    base = rng.uniform(0.35, 0.6)
    img = np.full((3, H, W), base)
    for _ in range(4):
        fx, fy = rng.uniform(1, 5, 2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.06, size=(3, 1, 1))
        img = img + amp * np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
    return img + rng.normal(0.0, 0.02, size=(3, H, W))


def gen_scene(seed: int, spec: SceneSpec = SceneSpec()) -> SyntheticScene:
    """Render 1..max_instances filled shapes over a textured background.

    Instances later in the list occlude earlier ones; every returned mask
    keeps at least 60% of its shape visible.
    """
    spec.validate()
    H, W = spec.H, spec.W
    rng = np.random.default_rng([int(seed), 11])
    img = _background(rng, H, W)
    n_kinds = min(len(SHAPES), spec.num_classes)
    k_target = int(rng.integers(1, spec.max_instances + 1))
    covers, masks, visible, labels = [], [], [], []
    for _ in range(k_target):
        for _attempt in range(50):
            label = int(rng.integers(0, n_kinds))
            cov = _coverage(SHAPES[label], _random_shape(rng, SHAPES[label], H, W), H, W)
            m = cov >= 0.5
            if m.sum() < 16:
                continue
            # earlier instances must stay mostly visible once this one is on top
            if all((vis & ~m).sum() >= 0.6 * old.sum() for vis, old in zip(visible, masks)):
                break
        else:
            continue
        visible = [vis & ~m for vis in visible] + [m]
        covers.append(cov)
        masks.append(m)
        labels.append(label)
    if not masks:  # pragma: no cover - 50 rejections in a row are practically impossible
        raise InvalidSpec("failed to place any instance")
    for cov in covers:
        hue = rng.uniform(0, 1)
        color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.65, 1.0)))
        img = img * (1 - cov) + color[:, None, None] * cov
    img = np.clip(img + rng.normal(0.0, 0.01, size=img.shape), 0.0, 1.0)
    gt_masks = np.stack(visible).astype(np.uint8)
    boxes = np.stack([tight_box(m) for m in gt_masks])
    return SyntheticScene(img, gt_masks, boxes, np.array(labels, dtype=np.int64), int(seed))


def scene_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1, np.uint32)[0])


# -- frozen detector stub ------------------------------------------------------

@dataclass(frozen=True)
class DetectorConfig:
    d: int = 128
    n_queries: int = 10
    box_noise: float = 0.05
    enc_layer_index: int = 4
    num_classes: int = 3


@dataclass
class DetectorOutput:
    queries: Tensor  # (Nq, d)
    class_scores: Tensor  # (Nq, num_classes), per-class sigmoid-style
    boxes: np.ndarray  # (Nq, 4) cxcywh normalised
    enc_levels: list[Tensor]  # strides 8, 16, 32, 64
    backbone_c1: Tensor  # (d, H/4, W/4)
    image_size: tuple[int, int]
    enc_layer_index: int = 4
    source_gt: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.queries.shape[0]

    @property
    def scores(self) -> np.ndarray:
        return self.class_scores.data.max(axis=1)

    @property
    def labels(self) -> np.ndarray:
        return self.class_scores.data.argmax(axis=1)

    def boxes_xyxy(self) -> np.ndarray:
        H, W = self.image_size
        return np.stack([box_convert(b, "cxcywh_norm", "xyxy_px", H, W).as_array()
                         for b in self.boxes]) if self.n else np.zeros((0, 4))

    def tensors(self) -> list[Tensor]:
        return [self.queries, self.class_scores, self.backbone_c1, *self.enc_levels]


class FrozenDetector:
    """Seeded, never-trained conv pyramid plus query synthesis.

    Weights live in plain numpy arrays and are wrapped as constant tensors,
    so no gradient can ever reach them.
    """

    def __init__(self, weights_seed: int = 0, d: int = 128, enc_layer_index: int = 4,
                 num_classes: int = 3):
        if d < 16:
            raise InvalidSpec("detector width d must be >= 16")
        self.weights_seed, self.d, self.enc_layer_index = weights_seed, d, enc_layer_index
        self.num_classes = num_classes
        rng = np.random.default_rng([int(weights_seed), 3])
        w = {"patch": rng.normal(0, 4.0 / np.sqrt(48), (d, 3, 4, 4)),
             "patch_b": rng.normal(0, 0.1, d)}
        for lvl in range(1, 5):
            w[f"down{lvl}"] = rng.normal(0, 1.5 / np.sqrt(4 * d), (d, d, 2, 2))
        qrng = np.random.default_rng([int(weights_seed), 5])
        w["query"] = qrng.normal(0, 1.0 / np.sqrt(d + 12), (d + 12, d))
        w["query_b"] = qrng.normal(0, 0.1, d)
        lrng = np.random.default_rng([int(weights_seed), 17, int(enc_layer_index)])
        w["layer_mix"] = lrng.normal(0, 1.0 / np.sqrt(d), (d, d))
        for v in w.values():
            v.setflags(write=False)
        self.weights = w

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(self.weights[name].tobytes())
        return h.hexdigest()

    def features(self, image: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        w = self.weights
        x = Tensor(image - 0.5)
        c1 = np.tanh(conv2d(x, Tensor(w["patch"]), Tensor(w["patch_b"]), stride=4).data)
        levels, prev = [], c1
        for lvl in range(1, 5):
            prev = np.tanh(conv2d(Tensor(prev), Tensor(w[f"down{lvl}"]), stride=2).data)
            mixed = np.einsum("chw,cd->dhw", prev, w["layer_mix"])
            levels.append(np.tanh(prev + mixed))
        return c1, levels

    def __call__(self, scene: SyntheticScene, n_queries: int = 10,
                 box_noise: float = 0.05) -> DetectorOutput:
        K = len(scene)
        if n_queries < K:
            raise TooFewQueries(f"{n_queries} queries cannot cover {K} instances")
        H, W = scene.size
        c1, levels = self.features(scene.image)
        digest = hashlib.sha256(scene.image.tobytes()).digest()
        rng = np.random.default_rng([int.from_bytes(digest[:8], "little"), int(self.weights_seed)])

        boxes, scores, source = [], [], []
        for k in range(K):
            x0, y0, x1, y1 = scene.gt_boxes[k]
            bw, bh = x1 - x0, y1 - y0
            jit = rng.uniform(-box_noise, box_noise, 4) * np.array([bw, bh, bw, bh])
            b = Box(x0 + jit[0], y0 + jit[1], x1 + jit[2], y1 + jit[3]).normalized().clamped(H, W)
            if b.width < 1 or b.height < 1:
                b = Box.of(scene.gt_boxes[k])
            boxes.append(b.as_array())
            s = rng.uniform(0.01, 0.05, self.num_classes)
            s[scene.gt_labels[k] % self.num_classes] = rng.uniform(0.75, 0.95)
            scores.append(s)
            source.append(k)
        for _ in range(n_queries - K):
            cx, cy = rng.uniform(0.2, 0.8, 2)
            bw, bh = rng.uniform(0.1, 0.5, 2)
            b = Box((cx - bw / 2) * W, (cy - bh / 2) * H, (cx + bw / 2) * W, (cy + bh / 2) * H)
            boxes.append(b.clamped(H, W).as_array())
            top = rng.uniform(0.05, 0.3)
            s = rng.uniform(0.01, top, self.num_classes)
            s[rng.integers(0, self.num_classes)] = top
            scores.append(s)
            source.append(-1)

        order = rng.permutation(n_queries)
        boxes_px = np.stack(boxes)[order]
        feats = []
        e1 = levels[0]
        for b in boxes_px:
            feats.append(_pool_inside(e1, b / 8.0))
        norm = np.stack([box_convert(b, "xyxy_px", "cxcywh_norm", H, W).as_array() for b in boxes_px])
        noise = rng.normal(0, 1, (n_queries, 8))
        inputs = np.concatenate([norm, np.stack(feats), noise], axis=1)
        queries = inputs @ self.weights["query"] + self.weights["query_b"]
        return DetectorOutput(
            queries=Tensor(queries),
            class_scores=Tensor(np.stack(scores)[order]),
            boxes=norm,
            enc_levels=[Tensor(e) for e in levels],
            backbone_c1=Tensor(c1),
            image_size=(H, W),
            enc_layer_index=self.enc_layer_index,
            source_gt=np.array(source, dtype=np.int64)[order],
        )


def _pool_inside(fmap: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Mean feature over cells whose centres fall inside ``box`` (map scale)."""
    _, h, w = fmap.shape
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    mx = (xs >= box[0]) & (xs <= box[2])
    my = (ys >= box[1]) & (ys <= box[3])
    if mx.any() and my.any():
        return fmap[:, my][:, :, mx].mean(axis=(1, 2))
    cx = int(np.clip((box[0] + box[2]) / 2, 0, w - 1))
    cy = int(np.clip((box[1] + box[3]) / 2, 0, h - 1))
    return fmap[:, cy, cx]


@lru_cache(maxsize=8)
def get_detector(weights_seed: int = 0, d: int = 128, enc_layer_index: int = 4,
                 num_classes: int = 3) -> FrozenDetector:
    return FrozenDetector(weights_seed, d, enc_layer_index, num_classes)


def frozen_detector(scene: SyntheticScene, weights_seed: int = 0,
                    cfg: DetectorConfig = DetectorConfig()) -> DetectorOutput:
    det = get_detector(weights_seed, cfg.d, cfg.enc_layer_index, cfg.num_classes)
    return det(scene, cfg.n_queries, cfg.box_noise)


def select_top_queries(out: DetectorOutput, n: int) -> DetectorOutput:
    """Keep the ``n`` queries with the highest max class score (stable ties)."""
    if not 1 <= n <= out.n:
        raise InvalidN(f"n must lie in [1, {out.n}], got {n}")
    keep = np.argsort(-out.scores, kind="stable")[:n]
    return replace(
        out,
        queries=Tensor(out.queries.data[keep]),
        class_scores=Tensor(out.class_scores.data[keep]),
        boxes=out.boxes[keep],
        source_gt=out.source_gt[keep] if out.source_gt.size else out.source_gt,
    )


# -- dataset on disk ---------------------------------------------------------------

def write_scene(scene: SyntheticScene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.save(d / "image.mfdt", scene.image.astype(np.float64))
    io.save(d / "masks.mfdt", scene.gt_masks.astype(np.uint8))
    io.save(d / "boxes.mfdt", scene.gt_boxes.astype(np.float64))
    io.save(d / "labels.mfdt", scene.gt_labels.astype(np.uint8))


def read_scene(directory) -> SyntheticScene:
    d = Path(directory)
    return SyntheticScene(
        image=io.load(d / "image.mfdt"),
        gt_masks=io.load(d / "masks.mfdt"),
        gt_boxes=io.load(d / "boxes.mfdt"),
        gt_labels=io.load(d / "labels.mfdt").astype(np.int64),
    )


def write_dataset(out_dir, seed: int, count: int, spec: SceneSpec = SceneSpec()) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        name = f"scene_{i:05d}"
        write_scene(gen_scene(scene_seed(seed, i), spec), out / name)
        names.append(name)
    (out / "manifest.txt").write_text("".join(n + "\n" for n in names))
    return names


def read_dataset(directory) -> list[SyntheticScene]:
    root = Path(directory)
    names = [ln.strip() for ln in (root / "manifest.txt").read_text().splitlines() if ln.strip()]
    return [read_scene(root / n) for n in names]


def make_scenes(seed: int, count: int, spec: SceneSpec = SceneSpec()) -> list[SyntheticScene]:
    return [gen_scene(scene_seed(seed, i), spec) for i in range(count)]

"""Finite-difference gradient suite over every differentiable operation.

Each entry builds a small random problem from a seed and returns the scalar
function plus its inputs, ready for :func:`grad_check`.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, grad_check
from .tensor import Tensor


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _proj(rng, out: Tensor) -> Tensor:
    """Random linear functional so every output coordinate matters."""
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def _unary(op):
    def build(rng):
        x = _t(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        return (lambda x: (op(x) * Tensor(w)).sum()), [x]
    return build


def _positive_log(rng):
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    w = rng.normal(size=(3, 4))
    return (lambda x: (T.log(x) * Tensor(w)).sum()), [x]


def _binary(op, positive_b=False):
    def build(rng):
        a = _t(rng, 3, 4)
        b = Tensor(rng.uniform(0.5, 2.0, size=(4,)) if positive_b else rng.normal(size=(4,)), requires_grad=True)
        w = rng.normal(size=(3, 4))
        return (lambda a, b: (op(a, b) * Tensor(w)).sum()), [a, b]
    return build


def _softmax(rng):
    x = _t(rng, 2, 5)
    w = rng.normal(size=(2, 5))
    return (lambda x: (T.softmax(x, axis=-1) * Tensor(w)).sum()), [x]


def _matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    return (lambda a, b: ((a @ b) * Tensor(w)).sum()), [a, b]


def _affine(rng):
    x, w, b = _t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5)
    p = rng.normal(size=(2, 3, 5))
    return (lambda x, w, b: (T.affine(x, w, b) * Tensor(p)).sum()), [x, w, b]


def _layer_norm(rng):
    x, g, b = _t(rng, 3, 6), _t(rng, 6), _t(rng, 6)
    p = rng.normal(size=(3, 6))
    return (lambda x, g, b: (T.layer_norm(x, g, b) * Tensor(p)).sum()), [x, g, b]


def _group_norm(rng):
    x, g, b = _t(rng, 4, 3, 3), _t(rng, 4), _t(rng, 4)
    p = rng.normal(size=(4, 3, 3))
    return (lambda x, g, b: (T.group_norm(x, 2, g, b) * Tensor(p)).sum()), [x, g, b]


def _conv(stride, pad, depthwise):
    def build(rng):
        x = _t(rng, 3, 6, 5)
        k = _t(rng, 3, 1 if depthwise else 3, 3, 3)
        b = _t(rng, 3)
        out = T.conv2d(x, k, b, stride=stride, pad=pad, depthwise=depthwise)
        p = rng.normal(size=out.shape)
        return (lambda x, k, b: (T.conv2d(x, k, b, stride=stride, pad=pad, depthwise=depthwise)
                                 * Tensor(p)).sum()), [x, k, b]
    return build


def _sample(rng):
    value = _t(rng, 2, 5, 6, 3)
    pts = Tensor(rng.uniform(-0.5, 6.5, size=(2, 7, 2)), requires_grad=True)
    p = rng.normal(size=(2, 7, 3))
    return (lambda v, q: (T.sample(v, q) * Tensor(p)).sum()), [value, pts]


def _bilinear(rng):
    f = _t(rng, 2, 5, 6)
    pts = Tensor(rng.uniform(0.0, 5.0, size=(9, 2)), requires_grad=True)
    p = rng.normal(size=(9, 2))
    return (lambda f, q: (T.bilinear_sample(f, q) * Tensor(p)).sum()), [f, pts]


def _interp(rng):
    x = _t(rng, 2, 4, 5)
    p = rng.normal(size=(2, 7, 9))
    return (lambda x: (T.interpolate_bilinear(x, 7, 9) * Tensor(p)).sum()), [x]


def _roi_align(rng):
    from .geometry import roi_align

    f = _t(rng, 3, 8, 8)
    x0, y0 = rng.uniform(0, 3, size=2)
    box = (x0, y0, x0 + rng.uniform(2, 5), y0 + rng.uniform(2, 5))
    p = rng.normal(size=(16, 3))
    return (lambda f: (roi_align(f, box, 4, 4) * Tensor(p)).sum()), [f]


def _paste(rng):
    from .geometry import paste_mask

    m = Tensor(rng.uniform(0.05, 0.95, size=(4, 4)), requires_grad=True)
    box = (rng.uniform(0, 4), rng.uniform(0, 4), rng.uniform(8, 15), rng.uniform(8, 15))
    p = rng.normal(size=(16, 16))
    return (lambda m: (paste_mask(m, box, 16, 16) * Tensor(p)).sum()), [m]


def _shape_ops(rng):
    a, b = _t(rng, 2, 3), _t(rng, 2, 3)
    p = rng.normal(size=(4, 7))

    def f(a, b):
        c = T.concat([a, b], axis=0)  # (4, 3)
        c = T.pad(c, ((0, 0), (1, 3)))  # (4, 7)
        c = T.roll(c, 2, axis=1)
        s = T.stack([c, c * 2.0], axis=0)[1]
        return (s * Tensor(p)).sum() + (a[np.array([0, 0, 1])] * 3.0).sum() + a.transpose(1, 0)[1:].mean()
    return f, [a, b]


def _bce(rng):
    z = _t(rng, 10, scale=2.0)
    t = (rng.uniform(size=10) > 0.5).astype(np.float64)
    return (lambda z: T.bce_with_logits(z, t).mean()), [z]


def _mha(rng):
    from .nn import MultiHeadAttention

    mha = MultiHeadAttention(8, 2, rng)
    q, kv = _t(rng, 2, 3, 8), _t(rng, 2, 5, 8)
    p = rng.normal(size=(2, 3, 8))
    w = mha.q_proj.weight
    return (lambda q, kv, w: (mha(q, kv, kv) * Tensor(p)).sum()), [q, kv, w]


def _deformable(rng):
    from .blocks import DeformableBlock, reference_points
    from .nn import sine_embedding

    d, shapes = 8, [(4, 4), (2, 2)]
    blk = DeformableBlock(d, 2, 2, 2, 16, rng)
    blk.attn.sampling_offsets.weight.data[:] = rng.normal(size=blk.attn.sampling_offsets.weight.shape) * 0.1
    blk.attn.attention_weights.weight.data[:] = rng.normal(size=blk.attn.attention_weights.weight.shape) * 0.1
    ref = reference_points(shapes)
    pos = sine_embedding(ref, d)
    x = _t(rng, 1, 20, d)
    p = rng.normal(size=(1, 20, d))
    off = blk.attn.sampling_offsets.weight
    return (lambda x, off: (blk(x, pos, ref, shapes) * Tensor(p)).sum()), [x, off]


def _window(rng):
    from .blocks import WindowBlock

    blk = WindowBlock(8, 2, 4, True, 16, rng)
    x = _t(rng, 1, 6, 6, 8)
    p = rng.normal(size=(1, 6, 6, 8))
    tbl = blk.rel_bias
    return (lambda x, tbl: (blk(x) * Tensor(p)).sum()), [x, tbl]


def _convnext(rng):
    from .blocks import ConvNeXtBlock

    blk = ConvNeXtBlock(8, 16, rng)
    x = _t(rng, 1, 5, 5, 8)
    p = rng.normal(size=(1, 5, 5, 8))
    return (lambda x, k: (blk(x) * Tensor(p)).sum()), [x, blk.dw_weight]


def _scoring(rng):
    from .model import MaskScoringHead

    head = MaskScoringHead(4, 8, 8, rng, channels=4, hidden=8)
    probs = Tensor(rng.uniform(size=(8, 8)))
    r = _t(rng, 64, 4)
    return (lambda r, w, c: head(probs, r).sum()), [r, head.fc1.weight, head.conv1_weight]


def tiny_setup(seed: int):
    """A miniature detector + head pair small enough for finite differences."""
    from .config import MaskHeadConfig
    from .synth import SceneSpec, gen_scene, get_detector

    scene = gen_scene(seed, SceneSpec(H=64, W=64, max_instances=2))
    cfg = MaskHeadConfig(d=16, d_mapper=8, heads=2, levels=2, points=2, ffn_ratio=2, img_depth=1,
                         box_depth=1, roi_h=8, roi_w=8, neck_groups=4, score_channels=4,
                         score_hidden=8, query_o2o=True, seed=seed)
    det = get_detector(0, cfg.d, cfg.enc_layer_index, cfg.num_classes)(scene, n_queries=4)
    return scene, cfg, det


class _SampleTrace:
    """Records the smallest distance of any trainable sample point to a bilinear kink."""

    def __enter__(self):
        self.min_dist = np.inf
        self._orig = T.sample

        def traced(value, pts):
            if pts.requires_grad:
                frac = pts.data - np.floor(pts.data)
                self.min_dist = min(self.min_dist, float(np.abs(frac - 0.5).min()))
            return self._orig(value, pts)

        T.sample = traced
        return self

    def __exit__(self, *exc):
        T.sample = self._orig


def _pipeline(rng, clearance: float = 1e-3):
    """Full head forward plus matched dense mask and scoring losses.

    Bilinear reads are only piecewise smooth, so the offset predictors are
    nudged (redrawn until every trainable sample point sits ``clearance``
    away from a pixel centre). The scoring head's stop-gradient mask input
    is frozen at the base point.
    """
    from .geometry import PointSampleConfig
    from .model import MaskHead
    from .training import scene_loss

    seed = int(rng.integers(1 << 30))
    scene, cfg, det = tiny_setup(seed)
    model = MaskHead(cfg)
    named = dict(model.named_parameters())
    base = {n: p.data.copy() for n, p in named.items()}
    ps = PointSampleConfig()
    for _ in range(50):
        for name, p in named.items():
            if "sampling_offsets" in name or "attention_weights.weight" in name:
                p.data = base[name] + rng.normal(size=p.shape) * 0.05
        with _SampleTrace() as trace:
            out = model.forward(*select_matched(model, det, scene))
        if trace.min_dist > clearance:
            break
    frozen = T.sigmoid(out["logits"]).data.copy()
    picks = [named["neck.conv_weight"], named["img_enc.layer0.attn.sampling_offsets.weight"],
             named["box_enc.layer0.ffn.w1.weight"], named["query_enc.b2o.v_proj.weight"],
             named["query_enc.o2o.q_proj.weight"], named["mapper.proj.weight"],
             named["scoring.conv1_weight"], named["scoring.fc2.weight"]]

    def f(*_):
        m, s = scene_loss(model, det, scene, 0, ps, use_sampling=False, scoring_probs=frozen)
        return T.stack(m).mean() + T.stack(s).mean() * 0.5
    return f, picks


def select_matched(model, det, scene):
    from .synth import select_top_queries
    from .training import match_queries

    det = select_top_queries(det, min(model.cfg.n_queries, det.n))
    return det, [q for q, _ in match_queries(det.boxes_xyxy(), scene.gt_boxes).pairs]


def _point_loss(rng):
    from .training import point_mask_loss

    logits = _t(rng, 6, 6)
    gt = np.zeros((20, 20), np.uint8)
    gt[4:14, 5:12] = 1
    pts = rng.uniform(0, 6, size=(30, 2))
    return (lambda z: point_mask_loss(z, gt, (3.2, 2.5, 15.1, 16.7), pts)), [logits]


SUITE: dict[str, Callable] = {
    "exp": _unary(T.exp), "tanh": _unary(T.tanh), "sigmoid": _unary(T.sigmoid), "gelu": _unary(T.gelu),
    "log": _positive_log, "add": _binary(T.add), "sub": _binary(T.sub), "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True), "softmax": _softmax, "matmul": _matmul, "affine": _affine,
    "layer_norm": _layer_norm, "group_norm": _group_norm,
    "conv2d": _conv(1, 1, False), "conv2d_stride2": _conv(2, 1, False), "conv2d_depthwise": _conv(1, 1, True),
    "sample": _sample, "bilinear_sample": _bilinear, "interpolate": _interp, "roi_align": _roi_align,
    "paste_mask": _paste, "shape_ops": _shape_ops, "bce_with_logits": _bce, "attention": _mha,
    "deformable_block": _deformable, "window_block": _window, "convnext_block": _convnext,
    "mask_scoring_head": _scoring, "point_mask_loss": _point_loss, "pipeline": _pipeline,
}


def run_check(name: str, seed: int, eps: float = 1e-5, tol: float = 1e-4, max_coords: int = 12) -> GradCheckReport:
    rng = np.random.default_rng([seed, len(name)])
    f, inputs = SUITE[name](rng)
    return grad_check(f, inputs, eps=eps, tol=tol, max_coords=max_coords, rng=np.random.default_rng(seed))


def run_suite(seeds=range(10), names=None, **kw) -> list[tuple[str, int, GradCheckReport]]:
    out = []
    for name in names or SUITE:
        for s in seeds:
            out.append((name, s, run_check(name, s, **kw)))
    return out

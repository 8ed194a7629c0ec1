import math

import numpy as np
import pytest

from mfdetr import tensor as T
from mfdetr.checks import tiny_setup
from mfdetr.errors import DegenerateBox, EmptyDataset, MissingGradient
from mfdetr.geometry import Box, PointSampleConfig, box_iou, roi_grid, sample_points
from mfdetr.gradcheck import grad_check
from mfdetr.io import load_checkpoint
from mfdetr.model import MaskHead
from mfdetr.nn import Parameter
from mfdetr.synth import SceneSpec, gen_scene, get_detector
from mfdetr.training import (BASE_LR, OptimState, adamw_step, bce_dice, gt_at_roi_points, lr_at, mask_loss,
                             mask_scoring_loss, match_queries, point_mask_loss, scene_loss, train)

from oracles import naive_iou


# -- matching -----------------------------------------------------------------------

def test_match_identity():
    boxes = np.array([[0, 0, 4, 4], [10, 10, 20, 30], [5, 1, 9, 8]], float)
    a = match_queries(boxes, boxes)
    assert sorted(a.pairs) == [(0, 0), (1, 1), (2, 2)] and a.unmatched_queries == []


def test_match_prefers_higher_iou():
    gt = np.array([[0, 0, 10, 10]], float)
    preds = np.array([[0, 0, 10, 6], [0, 0, 10, 9]], float)  # IoU 0.6 and 0.9
    a = match_queries(preds, gt)
    assert a.pairs == [(1, 0)] and a.unmatched_queries == [0]


def _greedy_oracle(preds, gts, thr):
    cands = sorted(((box_iou(p, g), q, k) for q, p in enumerate(preds) for k, g in enumerate(gts)),
                   key=lambda t: (-t[0], t[1], t[2]))
    used_q, used_g, pairs = set(), set(), []
    for iou, q, k in cands:
        if iou >= thr and q not in used_q and k not in used_g:
            pairs.append((q, k))
            used_q.add(q)
            used_g.add(k)
    return pairs


@pytest.mark.parametrize("seed", range(30))
def test_match_against_pair_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    def boxes(n):
        xy = rng.integers(0, 12, size=(n, 2))
        wh = rng.integers(2, 8, size=(n, 2))
        return np.concatenate([xy, xy + wh], 1).astype(float)
    gts = boxes(int(rng.integers(1, 5)))
    preds = np.concatenate([gts + rng.integers(-1, 2, size=gts.shape), boxes(int(rng.integers(0, 5)))])
    a = match_queries(preds, gts)
    assert a.pairs == _greedy_oracle(preds, gts, 0.5)
    assert len({q for q, _ in a.pairs}) == len(a.pairs) == len({g for _, g in a.pairs})
    assert sorted(a.unmatched_queries + [q for q, _ in a.pairs]) == list(range(len(preds)))


# -- mask loss ---------------------------------------------------------------------

def _square_gt(H=32, W=32):
    gt = np.zeros((H, W), np.uint8)
    gt[8:24, 8:24] = 1
    return gt


def test_perfect_prediction_loss():
    gt = _square_gt()
    box = (4.0, 4.0, 28.0, 28.0)
    target = gt_at_roi_points(gt, box, roi_grid(Box(0, 0, 12, 12), 12, 12), 12, 12).reshape(12, 12)
    logits = T.tensor(np.where(target > 0.5, 20.0, -20.0))
    assert np.all((target == 0) | (target == 1))
    assert float(mask_loss(logits, gt, box, use_sampling=False).data) < 1e-6


def test_zero_logits_closed_form():
    target = np.array([1.0] * 6 + [0.0] * 6)
    got = float(bce_dice(T.zeros(12), target).data)
    n, a = 12, 6
    expect = math.log(2) + 1 - (2 * 0.5 * a + 1) / (0.5 * n + a + 1)
    assert got == pytest.approx(expect, abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_sampling_at_every_centre_equals_dense(seed):
    rng = np.random.default_rng(seed)
    scene = gen_scene(seed, SceneSpec(H=64, W=64))
    logits = T.tensor(rng.normal(size=(8, 10)) * 2)
    box = scene.gt_boxes[0] + rng.uniform(-3, 3, 4)
    centres = roi_grid(Box(0, 0, 10, 8), 8, 10)
    dense = float(mask_loss(logits, scene.gt_masks[0], box, use_sampling=False).data)
    sampled = float(point_mask_loss(logits, scene.gt_masks[0], box, centres).data)
    assert abs(dense - sampled) <= 1e-9


def _bce(z, t):
    return np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))


@pytest.mark.parametrize("seed", range(3))
def test_uniform_sampling_unbiased_for_dense_field(seed):
    rng = np.random.default_rng(seed)
    scene = gen_scene(seed)
    rh = rw = 16
    gt, box = scene.gt_masks[0], scene.gt_boxes[0] + np.array([-2, -2, 2, 2])
    logits = rng.normal(size=(rh, rw)) * 3

    def read(pts):
        return T.bilinear_sample(T.tensor(logits[None]), T.clamp_to_centres(pts, rh, rw)).data.ravel()

    # the dense field the sampler draws from, integrated on a 16x supersampled grid
    fine = roi_grid(Box(0, 0, rw, rh), rh * 16, rw * 16)
    dense = _bce(read(fine), gt_at_roi_points(gt, box, fine, rh, rw)).mean()
    draws = []
    for k in range(200):
        pts = sample_points(np.zeros((rh, rw)), PointSampleConfig(256, importance_ratio=0.0, seed=seed * 1000 + k))
        draws.append(_bce(read(pts), gt_at_roi_points(gt, box, pts, rh, rw)).mean())
    draws = np.array(draws)
    se = draws.std(ddof=1) / np.sqrt(len(draws))
    assert abs(draws.mean() - dense) <= 3 * se


def test_mask_loss_gradient_only_into_logits():
    rng = np.random.default_rng(3)
    gt = _square_gt()
    logits = T.tensor(rng.normal(size=(6, 6)), requires_grad=True)
    pts = rng.uniform(0.6, 5.4, size=(20, 2))  # stay off the clamp boundary
    rep = grad_check(lambda z: point_mask_loss(z, gt, (5.0, 6.0, 27.0, 25.0), pts), [logits])
    assert rep.passed, rep


def test_mask_loss_degenerate_box():
    with pytest.raises(DegenerateBox):
        mask_loss(T.zeros((4, 4)), _square_gt(), (5, 5, 5, 9), use_sampling=False)


# -- scoring loss -------------------------------------------------------------------

def test_scoring_loss_examples():
    gt = _square_gt()
    pred = np.zeros_like(gt)
    pred[8:24, 8:16] = 1
    true_iou = naive_iou(pred, gt)
    assert float(mask_scoring_loss(T.tensor([true_iou]), pred, gt).data) == 0.0
    assert float(mask_scoring_loss(T.tensor([0.5]), gt, gt).data) == 0.25


def test_scoring_loss_gradient():
    gt = _square_gt()
    pred = np.roll(gt, 3, axis=1)
    x = T.tensor([0.3], requires_grad=True)
    mask_scoring_loss(x, pred, gt).backward()
    assert x.grad[0] == pytest.approx(2 * (0.3 - naive_iou(pred, gt)), abs=1e-15)
    x.grad = None
    assert grad_check(lambda v: mask_scoring_loss(v, pred, gt), [x]).passed


# -- optimiser ----------------------------------------------------------------------

def _param(v, g):
    p = Parameter(np.array(v, float))
    p.grad = None if g is None else np.array(g, float)
    return p


def test_adamw_zero_grad_no_decay():
    p = _param([1.0, -2.0], [0.0, 0.0])
    adamw_step([("w", p)], OptimState(weight_decay=0.0), lr=1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_on_quadratic():
    p = _param([1.0], [1.0])  # f = w^2 / 2 at w = 1
    state = OptimState(weight_decay=0.0)
    adamw_step([("w", p)], state, lr=1e-3)
    # bias-corrected m = v^0.5 = 1, so the step is lr / (1 + eps)
    assert p.data[0] == pytest.approx(1.0 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adamw_decay_only():
    p = _param([2.0], [0.0])
    adamw_step([("w", p)], OptimState(weight_decay=0.1), lr=0.01)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.01 * 0.1), abs=1e-15)


def test_adamw_missing_gradient():
    with pytest.raises(MissingGradient):
        adamw_step([("w", _param([1.0], None))], OptimState(), lr=1e-3)


def test_adamw_moments_match_shapes():
    p, q = _param(np.ones((2, 3)), np.ones((2, 3))), _param([1.0], [2.0])
    state = OptimState()
    adamw_step([("b", q), ("a", p)], state, lr=1e-3)
    assert list(state.m) == ["a", "b"]
    assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (1,)


def test_lr_schedule():
    T_ = 1000
    assert lr_at(0, T_) == 1.5e-4
    assert lr_at(920, T_) == pytest.approx(1.5e-5, rel=1e-12)
    assert lr_at(970, T_) == pytest.approx(1.5e-6, rel=1e-12)
    lrs = [lr_at(s, T_) for s in range(T_ + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    drops = [(a / b) for a, b in zip(lrs, lrs[1:]) if a != b]
    assert drops == pytest.approx([10.0, 10.0])
    assert lr_at(899, T_) == BASE_LR and lr_at(900, T_) < BASE_LR and lr_at(950, T_) == pytest.approx(BASE_LR / 100)


# -- loop ---------------------------------------------------------------------------

def _tiny_data(n=4):
    _, cfg, _ = tiny_setup(0)
    scenes = [gen_scene(s, SceneSpec(H=64, W=64, max_instances=2)) for s in range(n)]
    dets = [get_detector(0, cfg.d)(s, n_queries=4) for s in scenes]
    return scenes, cfg, dets


def test_train_deterministic():
    scenes, cfg, dets = _tiny_data()
    ps = PointSampleConfig(n_points=32)
    a = train(scenes, cfg, 4, 2, seed=3, ps_cfg=ps, detections=dets)
    b = train(scenes, cfg, 4, 2, seed=3, ps_cfg=ps, detections=dets)
    assert a.losses == b.losses and len(a.losses) == 4
    assert any(l > 0 for l in a.losses)
    c = train(scenes, cfg, 4, 2, seed=4, ps_cfg=ps, detections=dets)
    assert c.losses != a.losses


def test_train_empty_dataset():
    _, cfg, _ = tiny_setup(0)
    with pytest.raises(EmptyDataset):
        train([], cfg, 1)


def test_zero_steps_checkpoint_is_init(tmp_path):
    scenes, cfg, dets = _tiny_data(2)
    res = train(scenes, cfg, 0, detections=dets, checkpoint=tmp_path / "c.ckpt", loss_csv=tmp_path / "l.csv")
    tensors, config = load_checkpoint(tmp_path / "c.ckpt")
    init = MaskHead(cfg).state_dict()
    assert set(tensors) == set(init)
    for k in init:
        np.testing.assert_array_equal(tensors[k], init[k])
    assert res.losses == [] and (tmp_path / "l.csv").read_text().strip() == "step,loss,lr"


def test_loss_csv(tmp_path):
    scenes, cfg, dets = _tiny_data(2)
    res = train(scenes, cfg, 3, detections=dets, ps_cfg=PointSampleConfig(n_points=16), loss_csv=tmp_path / "l.csv")
    rows = (tmp_path / "l.csv").read_text().strip().splitlines()
    assert rows[0] == "step,loss,lr" and len(rows) == 4
    assert [float(r.split(",")[1]) for r in rows[1:]] == res.losses


def test_detector_untouched_by_training():
    scenes, cfg, dets = _tiny_data(2)
    det = get_detector(0, cfg.d)
    before = det.checksum()
    train(scenes, cfg, 2, detections=dets, ps_cfg=PointSampleConfig(n_points=16))
    assert det.checksum() == before
    assert all(t.grad is None for d in dets for t in d.tensors())


def test_batch_loss_invariant_to_scene_order():
    scenes, cfg, dets = _tiny_data(2)
    model = MaskHead(cfg)
    ps = PointSampleConfig(n_points=24)
    terms = [scene_loss(model, dets[i], scenes[i], 10 + i, ps, True)[0] for i in range(2)]
    fwd = float(T.stack(terms[0] + terms[1]).mean().data)
    rev = float(T.stack(terms[1] + terms[0]).mean().data)
    assert fwd == pytest.approx(rev, abs=1e-14)

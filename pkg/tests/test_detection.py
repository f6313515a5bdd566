import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doad import detection as det
from doad import tensor as tn
from doad.config import ModelConfig
from doad.errors import ConfigError, DimensionError
from doad.geometry import ProposalSet, encode_offsets, gen_anchors, iou_matrix
from doad.nn import named_parameters
from doad.optim import SGD
from doad.tensor import Tape, Tensor, backward

import oracles


def small_config(**kw):
    base = dict(image_size=32, channels=4, feat_dim=6, anchor_sizes=(8.0, 16.0), anchor_ratios=(1.0,),
                num_proposals=4, pre_nms_top=32, roi_size=3, precision="float64")
    base.update(kw)
    return ModelConfig(**base)


def zero_weights(cfg):
    w = det.DetectionWeights.create(np.random.default_rng(0), cfg)
    for conv in (w.rpn_conv, w.rpn_cls, w.rpn_reg):
        conv.zero_()
    return w


def test_zero_weight_rpn_returns_plain_anchors():
    cfg = small_config()
    w = zero_weights(cfg)
    anchors = gen_anchors(4, 4, 8, cfg.anchor_sizes, cfg.anchor_ratios)
    feat = Tensor(np.random.default_rng(1).normal(size=(4, 4, 4)))
    out = det.rpn_forward(feat, anchors, w, 4, 32, nms_iou=1.0)
    assert np.allclose(out.objectness_logits.data, 0)
    assert np.allclose(out.proposals.scores, 0.5)
    # equal scores keep anchor order, so the first anchors survive unchanged
    assert np.allclose(out.proposals.boxes, np.clip(anchors[:4], 0, 32))


def test_rpn_head_shapes_follow_anchor_order():
    cfg = small_config(anchor_ratios=(0.5, 1.0, 2.0))
    w = det.DetectionWeights.create(np.random.default_rng(2), cfg)
    logits, reg = det.rpn_heads(Tensor(np.random.default_rng(3).normal(size=(3, 4, 4, 4))), w)
    assert logits.shape == (3, 4 * 4 * 6) and reg.shape == (3, 96, 4)
    # anchor a at cell (r, c) reads conv channel a at (r, c)
    raw = w.rpn_cls(tn.relu(w.rpn_conv(Tensor(np.random.default_rng(3).normal(size=(3, 4, 4, 4)))))).data
    assert logits.data[1, (2 * 4 + 3) * 6 + 5] == pytest.approx(raw[1, 5, 2, 3])


def test_rpn_forward_rejects_wrong_rank():
    cfg = small_config()
    with pytest.raises(DimensionError):
        det.rpn_forward(Tensor(np.zeros((1, 4, 4, 4))), gen_anchors(4, 4, 8, (8.0,), (1.0,)),
                        zero_weights(cfg), 2, 32)


def test_select_proposals_is_exact_count_and_sorted():
    rng = np.random.default_rng(4)
    anchors = gen_anchors(6, 6, 8, (8.0, 16.0, 32.0), (0.5, 1.0, 2.0))
    logits = rng.normal(size=len(anchors))
    offsets = rng.normal(scale=0.2, size=(len(anchors), 4))
    for gt in (None, np.array([[5.0, 5.0, 20.0, 40.0]])):
        p = det.select_proposals(anchors, logits, offsets, 16, 48, gt)
        assert len(p) == 16
        assert np.all(np.diff(p.scores) <= 0)
        assert np.all(p.boxes[:, 2:] <= 48) and np.all(p.boxes[:, :2] >= 0)
    with pytest.raises(ConfigError):
        det.select_proposals(anchors, logits, offsets, len(anchors) + 1, 48)


def test_select_proposals_with_gt_keeps_best_overlaps():
    anchors = gen_anchors(4, 4, 8, (8.0, 16.0), (1.0,))
    logits = np.linspace(1, -1, len(anchors))
    gt = anchors[[30]] + 0.5
    p = det.select_proposals(anchors, logits, np.zeros((len(anchors), 4)), 3, 32, gt, nms_iou=1.0)
    best = iou_matrix(np.clip(anchors, 0, 32), gt).max()
    assert iou_matrix(p.boxes, gt).max() == pytest.approx(best)
    # without gt the top-scoring anchors win instead
    plain = det.select_proposals(anchors, logits, np.zeros((len(anchors), 4)), 3, 32, nms_iou=1.0)
    assert iou_matrix(plain.boxes, gt).max() < best


def brute_force_labels(boxes, gts, pos, neg):
    labels = []
    for b in boxes:
        best = max(oracles.box_iou(b, g) for g in gts)
        labels.append(1 if best >= pos else (0 if best < neg else -1))
    return labels


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_assignment_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 60, size=(20, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(4, 30, size=(20, 2))], axis=1)
    gxy = rng.uniform(0, 60, size=(3, 2))
    gts = np.concatenate([gxy, gxy + rng.uniform(4, 30, size=(3, 2))], axis=1)
    a = det.assign_and_sample(boxes, gts)
    assert a.labels.tolist() == brute_force_labels(boxes, gts, 0.5, 0.3)
    for i in a.positives:
        assert np.allclose(a.targets[i], encode_offsets(boxes[i:i + 1], gts[a.matched[i]][None])[0])
    assert np.all(a.targets[a.labels != 1] == 0)


def test_low_quality_matches_and_sampling():
    gts = np.array([[0.0, 0.0, 10.0, 10.0]])
    boxes = np.array([[0.0, 0.0, 10.0, 40.0], [50.0, 50.0, 60.0, 60.0], [40.0, 40.0, 45.0, 45.0]])
    assert det.assign_and_sample(boxes, gts).labels.tolist() == [0, 0, 0]
    assert det.assign_and_sample(boxes, gts, low_quality_matches=True).labels.tolist() == [1, 0, 0]
    many = np.tile(boxes[1:2], (40, 1))
    s = det.assign_and_sample(np.concatenate([boxes[:1], many]), gts, low_quality_matches=True, sample_size=8,
                              rng=np.random.default_rng(0))
    assert (s.labels == 1).sum() == 1 and (s.labels == 0).sum() == 7


def test_assignment_without_gt_is_all_negative():
    a = det.assign_and_sample(np.array([[0.0, 0, 4, 4]]), np.zeros((0, 4)))
    assert a.labels.tolist() == [0] and a.matched.tolist() == [-1]


def test_tam_matches_loop_oracle():
    rng = np.random.default_rng(5)
    w = det.TAMWeights.create(rng, 5)
    w.out_linear.b.data[...] = rng.normal(size=5)
    F_k, F_r = rng.normal(size=(3, 5)), rng.normal(size=(7, 5))
    got = det.tam_forward(Tensor(F_k), Tensor(F_r), w).data
    want = oracles.tam(F_k, F_r, w.phi.w.data, w.theta.w.data, w.out_linear.w.data, w.out_linear.b.data)
    assert np.allclose(got, want, atol=1e-12)


def test_tam_attention_rows_are_distributions_and_bias_free():
    rng = np.random.default_rng(6)
    w = det.TAMWeights.create(rng, 4)
    assert w.phi.b is None and w.theta.b is None
    A = det.tam_attention(Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(9, 4))), w).data
    assert A.shape == (2, 9) and np.allclose(A.sum(axis=1), 1)
    with pytest.raises(DimensionError):
        det.tam_attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))), w)


def test_tam_zero_output_projection_is_identity():
    rng = np.random.default_rng(7)
    w = det.TAMWeights.create(rng, 4)
    w.out_linear.zero_()
    F_k = rng.normal(size=(3, 4))
    assert np.array_equal(det.tam_forward(Tensor(F_k), Tensor(rng.normal(size=(6, 4))), w).data, F_k)


def test_postprocess_hand_trace():
    props = ProposalSet(np.array([[0.0, 0, 10, 10], [1.0, 0, 11, 10], [20.0, 20, 30, 30], [40.0, 40, 50, 50]]),
                        np.full(4, 0.5))
    p_person = np.array([0.95, 0.9, 0.85, 0.5])
    logits = np.stack([np.zeros(4), np.log(p_person / (1 - p_person))], axis=1)
    offsets = np.zeros((4, 4))
    offsets[2] = [0.1, 0, 0, 0]
    out = det.postprocess(logits, offsets, props, 96, conf_threshold=0.8, nms_iou=0.5)
    # box 1 overlaps box 0 (IoU 9/11), box 3 is below threshold, box 2 shifts right by one pixel
    assert np.allclose(out.scores, [0.95, 0.85])
    assert np.allclose(out.boxes, [[0, 0, 10, 10], [21, 20, 31, 30]])


def test_detection_loss_parts_and_empty_regression():
    rng = np.random.default_rng(8)
    rpn_assign = det.Assignment(np.array([1, 0, -1]), np.zeros(3, dtype=int), np.zeros((3, 4)))
    head_assign = det.Assignment(np.array([0, 0]), np.zeros(2, dtype=int), np.zeros((2, 4)))
    total, parts = det.detection_loss(Tensor(np.zeros(3)), Tensor(rng.normal(size=(3, 4))), rpn_assign,
                                      Tensor(np.zeros((2, 2))), Tensor(rng.normal(size=(2, 4))), head_assign)
    assert parts["rpn_cls"].item() == pytest.approx(np.log(2))
    assert parts["head_cls"].item() == pytest.approx(np.log(2))
    assert parts["head_reg"].item() == 0.0
    assert total.item() == pytest.approx(sum(v.item() for v in parts.values()))


def test_detection_head_overfits_single_example():
    cfg = small_config()
    w = det.DetectionWeights.create(np.random.default_rng(9), cfg)
    rng = np.random.default_rng(10)
    feat = Tensor(rng.normal(size=(4, 4, 4)))
    anchors = gen_anchors(4, 4, 8, cfg.anchor_sizes, cfg.anchor_ratios)
    gt = np.array([[4.0, 2.0, 14.0, 26.0]])
    props = np.array([[3.0, 3.0, 15.0, 24.0], [18.0, 18.0, 30.0, 30.0], [0.0, 20.0, 8.0, 32.0]])
    rpn_assign = det.assign_and_sample(anchors, gt, low_quality_matches=True)
    head_assign = det.assign_and_sample(props, gt, neg_iou=0.5)
    params = [p for _, p in named_parameters(w)]
    opt = SGD(params, momentum=0.9)
    losses = []
    for _ in range(150):
        opt.zero_grad()
        with Tape() as tape:
            logits, reg = det.rpn_heads(tn.reshape(feat, (1, 4, 4, 4)), w)
            head = det.det_head_forward(det.proposal_features(feat, props, w, cfg), w)
            loss, _ = det.detection_loss(tn.reshape(logits, logits.shape[1:]), tn.reshape(reg, reg.shape[1:]),
                                         rpn_assign, head[0], head[1], head_assign)
        backward(loss, tape)
        losses.append(loss.item())
        opt.step(0.05)
    assert losses[-1] < 0.1 * losses[0]

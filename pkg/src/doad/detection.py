"""Detection branch: RPN proposals, temporal aggregation, person/background head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .errors import ConfigError, DimensionError
from .geometry import (ProposalSet, as_boxes, clip_boxes, decode_offsets, encode_offsets, iou_matrix,
                       nms_indices, roi_align)
from .nn import Conv, Linear
from .tensor import Tensor


@dataclass
class RPNOutput:
    proposals: ProposalSet
    objectness_logits: Tensor  # (num_anchors,)
    offset_predictions: Tensor  # (num_anchors, 4)


@dataclass
class TAMWeights:
    phi: Linear  # query projection, no bias
    theta: Linear  # key projection, no bias
    out_linear: Linear

    @classmethod
    def create(cls, rng, d: int, dtype=np.float64) -> "TAMWeights":
        return cls(Linear.create(rng, d, d, dtype, bias=False), Linear.create(rng, d, d, dtype, bias=False),
                   Linear.create(rng, d, d, dtype))


@dataclass
class DetectionWeights:
    rpn_conv: Conv
    rpn_cls: Conv
    rpn_reg: Conv
    roi_proj: Linear
    tam: TAMWeights
    head_fc: Linear
    cls: Linear
    reg: Linear

    @classmethod
    def create(cls, rng, cfg: ModelConfig) -> "DetectionWeights":
        c, d, dt = cfg.channels, cfg.feat_dim, cfg.dtype
        a = len(cfg.anchor_sizes) * len(cfg.anchor_ratios)
        r = cfg.roi_size
        return cls(
            rpn_conv=Conv.create(rng, c, c, (3, 3), 1, 1, dt),
            rpn_cls=Conv.create(rng, c, a, (1, 1), 1, 0, dt),
            rpn_reg=Conv.create(rng, c, 4 * a, (1, 1), 1, 0, dt),
            roi_proj=Linear.create(rng, c * r * r, d, dt),
            tam=TAMWeights.create(rng, d, dt),
            head_fc=Linear.create(rng, d, d, dt),
            cls=Linear.create(rng, d, 2, dt),
            reg=Linear.create(rng, d, 4, dt),
        )


# RPN --------------------------------------------------------------------------------

def rpn_heads(features: Tensor, w: DetectionWeights) -> tuple[Tensor, Tensor]:
    """Objectness logits ``(F, A*H*W)`` and offsets ``(F, A*H*W, 4)`` for ``F`` frames.

    Anchor order matches :func:`geometry.gen_anchors` (row, column, anchor).
    """
    x = tn.relu(w.rpn_conv(features))
    logits = w.rpn_cls(x)  # F, A, H, W
    f, a, h, wd = logits.shape
    logits = tn.reshape(tn.transpose(logits, (0, 2, 3, 1)), (f, h * wd * a))
    reg = tn.reshape(w.rpn_reg(x), (f, a, 4, h, wd))
    reg = tn.reshape(tn.transpose(reg, (0, 3, 4, 1, 2)), (f, h * wd * a, 4))
    return logits, reg


def select_proposals(anchors: np.ndarray, logits: np.ndarray, offsets: np.ndarray, n: int,
                     image_size: float, gt_boxes: np.ndarray | None = None, pre_nms_top: int = 200,
                     nms_iou: float = 0.7) -> ProposalSet:
    """Pick exactly ``n`` proposals, returned in descending-score order.

    Candidates are the ``pre_nms_top`` highest-scoring decoded boxes after
    NMS. Without ground truth the ``n`` best-scoring survive; with ground
    truth the ``n`` with the highest max-IoU survive (ties by score). If NMS
    leaves fewer than ``n``, suppressed candidates fill the gap by score.
    """
    if n > len(anchors):
        raise ConfigError(f"{n} proposals requested but only {len(anchors)} anchors")
    scores = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    boxes = clip_boxes(decode_offsets(anchors, offsets.astype(np.float64)), image_size, image_size)
    wh = boxes[:, 2:] - boxes[:, :2]
    valid = np.flatnonzero((wh[:, 0] >= 1) & (wh[:, 1] >= 1))
    if len(valid) < n:
        valid = np.arange(len(anchors))
        boxes = np.where((wh >= 1).all(axis=1, keepdims=True), boxes, anchors)
        boxes = clip_boxes(boxes, image_size, image_size)
    order = valid[np.lexsort((valid, -scores[valid]))][: max(pre_nms_top, n)]
    kept = order[nms_indices(boxes[order], scores[order], nms_iou)]
    if gt_boxes is not None and len(gt_boxes):
        best = iou_matrix(boxes[kept], gt_boxes).max(axis=1)
        kept = kept[np.lexsort((np.arange(len(kept)), -scores[kept], -best))]
    chosen = list(kept[:n])
    if len(chosen) < n:
        taken = set(chosen)
        chosen += [i for i in order if i not in taken][: n - len(chosen)]
    chosen = np.array(chosen, dtype=np.int64)
    chosen = chosen[np.lexsort((chosen, -scores[chosen]))]
    return ProposalSet(boxes[chosen], scores[chosen])


def rpn_forward(keyframe_feature: Tensor, anchors: np.ndarray, w: DetectionWeights, n: int,
                image_size: float, gt_boxes: np.ndarray | None = None, pre_nms_top: int = 200,
                nms_iou: float = 0.7) -> RPNOutput:
    if keyframe_feature.data.ndim != 3:
        raise DimensionError(f"rpn_forward expects C x H x W, got {keyframe_feature.shape}")
    logits, reg = rpn_heads(tn.reshape(keyframe_feature, (1,) + keyframe_feature.shape), w)
    logits = tn.reshape(logits, logits.shape[1:])
    reg = tn.reshape(reg, reg.shape[1:])
    if logits.shape[0] != len(anchors):
        raise DimensionError(f"{len(anchors)} anchors for {logits.shape[0]} predictions")
    props = select_proposals(anchors, logits.data, reg.data, n, image_size, gt_boxes, pre_nms_top, nms_iou)
    return RPNOutput(props, logits, reg)


# assignment ----------------------------------------------------------------------------

@dataclass
class Assignment:
    labels: np.ndarray  # 1 positive, 0 negative, -1 ignored
    matched: np.ndarray  # index of the max-IoU gt, -1 when there is no gt
    targets: np.ndarray  # (n, 4) offsets to the matched gt; zero unless positive

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def used(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)


def assign_and_sample(proposals, gt_boxes, pos_iou: float = 0.5, neg_iou: float = 0.3,
                      low_quality_matches: bool = False, sample_size: int | None = None,
                      positive_fraction: float = 0.5, rng: np.random.Generator | None = None) -> Assignment:
    """Label boxes by max IoU with ground truth.

    ``>= pos_iou`` is positive, ``< neg_iou`` negative, the rest ignored.
    ``low_quality_matches`` also marks each gt's best box positive. When
    ``sample_size`` is set, labels outside a random subset (at most
    ``positive_fraction`` positives) become ignored.
    """
    boxes = as_boxes(proposals.boxes if isinstance(proposals, ProposalSet) else proposals)
    gts = as_boxes(gt_boxes)
    n = len(boxes)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)
    if len(gts) and n:
        ious = iou_matrix(boxes, gts)
        matched = ious.argmax(axis=1)
        best = ious[np.arange(n), matched]
        labels = np.where(best >= pos_iou, 1, np.where(best < neg_iou, 0, -1))
        if low_quality_matches:
            for g in range(len(gts)):
                top = ious[:, g].max()
                if top > 0:
                    hits = np.flatnonzero(ious[:, g] == top)
                    labels[hits] = 1
                    matched[hits] = g
        pos = np.flatnonzero(labels == 1)
        if len(pos):
            targets[pos] = encode_offsets(boxes[pos], gts[matched[pos]])
    if sample_size is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        pos = np.flatnonzero(labels == 1)
        neg = np.flatnonzero(labels == 0)
        n_pos = min(len(pos), int(sample_size * positive_fraction))
        n_neg = min(len(neg), sample_size - n_pos)
        keep = np.zeros(n, dtype=bool)
        keep[rng.permutation(pos)[:n_pos]] = True
        keep[rng.permutation(neg)[:n_neg]] = True
        labels = np.where(keep, labels, -1)
        targets[~keep] = 0
    return Assignment(labels, matched, targets)


# temporal aggregation ----------------------------------------------------------------------

def tam_attention(F_k: Tensor, F_r: Tensor, w: TAMWeights) -> Tensor:
    """Attention map ``softmax(phi(F_k) theta(F_r)^T / sqrt(d))`` over reference rows."""
    d = F_k.shape[1]
    if F_r.data.ndim != 2 or F_r.shape[1] != d or w.phi.w.shape != (d, d):
        raise DimensionError(f"tam: F_k {F_k.shape}, F_r {F_r.shape}, phi {w.phi.w.shape}")
    q = w.phi(F_k)
    k = w.theta(F_r)
    return tn.softmax(tn.scale(tn.matmul(q, tn.transpose(k, (1, 0))), 1.0 / np.sqrt(d)), axis=1)


def tam_forward(F_k: Tensor, F_r: Tensor, w: TAMWeights) -> Tensor:
    """Keyframe proposal features plus a projection of the attended raw reference features."""
    attn = tam_attention(F_k, F_r, w)
    return tn.add(F_k, w.out_linear(tn.matmul(attn, F_r)))


# head -----------------------------------------------------------------------------------

def proposal_features(frame_feature: Tensor, boxes: np.ndarray, w: DetectionWeights, cfg: ModelConfig) -> Tensor:
    """ROI-align on one 2D feature slice, flatten, project to ``feat_dim``."""
    r = cfg.roi_size
    crops = roi_align(frame_feature, boxes, r, r, 1.0 / cfg.feature_stride)
    flat = tn.reshape(crops, (crops.shape[0], -1))
    return tn.relu(w.roi_proj(flat))


def det_head_forward(features: Tensor, w: DetectionWeights) -> tuple[Tensor, Tensor]:
    """Person/background logits ``(N, 2)`` (column 1 is person) and offsets ``(N, 4)``."""
    h = tn.relu(w.head_fc(features))
    return w.cls(h), w.reg(h)


RPN_BETA = 1.0 / 9


def detection_loss(rpn_logits: Tensor, rpn_offsets: Tensor, rpn_assign: Assignment,
                   head_logits: Tensor, head_offsets: Tensor, head_assign: Assignment) -> tuple[Tensor, dict]:
    """RPN objectness BCE + RPN smooth-L1 + head CE + head smooth-L1, unit weights.

    Regression terms cover positives only and vanish when there are none.
    """
    dt = rpn_logits.dtype
    parts = {}
    used = rpn_assign.used
    obj = tn.reshape(tn.take(rpn_logits, used), (len(used), 1))
    parts["rpn_cls"] = tn.binary_cross_entropy(obj, rpn_assign.labels[used].reshape(-1, 1))
    parts["rpn_reg"] = _regression(rpn_offsets, rpn_assign, dt)
    used = head_assign.used
    parts["head_cls"] = tn.cross_entropy(tn.take(head_logits, used), head_assign.labels[used])
    parts["head_reg"] = _regression(head_offsets, head_assign, dt)
    total = parts["rpn_cls"]
    for key in ("rpn_reg", "head_cls", "head_reg"):
        total = tn.add(total, parts[key])
    return total, parts


def _regression(offsets: Tensor, assign: Assignment, dtype) -> Tensor:
    pos = assign.positives
    if len(pos) == 0:
        return Tensor(np.zeros((), dtype=dtype))
    return tn.smooth_l1(tn.take(offsets, pos), assign.targets[pos], beta=RPN_BETA)


def postprocess(head_logits: np.ndarray, head_offsets: np.ndarray, proposals: ProposalSet,
                image_size: float, conf_threshold: float = 0.8, nms_iou: float = 0.5) -> ProposalSet:
    """Decode, suppress duplicates, keep boxes whose person probability reaches the threshold."""
    z = head_logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    prob = np.exp(z[:, 1]) / np.exp(z).sum(axis=1)
    boxes = clip_boxes(decode_offsets(proposals.boxes, head_offsets.astype(np.float64)), image_size, image_size)
    wh = boxes[:, 2:] - boxes[:, :2]
    ok = np.flatnonzero((wh > 0).all(axis=1))
    keep = ok[nms_indices(boxes[ok], prob[ok], nms_iou)]
    keep = keep[prob[keep] >= conf_threshold]
    return ProposalSet(boxes[keep], prob[keep])

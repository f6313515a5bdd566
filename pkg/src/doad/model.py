"""Full detector: toy backbone, detection branch, action branch on a shared clip feature map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import action as act
from . import detection as det
from . import rng as rngmod
from . import tensor as tn
from .config import ModelConfig
from .data import ClipSample
from .geometry import ProposalSet, gen_anchors, iou_matrix
from .nn import Conv, named_parameters
from .tensor import Tensor


@dataclass
class BackboneWeights:
    conv1: Conv
    conv2: Conv
    conv3: Conv

    @classmethod
    def create(cls, rng, cfg: ModelConfig) -> "BackboneWeights":
        c, dt = cfg.channels, cfg.dtype
        half = max(c // 2, 1)
        patch = cfg.feature_stride // 2
        return cls(
            Conv.create(rng, cfg.in_channels, half, (1, patch, patch), (1, patch, patch), 0, dt),
            Conv.create(rng, half, c, (3, 3, 3), (1, 2, 2), 1, dt),
            Conv.create(rng, c, c, (3, 3, 3), 1, 1, dt),
        )


@dataclass
class DOADWeights:
    backbone: BackboneWeights
    detection: det.DetectionWeights
    action: act.ActionWeights


@dataclass
class ClipLosses:
    detection: Tensor
    action: Tensor
    parts: dict
    handoff_boxes: np.ndarray
    person_features: np.ndarray  # post-TransPC features of the handoff boxes, for the memory bank


@dataclass
class ActionState:
    """Per-clip action-branch output before memory fusion."""
    boxes: np.ndarray
    scores: np.ndarray
    features: Tensor
    attention: np.ndarray | None


class DOADModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.weights = DOADWeights(
            BackboneWeights.create(rngmod.stream(seed, "init/backbone"), cfg),
            det.DetectionWeights.create(rngmod.stream(seed, "init/detection"), cfg),
            act.ActionWeights.create(rngmod.stream(seed, "init/action"), cfg),
        )
        fs = cfg.feature_size
        self.anchors = gen_anchors(fs, fs, cfg.feature_stride, cfg.anchor_sizes, cfg.anchor_ratios)

    # parameters ------------------------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_parameters(self.weights))

    def parameters(self, prefix: str = "") -> list[Tensor]:
        return [p for name, p in self.named_parameters() if name.startswith(prefix)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @property
    def transpc_blocks(self) -> list[act.TransPCBlockWeights]:
        return self.weights.action.blocks[: self.cfg.transpc_blocks]

    # shared trunk ----------------------------------------------------------------------

    def backbone(self, clips: np.ndarray | Tensor) -> Tensor:
        """``(B, T, 3, H, W)`` frames to ``(B, T, C, h, w)`` features."""
        x = clips if isinstance(clips, Tensor) else Tensor(np.asarray(clips, dtype=self.cfg.dtype))
        x = tn.transpose(x, (0, 2, 1, 3, 4))
        w = self.weights.backbone
        x = tn.relu(w.conv1(x))
        x = tn.relu(w.conv2(x))
        x = tn.relu(w.conv3(x))
        return tn.transpose(x, (0, 2, 1, 3, 4))

    def clip_features(self, clips: np.ndarray) -> list[Tensor]:
        feats = self.backbone(clips)
        return [_index(feats, b) for b in range(feats.shape[0])]

    # detection branch --------------------------------------------------------------------

    def _frame_stack(self, X: Tensor) -> Tensor:
        k, s = self.cfg.keyframe, self.cfg.ref_offset
        return tn.take(X, [k, k - s, k + s], axis=0)

    def _proposal_features(self, X: Tensor, frames: Tensor, props: ProposalSet, refs: list[ProposalSet]) -> Tensor:
        cfg, w = self.cfg, self.weights
        if cfg.coupled_mode:
            return act.extract_person_features(X, props.boxes, w.action.person_proj, cfg.roi_size,
                                               1 / cfg.feature_stride)
        F_k = det.proposal_features(_index(frames, 0), props.boxes, w.detection, cfg)
        if not cfg.tam_enabled:
            return F_k
        F_r = tn.concat([det.proposal_features(_index(frames, i + 1), r.boxes, w.detection, cfg)
                         for i, r in enumerate(refs)], axis=0)
        return det.tam_forward(F_k, F_r, w.detection.tam)

    def _rpn(self, frames: Tensor, gt_boxes: np.ndarray | None):
        cfg = self.cfg
        logits, reg = det.rpn_heads(frames, self.weights.detection)
        props = [det.select_proposals(self.anchors, logits.data[i], reg.data[i], cfg.num_proposals,
                                      cfg.image_size, gt_boxes if i == 0 else None, cfg.pre_nms_top,
                                      cfg.rpn_nms_iou)
                 for i in range(3)]
        return logits, reg, props

    def detection_forward(self, X: Tensor, gt_boxes: np.ndarray | None = None):
        frames = self._frame_stack(X)
        logits, reg, props = self._rpn(frames, gt_boxes)
        feats = self._proposal_features(X, frames, props[0], props[1:])
        cls_logits, offsets = det.det_head_forward(feats, self.weights.detection)
        return logits, reg, props[0], cls_logits, offsets

    def detect(self, X: Tensor, conf_threshold: float = 0.8, nms_iou: float = 0.5) -> ProposalSet:
        _, _, props, cls_logits, offsets = self.detection_forward(X)
        return det.postprocess(cls_logits.data, offsets.data, props, self.cfg.image_size, conf_threshold, nms_iou)

    # action branch -------------------------------------------------------------------------

    def action_features(self, X: Tensor, boxes: np.ndarray) -> tuple[Tensor, Tensor | None]:
        """Person features after the TransPC stack (or plain, when disabled) and final attention."""
        cfg, w = self.cfg, self.weights.action
        scale = 1 / cfg.feature_stride
        F_p = act.extract_person_features(X, boxes, w.person_proj, cfg.roi_size, scale)
        if not cfg.transpc_enabled:
            return F_p, None
        if cfg.person_person_only:
            keys = act.repeat_cols(F_p)
        else:
            keys = act.build_pc_matrix(X, boxes, w.context, cfg.roi_size, scale)
        state = act.TransPCState(F_p, keys, np.asarray(boxes))
        return act.transpc_stack(state, self.transpc_blocks, cfg.attention_scale, cfg.shared_kv,
                                 return_attention=True)

    def fuse_memory(self, feats: Tensor, bank: act.MemoryBank | None, t: int) -> Tensor:
        if bank is None or self.cfg.memory_window <= 0:
            return feats
        return act.memory_fuse(feats, bank, t, self.weights.action.memory)

    def action_logits(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        w = self.weights.action
        return w.pose(feats), w.interaction(feats)

    # training ----------------------------------------------------------------------------------

    def handoff_boxes(self, proposals: ProposalSet, gt_boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
        """One box per gt: its best proposal above ``iou_threshold``, else the gt box itself."""
        gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        out = gt.copy()
        if len(proposals) and len(gt):
            ious = iou_matrix(proposals.boxes, gt)
            for g in range(len(gt)):
                best = int(np.argmax(ious[:, g]))
                if ious[best, g] > iou_threshold:
                    out[g] = proposals.boxes[best]
        return out

    def clip_losses(self, X: Tensor, sample: ClipSample, bank: act.MemoryBank | None = None,
                    handoff_iou: float = 0.8, rng: np.random.Generator | None = None) -> ClipLosses:
        cfg = self.cfg
        gt = sample.boxes
        logits, reg, props, cls_logits, offsets = self.detection_forward(X, gt)
        rpn_assign = det.assign_and_sample(self.anchors, gt, low_quality_matches=True, sample_size=cfg.rpn_sample,
                                           rng=rng)
        head_assign = det.assign_and_sample(props, gt, neg_iou=cfg.head_bg_iou)
        det_loss, parts = det.detection_loss(_index(logits, 0), _index(reg, 0), rpn_assign, cls_logits, offsets,
                                             head_assign)
        boxes = self.handoff_boxes(props, gt, handoff_iou)
        feats, _ = self.action_features(X, boxes)
        stored = feats.data.copy()
        fused = self.fuse_memory(feats, bank, sample.clip_index)
        pose_logits, inter_logits, act_loss = act.action_head_and_loss(
            fused, sample.poses, sample.interaction_targets, self.weights.action.pose, self.weights.action.interaction)
        parts = {k: float(v.data) for k, v in parts.items()}
        return ClipLosses(det_loss, act_loss, parts, boxes, stored)

    # inference ------------------------------------------------------------------------------------

    def infer_state(self, X: Tensor, conf_threshold: float = 0.8, nms_iou: float = 0.5,
                    boxes: np.ndarray | None = None, scores: np.ndarray | None = None) -> ActionState:
        """Detection plus pre-memory action features for one clip.

        Passing ``boxes`` skips detection (used for oracle-box evaluation).
        """
        if boxes is None:
            dets = self.detect(X, conf_threshold, nms_iou)
            boxes, scores = dets.boxes, dets.scores
        elif scores is None:
            scores = np.ones(len(boxes))
        if len(boxes) == 0:
            return ActionState(np.zeros((0, 4)), np.zeros(0), Tensor(np.zeros((0, self.cfg.feat_dim))), None)
        feats, attn = self.action_features(X, boxes)
        return ActionState(np.asarray(boxes), np.asarray(scores), feats, None if attn is None else attn.data)

    def classify(self, state: ActionState, bank: act.MemoryBank | None, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Pose probabilities (softmax) and interaction probabilities (sigmoid)."""
        if len(state.boxes) == 0:
            return np.zeros((0, self.cfg.num_poses)), np.zeros((0, self.cfg.num_interactions))
        fused = self.fuse_memory(state.features, bank, t)
        pose_logits, inter_logits = self.action_logits(fused)
        z = pose_logits.data.astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        pose = z / z.sum(axis=1, keepdims=True)
        inter = 1 / (1 + np.exp(-inter_logits.data.astype(np.float64)))
        return pose, inter


def _index(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the first axis as a differentiable op."""
    return tn.reshape(tn.take(x, [i], axis=0), x.shape[1:])


def sample_rng(seed: int, step: int, slot: int) -> np.random.Generator:
    return rngmod.stream(seed, "train/sample", step * 1000 + slot)

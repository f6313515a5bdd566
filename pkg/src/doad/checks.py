"""Finite-difference gradient suite over every differentiable op and the composed pipeline.

All checks run in float64 at points chosen away from kinks (ReLU zeros, max
ties, smooth-L1 breakpoints) so central differences are valid.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import action as act
from . import detection as det
from . import tensor as tn
from .config import ModelConfig
from .geometry import ProposalSet, gen_anchors, roi_align
from .gradcheck import GradCheckReport, grad_check
from .nn import named_parameters
from .tensor import Tensor


def _t(rng: np.random.Generator, *shape, margin: float = 0.0) -> Tensor:
    """Random float64 tensor; with ``margin`` every entry satisfies ``|x| >= margin``."""
    x = rng.normal(size=shape)
    if margin:
        x = np.sign(x) * (margin + np.abs(x))
    return Tensor(x, requires_grad=True)


def _weighted(out: Tensor, rng_seed: int = 99) -> Tensor:
    """Reduce any tensor to a scalar with fixed random weights so every entry matters."""
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return tn.sum(tn.mul(out, Tensor(w.astype(out.dtype))))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    r = _t(rng, 3, 4, margin=0.1)
    bias = _t(rng, 4)
    m1, m2 = _t(rng, 3, 5), _t(rng, 5, 2)
    lw, lb = _t(rng, 4, 3), _t(rng, 3)
    x3 = _t(rng, 2, 3, 4)
    sm = _t(rng, 3, 5)
    mp = Tensor(rng.permutation(24).reshape(2, 3, 4).astype(np.float64) * 0.1, requires_grad=True)
    img2, k2, kb2 = _t(rng, 2, 6, 6), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    img3, k3 = _t(rng, 2, 4, 5, 5), _t(rng, 2, 2, 3, 3, 3)
    fmap = _t(rng, 2, 8, 8)
    boxes = np.array([[4.0, 6.0, 21.0, 27.0], [10.3, 2.2, 30.1, 19.7]])
    ce_logits, bce_logits = _t(rng, 4, 3), _t(rng, 4, 3)
    sl_pred = Tensor(rng.uniform(-1, 1, size=(4, 4)), requires_grad=True)
    sl_target = sl_pred.data + rng.choice([-1, 1], size=(4, 4)) * rng.uniform(0.2, 0.5, size=(4, 4))
    sl_target[0] = sl_pred.data[0] + 0.05
    return {
        "add": (lambda: _weighted(tn.add(a, b)), [a, b]),
        "sub": (lambda: _weighted(tn.sub(a, b)), [a, b]),
        "mul": (lambda: _weighted(tn.mul(a, b)), [a, b]),
        "neg": (lambda: _weighted(tn.neg(a)), [a]),
        "scale": (lambda: _weighted(tn.scale(a, -2.5)), [a]),
        "relu": (lambda: _weighted(tn.relu(r)), [r]),
        "sigmoid": (lambda: _weighted(tn.sigmoid(a)), [a]),
        "add_bias": (lambda: _weighted(tn.add_bias(a, bias)), [a, bias]),
        "reshape": (lambda: _weighted(tn.reshape(a, (2, 6))), [a]),
        "transpose": (lambda: _weighted(tn.transpose(x3, (2, 0, 1))), [x3]),
        "concat": (lambda: _weighted(tn.concat([a, b], axis=1)), [a, b]),
        "stack": (lambda: _weighted(tn.stack([a, b], axis=0)), [a, b]),
        "take": (lambda: _weighted(tn.take(a, [2, 0, 2], axis=0)), [a]),
        "repeat": (lambda: _weighted(tn.repeat(a, 1, 3)), [a]),
        "sum": (lambda: _weighted(tn.sum(x3, axes=(0, 2))), [x3]),
        "matmul": (lambda: _weighted(tn.matmul(m1, m2)), [m1, m2]),
        "linear": (lambda: _weighted(tn.linear(x3, lw, lb)), [x3, lw, lb]),
        "softmax": (lambda: _weighted(tn.softmax(sm, axis=1)), [sm]),
        "pool_max": (lambda: _weighted(tn.pool(mp, "max", (1, 2))), [mp]),
        "pool_mean": (lambda: _weighted(tn.pool(x3, "mean", (0, 2))), [x3]),
        "mean": (lambda: _weighted(tn.mean(x3, axes=1)), [x3]),
        "conv2d": (lambda: _weighted(tn.conv(img2, k2, kb2, stride=(1, 2), padding=1)), [img2, k2, kb2]),
        "conv3d": (lambda: _weighted(tn.conv(img3, k3, None, stride=(1, 2, 2), padding=1)), [img3, k3]),
        "roi_align": (lambda: _weighted(roi_align(fmap, boxes, 3, 3, 0.25)), [fmap]),
        "cross_entropy": (lambda: tn.cross_entropy(ce_logits, [0, 2, 1, 2]), [ce_logits]),
        "binary_cross_entropy": (
            lambda: tn.binary_cross_entropy(bce_logits, [[1, 0, 0], [0, 1, 1], [0, 0, 0], [1, 1, 0]]), [bce_logits]),
        "smooth_l1": (lambda: tn.smooth_l1(sl_pred, sl_target, beta=1 / 9), [sl_pred]),
    }


def tiny_config() -> ModelConfig:
    return ModelConfig(image_size=32, channels=4, feat_dim=4, pc_channels=4, anchor_sizes=(8.0, 16.0),
                       anchor_ratios=(1.0,), num_proposals=4, pre_nms_top=32, roi_size=3, transpc_blocks=2,
                       precision="float64")


def composed_case(seed: int = 0):
    """Frozen-routing pipeline: TAM detection head, TransPC action head, memory fusion, both losses.

    Proposal boxes and target assignments are computed once and held fixed,
    matching how the training loop treats them as non-differentiable routing.
    """
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    wd = det.DetectionWeights.create(np.random.default_rng(seed + 1), cfg)
    wa = act.ActionWeights.create(np.random.default_rng(seed + 2), cfg)
    X = Tensor(0.3 * np.abs(rng.normal(size=(cfg.frames, cfg.channels, 4, 4))) + 0.05, requires_grad=True)
    gt = np.array([[3.0, 4.0, 15.0, 26.0], [17.0, 6.0, 29.0, 30.0]])
    anchors = gen_anchors(4, 4, 8, cfg.anchor_sizes, cfg.anchor_ratios)
    k, s = cfg.keyframe, cfg.ref_offset
    props_k = np.concatenate([gt + 0.7, gt[::-1] - 1.1])
    props_r = [props_k + 1.3, props_k - 0.9]
    key_set = ProposalSet(props_k, np.full(4, 0.5))
    rpn_assign = det.assign_and_sample(anchors, gt, low_quality_matches=True)
    head_assign = det.assign_and_sample(key_set, gt)
    bank = act.MemoryBank(2)
    bank.write(0, rng.normal(size=(3, cfg.feat_dim)))
    bank.write(2, rng.normal(size=(2, cfg.feat_dim)))
    poses = np.array([0, 2])
    inter = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]])

    def f() -> Tensor:
        frames = tn.take(X, [k, k - s, k + s], axis=0)
        logits, reg = det.rpn_heads(frames, wd)
        one = lambda t, i: tn.reshape(tn.take(t, [i], axis=0), t.shape[1:])  # noqa: E731
        F_k = det.proposal_features(one(frames, 0), props_k, wd, cfg)
        F_r = tn.concat([det.proposal_features(one(frames, i + 1), props_r[i], wd, cfg) for i in range(2)], axis=0)
        cls_logits, offsets = det.det_head_forward(det.tam_forward(F_k, F_r, wd.tam), wd)
        det_loss, _ = det.detection_loss(one(logits, 0), one(reg, 0), rpn_assign, cls_logits, offsets, head_assign)
        F_p = act.extract_person_features(X, gt, wa.person_proj, cfg.roi_size)
        F_pc = act.build_pc_matrix(X, gt, wa.context, cfg.roi_size)
        feats = act.transpc_stack(act.TransPCState(F_p, F_pc, gt), wa.blocks[:cfg.transpc_blocks])
        feats = act.memory_fuse(feats, bank, 1, wa.memory)
        _, _, act_loss = act.action_head_and_loss(feats, poses, inter, wa.pose, wa.interaction)
        return tn.add(det_loss, act_loss)

    params = dict(named_parameters(wd, "det"))
    params.update(named_parameters(wa, "act"))
    chosen = ["det.tam.phi.w", "det.tam.theta.w", "det.tam.out_linear.w", "det.head_fc.b", "det.cls.w",
              "det.reg.b", "det.rpn_cls.b", "det.rpn_reg.b", "det.roi_proj.b",
              "act.person_proj.w", "act.context.conv1.b", "act.context.proj.w", "act.blocks.0.key_proj.w",
              "act.blocks.0.value_proj.b", "act.blocks.1.out_proj.w", "act.memory.query.w", "act.memory.value.b",
              "act.pose.w", "act.interaction.b"]
    missing = [c for c in chosen if c not in params]
    if missing:
        raise KeyError(f"composed check: unknown parameters {missing}")
    return f, [X] + [params[c] for c in chosen], ["X"] + chosen


def run_gradient_suite(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = {}
    for name, (f, inputs) in op_cases(rng).items():
        reports[name] = grad_check(f, inputs, eps=eps, tol=tol)
    f, inputs, names = composed_case(seed)
    reports["composed"] = grad_check(f, inputs, eps=eps, tol=tol, names=names)
    return reports

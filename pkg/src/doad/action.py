"""Action branch: person features, pairwise person-context keys, TransPC, memory bank.

Shapes: ``X`` is the clip feature map ``(T, C, H, W)``; ``F_p`` is ``(n, d)``;
the person-context matrix ``F_pc`` is ``(n, n, d)`` with entry ``[i, j]``
describing target ``i`` together with supporting person ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .errors import ConfigError, DimensionError, DomainError
from .geometry import BBox, as_boxes, enclosing_boxes, roi_align
from .nn import Conv, Linear
from .tensor import Tensor


@dataclass
class TransPCBlockWeights:
    key_proj: Linear
    value_proj: Linear
    out_proj: Linear

    @classmethod
    def create(cls, rng, d: int, dtype=np.float64) -> "TransPCBlockWeights":
        return cls(Linear.create(rng, d, d, dtype), Linear.create(rng, d, d, dtype), Linear.create(rng, d, d, dtype))


@dataclass
class ContextEncoderWeights:
    """Zero-padded convs and projection turning an enclosing-box crop into ``f_pc``."""
    conv1: Conv
    conv2: Conv
    proj: Linear

    @classmethod
    def create(cls, rng, c_in: int, c_mid: int, d: int, dtype=np.float64) -> "ContextEncoderWeights":
        return cls(Conv.create(rng, c_in, c_mid, (3, 3), 1, 1, dtype), Conv.create(rng, c_mid, c_mid, (3, 3), 1, 1, dtype),
                   Linear.create(rng, c_mid, d, dtype))


@dataclass
class MemoryWeights:
    query: Linear
    key: Linear
    value: Linear
    out: Linear

    @classmethod
    def create(cls, rng, d: int, dtype=np.float64) -> "MemoryWeights":
        return cls(*(Linear.create(rng, d, d, dtype) for _ in range(4)))


@dataclass
class ActionWeights:
    person_proj: Linear
    context: ContextEncoderWeights
    blocks: list[TransPCBlockWeights]
    memory: MemoryWeights
    pose: Linear
    interaction: Linear

    @classmethod
    def create(cls, rng, cfg: ModelConfig) -> "ActionWeights":
        d, dt = cfg.feat_dim, cfg.dtype
        return cls(
            person_proj=Linear.create(rng, cfg.channels, d, dt),
            context=ContextEncoderWeights.create(rng, cfg.channels, cfg.pc_channels, d, dt),
            blocks=[TransPCBlockWeights.create(rng, d, dt) for _ in range(max(cfg.transpc_blocks, 1))],
            memory=MemoryWeights.create(rng, d, dt),
            pose=Linear.create(rng, d, cfg.num_poses, dt),
            interaction=Linear.create(rng, d, cfg.num_interactions, dt),
        )


@dataclass
class TransPCState:
    F_p: Tensor
    F_pc: Tensor
    boxes: np.ndarray

    def __post_init__(self):
        n = len(self.boxes)
        if n < 1:
            raise DimensionError("TransPC needs at least one person")
        if self.F_p.shape[0] != n or self.F_pc.shape[:2] != (n, n) or self.F_pc.shape[2] != self.F_p.shape[1]:
            raise DimensionError(f"inconsistent state: F_p {self.F_p.shape}, F_pc {self.F_pc.shape}, {n} boxes")


# person features -------------------------------------------------------------------

def extract_person_features(X: Tensor, boxes, proj: Linear, roi_size: int = 7,
                            spatial_scale: float = 1 / 8) -> Tensor:
    """ROI-align every temporal slice, average over time and space, project to ``d``."""
    b = as_boxes(boxes)
    if len(b) == 0:
        raise DimensionError("extract_person_features: no boxes")
    crops = roi_align(X, b, roi_size, roi_size, spatial_scale)  # n, T, C, r, r
    pooled = tn.pool(crops, "mean", (1, 3, 4))  # n, C
    return proj(pooled)


def temporal_mean(X: Tensor) -> Tensor:
    return tn.pool(X, "mean", 0)


def context_crops(X_bar: Tensor, boxes, roi_size: int = 7, spatial_scale: float = 1 / 8) -> Tensor:
    """Pre-projection ROI crops for every ordered pair: ``(n, n, C, r, r)``."""
    b = as_boxes(boxes)
    n = len(b)
    enc = enclosing_boxes(b).reshape(-1, 4)
    crops = roi_align(X_bar, enc, roi_size, roi_size, spatial_scale)
    return tn.reshape(crops, (n, n) + crops.shape[1:])


def encode_context(crops: Tensor, w: ContextEncoderWeights) -> Tensor:
    """``(m, C, r, r)`` crops -> ``(m, d)`` via conv, conv, spatial max pool, projection."""
    h = tn.relu(w.conv1(crops))
    h = tn.relu(w.conv2(h))
    return w.proj(tn.pool(h, "max", (2, 3)))


def person_context_feature(X: Tensor, box_i: BBox, box_j: BBox, w: ContextEncoderWeights,
                           roi_size: int = 7, spatial_scale: float = 1 / 8) -> Tensor:
    b = as_boxes([box_i, box_j])
    enc = enclosing_boxes(b)[0, 1][None]
    if np.any(enc[:, 2:] - enc[:, :2] <= 0):
        raise DomainError("person_context_feature: zero-area enclosing box")
    crop = roi_align(temporal_mean(X), enc, roi_size, roi_size, spatial_scale)
    return tn.reshape(encode_context(crop, w), (w.proj.w.shape[1],))


def build_pc_matrix(X: Tensor, boxes, w: ContextEncoderWeights, roi_size: int = 7,
                    spatial_scale: float = 1 / 8) -> Tensor:
    """``F_pc[i, j] = person_context_feature(X, boxes[i], boxes[j])`` for all ordered pairs."""
    b = as_boxes(boxes)
    n = len(b)
    if n < 1:
        raise DimensionError("build_pc_matrix: no boxes")
    crops = context_crops(temporal_mean(X), b, roi_size, spatial_scale)
    flat = tn.reshape(crops, (n * n,) + crops.shape[2:])
    return tn.reshape(encode_context(flat, w), (n, n, w.proj.w.shape[1]))


def repeat_rows(F_p: Tensor) -> Tensor:
    """``out[i, j] = F_p[i]`` for every ``j``."""
    return tn.repeat(F_p, 1, F_p.shape[0])


def repeat_cols(F_p: Tensor) -> Tensor:
    """``out[i, j] = F_p[j]`` for every ``i``; keys for person-person attention."""
    return tn.repeat(F_p, 0, F_p.shape[0])


# TransPC -----------------------------------------------------------------------------

def transpc_attention(F_q: Tensor, F_pc: Tensor, w: TransPCBlockWeights, scaled: bool = False,
                      shared_kv: bool = False) -> tuple[Tensor, Tensor]:
    """Return the row-softmax attention ``(n, n)`` and the value matrix ``(n, n, d)``."""
    n, d = F_q.shape
    if F_pc.shape != (n, n, d) or w.key_proj.w.shape != (d, d):
        raise DimensionError(f"transpc: F_p {F_q.shape}, F_pc {F_pc.shape}, key {w.key_proj.w.shape}")
    K = w.key_proj(F_pc)
    V = K if shared_kv else w.value_proj(F_pc)
    logits = tn.sum(tn.mul(repeat_rows(F_q), K), axes=2)  # n, n
    if scaled:
        logits = tn.scale(logits, 1.0 / np.sqrt(d))
    return tn.softmax(logits, axis=1), V


def transpc_contribution(F_q: Tensor, F_pc: Tensor, w: TransPCBlockWeights, scaled: bool = False,
                         shared_kv: bool = False) -> tuple[Tensor, Tensor]:
    """The block's residual term ``out_proj(sum_j A[i, j] V[i, j])`` and its attention map."""
    n, d = F_q.shape
    A, V = transpc_attention(F_q, F_pc, w, scaled, shared_kv)
    aggregated = tn.sum(tn.mul(tn.repeat(A, 2, d), V), axes=1)  # n, d
    return w.out_proj(aggregated), A


def transpc_block(state: TransPCState, w: TransPCBlockWeights, scaled: bool = False,
                  shared_kv: bool = False) -> Tensor:
    contrib, _ = transpc_contribution(state.F_p, state.F_pc, w, scaled, shared_kv)
    return tn.add(state.F_p, contrib)


def transpc_stack(state: TransPCState, blocks: list[TransPCBlockWeights], scaled: bool = False,
                  shared_kv: bool = False, return_attention: bool = False):
    """Dense-serial stack: block ``b`` sees ``F_p`` plus every earlier block's residual term.

    ``F_pc`` is shared by all blocks. With ``return_attention`` the final
    block's attention map is returned as well.
    """
    if not blocks:
        raise ConfigError("transpc_stack needs at least one block")
    x = state.F_p
    A = None
    for w in blocks:
        contrib, A = transpc_contribution(x, state.F_pc, w, scaled, shared_kv)
        x = tn.add(x, contrib)
    return (x, A) if return_attention else x


# memory bank ----------------------------------------------------------------------------

@dataclass
class MemoryBank:
    """Person features keyed by clip index, read over a symmetric window."""
    window: int = 4
    store: dict[int, np.ndarray] = field(default_factory=dict)

    def write(self, clip_index: int, features: np.ndarray) -> None:
        self.store[int(clip_index)] = np.array(features, copy=True)

    def read(self, t: int) -> np.ndarray | None:
        """Stacked features from ``[t - window, t + window]`` excluding ``t``, or None."""
        rows = [self.store[i] for i in range(t - self.window, t + self.window + 1)
                if i != t and i in self.store and len(self.store[i])]
        return np.concatenate(rows, axis=0) if rows else None

    def touched(self, t: int) -> list[int]:
        return [i for i in range(t - self.window, t + self.window + 1) if i != t and i in self.store]

    def __len__(self) -> int:
        return len(self.store)


def memory_attention(current: Tensor, memory: np.ndarray, w: MemoryWeights) -> Tensor:
    d = current.shape[1]
    mem = Tensor(memory.astype(current.dtype))
    q = w.query(current)
    k = w.key(mem)
    return tn.softmax(tn.scale(tn.matmul(q, tn.transpose(k, (1, 0))), 1.0 / np.sqrt(d)), axis=1)


def memory_fuse(current: Tensor, bank: MemoryBank, t: int, w: MemoryWeights) -> Tensor:
    """Scaled dot-product attention over windowed bank entries plus residual."""
    memory = bank.read(t)
    if memory is None:
        return current
    if memory.shape[1] != current.shape[1]:
        raise DimensionError(f"bank features {memory.shape} vs current {current.shape}")
    attn = memory_attention(current, memory, w)
    values = w.value(Tensor(memory.astype(current.dtype)))
    return tn.add(current, w.out(tn.matmul(attn, values)))


# heads ---------------------------------------------------------------------------------

def action_head_and_loss(features: Tensor, pose_targets, interaction_targets, pose: Linear,
                         interaction: Linear) -> tuple[Tensor, Tensor, Tensor]:
    """Pose logits, interaction logits, and CE(pose) + BCE(interaction)."""
    pose_logits = pose(features)
    inter_logits = interaction(features)
    total = tn.add(tn.cross_entropy(pose_logits, pose_targets),
                   tn.binary_cross_entropy(inter_logits, interaction_targets))
    return pose_logits, inter_logits, total


def renormalize_without_self(A: np.ndarray) -> np.ndarray:
    """Zero the diagonal and rescale each row of the remaining weights to sum to 1."""
    R = np.array(A, dtype=np.float64, copy=True)
    np.fill_diagonal(R, 0.0)
    s = R.sum(axis=1, keepdims=True)
    return np.divide(R, s, out=np.zeros_like(R), where=s > 0)

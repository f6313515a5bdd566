"""Axis-aligned box arithmetic and ROI feature cropping.

Boxes are ``(x1, y1, x2, y2)`` in continuous keyframe pixel coordinates,
half-open, with no ``+1`` pixel convention. Array forms are ``(n, 4)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError
from .tensor import Tensor, record, reshape


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise DomainError(f"invalid box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def contains(self, other: "BBox") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)

    @classmethod
    def from_array(cls, a) -> "BBox":
        return cls(*(float(v) for v in a))


def as_boxes(boxes) -> np.ndarray:
    """Coerce a BBox, a sequence of BBox, or an array to an ``(n, 4)`` array."""
    if isinstance(boxes, BBox):
        return boxes.as_array()[None]
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    else:
        boxes = list(boxes)
        if boxes and isinstance(boxes[0], BBox):
            arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
        else:
            arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


@dataclass
class ProposalSet:
    boxes: np.ndarray
    scores: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = as_boxes(self.boxes)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.boxes) != len(self.scores):
            raise DimensionError(f"{len(self.boxes)} boxes but {len(self.scores)} scores")
        if self.features is not None and len(self.features) != len(self.boxes):
            raise DimensionError(f"{len(self.boxes)} boxes but {len(self.features)} feature rows")
        if self.scores.size and (self.scores.min() < 0 or self.scores.max() > 1):
            raise DomainError("proposal scores must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.boxes)

    def bbox(self, i: int) -> BBox:
        return BBox.from_array(self.boxes[i])

    def subset(self, idx) -> "ProposalSet":
        idx = np.asarray(idx, dtype=np.int64)
        feats = None if self.features is None else self.features[idx]
        return ProposalSet(self.boxes[idx], self.scores[idx], feats)


def area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a, b) -> np.ndarray:
    a, b = as_boxes(a), as_boxes(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def enclosing_box(t: BBox, s: BBox) -> BBox:
    """Smallest box containing both the target and the supporting box."""
    return BBox(min(t.x1, s.x1), min(t.y1, s.y1), max(t.x2, s.x2), max(t.y2, s.y2))


def enclosing_boxes(boxes) -> np.ndarray:
    """All ordered-pair enclosing boxes as an ``(n, n, 4)`` array."""
    b = as_boxes(boxes)
    return np.stack([
        np.minimum(b[:, None, 0], b[None, :, 0]),
        np.minimum(b[:, None, 1], b[None, :, 1]),
        np.maximum(b[:, None, 2], b[None, :, 2]),
        np.maximum(b[:, None, 3], b[None, :, 3]),
    ], axis=-1)


def nms_indices(boxes, scores, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending-score order.

    Equal scores keep input order.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    if len(order) == 0:
        return order
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.array(keep, dtype=np.int64)


def nms(p: ProposalSet, iou_threshold: float = 0.5) -> ProposalSet:
    return p.subset(nms_indices(p.boxes, p.scores, iou_threshold))


def gen_anchors(feature_h: int, feature_w: int, stride: float, sizes: Sequence[float],
                aspect_ratios: Sequence[float]) -> np.ndarray:
    """Anchors as an ``(H*W*len(sizes)*len(ratios), 4)`` array.

    Ordered by cell row, cell column, size, ratio. ``ratio`` is height/width
    and each anchor keeps area ``size**2``.
    """
    if feature_h <= 0 or feature_w <= 0 or stride <= 0:
        raise DomainError("gen_anchors: extents and stride must be positive")
    shapes = []
    for s in sizes:
        for r in aspect_ratios:
            w = s / np.sqrt(r)
            shapes.append((w, w * r))
    shapes = np.array(shapes, dtype=np.float64)
    cy, cx = np.meshgrid((np.arange(feature_h) + 0.5) * stride, (np.arange(feature_w) + 0.5) * stride,
                         indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    c = np.repeat(centers, len(shapes), axis=0)
    wh = np.tile(shapes, (len(centers), 1))
    return np.concatenate([c - wh / 2, c + wh / 2], axis=1)


def encode_offsets(anchor, gt) -> np.ndarray:
    """Center/size regression targets ``(dx, dy, dw, dh)`` from anchors to gt."""
    a, g = as_boxes(anchor), as_boxes(gt)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise DomainError("encode_offsets: gt box needs positive width and height")
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise DomainError("encode_offsets: anchor needs positive width and height")
    out = np.stack([
        ((g[:, 0] + g[:, 2]) - (a[:, 0] + a[:, 2])) / 2 / aw,
        ((g[:, 1] + g[:, 3]) - (a[:, 1] + a[:, 3])) / 2 / ah,
        np.log(gw / aw),
        np.log(gh / ah),
    ], axis=1)
    return out[0] if isinstance(anchor, BBox) and isinstance(gt, BBox) else out


MAX_LOG_SCALE = float(np.log(1000.0 / 16))


def decode_offsets(anchor, offsets) -> np.ndarray | BBox:
    a = as_boxes(anchor)
    d = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    cx = (a[:, 0] + a[:, 2]) / 2 + d[:, 0] * aw
    cy = (a[:, 1] + a[:, 3]) / 2 + d[:, 1] * ah
    w = aw * np.exp(np.minimum(d[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(d[:, 3], MAX_LOG_SCALE))
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return BBox.from_array(out[0]) if isinstance(anchor, BBox) else out


def clip_boxes(boxes: np.ndarray, height: float, width: float) -> np.ndarray:
    out = as_boxes(boxes).copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


# ROI align ----------------------------------------------------------------------

def _axis_weights(coords: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear neighbours and weights along one axis (zero outside [-1, size])."""
    valid = (coords >= -1.0) & (coords <= size)
    c = np.clip(coords, 0, None)
    low = np.floor(c).astype(np.int64)
    at_edge = low >= size - 1
    low = np.where(at_edge, size - 1, low)
    high = np.where(at_edge, size - 1, low + 1)
    c = np.where(at_edge, low.astype(np.float64), c)
    frac = c - low
    w_low = np.where(valid, 1 - frac, 0.0)
    w_high = np.where(valid, frac, 0.0)
    return low, high, w_low, w_high


def roi_align_matrix(boxes, height: int, width: int, out_h: int, out_w: int,
                     spatial_scale: float = 1.0, sampling: int = 2) -> np.ndarray:
    """Sampling matrix ``M`` with ``roi_align(F) = M @ F.reshape(-1, H*W).T``.

    Rows are ``(box, bin_y, bin_x)``; each averages ``sampling**2`` bilinear
    samples placed at regular sub-bin positions. Pixel ``i`` of the feature map
    holds the value at continuous coordinate ``i + 0.5``.
    """
    b = as_boxes(boxes)
    if out_h <= 0 or out_w <= 0:
        raise DomainError("roi_align: output extents must be positive")
    wh = b[:, 2:] - b[:, :2]
    if np.any(wh <= 0):
        raise DomainError("roi_align: zero-area box")
    n = len(b)
    x1 = b[:, 0] * spatial_scale - 0.5
    y1 = b[:, 1] * spatial_scale - 0.5
    bin_w = wh[:, 0] * spatial_scale / out_w
    bin_h = wh[:, 1] * spatial_scale / out_h
    sub = (np.arange(sampling) + 0.5) / sampling
    ys = y1[:, None, None] + (np.arange(out_h)[None, :, None] + sub[None, None, :]) * bin_h[:, None, None]
    xs = x1[:, None, None] + (np.arange(out_w)[None, :, None] + sub[None, None, :]) * bin_w[:, None, None]
    yl, yh, wyl, wyh = _axis_weights(ys, height)  # n, out_h, s
    xl, xh, wxl, wxh = _axis_weights(xs, width)  # n, out_w, s
    m = np.zeros((n, out_h, out_w, height * width), dtype=np.float64)
    norm = 1.0 / (sampling * sampling)
    bi = np.arange(n)[:, None, None, None, None]
    py = np.arange(out_h)[None, :, None, None, None]
    px = np.arange(out_w)[None, None, :, None, None]
    for yi, wy in ((yl, wyl), (yh, wyh)):
        for xi, wx in ((xl, wxl), (xh, wxh)):
            # broadcast to n, out_h, out_w, s_y, s_x
            idx = yi[:, :, None, :, None] * width + xi[:, None, :, None, :]
            w = wy[:, :, None, :, None] * wx[:, None, :, None, :] * norm
            idx, w = np.broadcast_arrays(idx, w)
            np.add.at(m, (np.broadcast_to(bi, idx.shape), np.broadcast_to(py, idx.shape),
                          np.broadcast_to(px, idx.shape), idx), w)
    return m.reshape(n * out_h * out_w, height * width)


def roi_align(feature_map: Tensor, boxes, out_h: int, out_w: int, spatial_scale: float = 1.0,
              sampling: int = 2) -> Tensor:
    """Crop boxes from a ``(..., C, H, W)`` map into ``(n, ..., C, out_h, out_w)``.

    A single :class:`BBox` returns ``(..., C, out_h, out_w)``. Differentiable
    with respect to the feature map only.
    """
    if feature_map.data.ndim < 3:
        raise DimensionError(f"roi_align: feature map must be (..., C, H, W), got {feature_map.shape}")
    lead = feature_map.shape[:-2]
    H, W = feature_map.shape[-2:]
    m = roi_align_matrix(boxes, H, W, out_h, out_w, spatial_scale, sampling).astype(feature_map.dtype)
    n = m.shape[0] // (out_h * out_w)
    flat = feature_map.data.reshape(-1, H * W)  # L, HW
    out = (m @ flat.T).reshape(n, out_h, out_w, *lead)
    out = np.moveaxis(out, (1, 2), (-2, -1))
    out = np.ascontiguousarray(out)

    def bw(g):
        gm = np.moveaxis(g, (-2, -1), (1, 2)).reshape(n * out_h * out_w, -1)
        return ((m.T @ gm).T.reshape(feature_map.shape),)

    res = record(out, (feature_map,), bw)
    if isinstance(boxes, BBox):
        res = reshape(res, res.shape[1:])
    return res

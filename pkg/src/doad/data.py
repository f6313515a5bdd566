"""Synthetic multi-actor clips with geometrically planted action labels.

Actors are colored rectangles carrying a white heading tick. Poses come from
motion (static, moving, resting on the bottom edge); interactions come from
relative geometry at the keyframe, so every label can be re-derived from the
stored boxes, headings and velocities.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rngmod
from .config import format_value, read_kv, write_kv
from .errors import ConfigError, FormatError, GenerationError, ParseError
from .geometry import BBox

POSES = ("stand", "walk", "sit")
INTERACTIONS = ("watch", "near", "follow")
WATCH, NEAR, FOLLOW = range(3)
STAND, WALK, SIT = range(3)

MAX_ACTOR = (18, 28)  # largest actor width and height in pixels

DIRECTIONS = [(math.cos(k * math.pi / 4), math.sin(k * math.pi / 4)) for k in range(8)]


@dataclass
class DataConfig:
    num_clips: int = 200
    min_actors: int = 2
    max_actors: int = 4
    frames: int = 8
    height: int = 96
    width: int = 96
    seed: int = 0
    split: str = "train"
    interaction_distance: float = 40.0
    watch_half_angle: float = 22.5
    follow_angle: float = 30.0
    near_fraction: float = 0.25
    speed: float = 2.0
    plant_prob: float = 0.7
    noise: float = 0.03
    max_retries: int = 200

    def validate(self) -> None:
        if min(self.num_clips, self.frames, self.height, self.width) < 0 or self.frames < 2:
            raise ConfigError("extents must be positive")
        if self.frames % 2:
            raise ConfigError("frames must be even")
        if not 1 <= self.min_actors <= self.max_actors:
            raise ConfigError("need 1 <= min_actors <= max_actors")
        if self.near_distance <= 15:
            raise ConfigError("near_fraction * width must exceed 15 pixels")
        if self.width < MAX_ACTOR[0] or self.height < MAX_ACTOR[1] + 3:
            raise ConfigError(f"frames must be at least {MAX_ACTOR[0]}x{MAX_ACTOR[1] + 3} to hold an actor")

    @property
    def near_distance(self) -> float:
        return self.near_fraction * self.width

    def to_flat(self) -> dict:
        return asdict(self)

    @classmethod
    def from_flat(cls, values: dict) -> "DataConfig":
        types = {f: type(v) for f, v in asdict(cls()).items()}
        out = {}
        for k, v in values.items():
            if k not in types:
                raise ConfigError(f"unknown data config key {k!r}")
            out[k] = types[k](v) if not isinstance(v, types[k]) else v
        return cls(**out)


@dataclass
class Actor:
    box: BBox
    pose: int
    heading: int  # index into the 8 compass directions (multiples of 45 degrees)
    velocity: tuple[float, float]
    color: tuple[float, float, float]
    interactions: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def interaction_vector(self, k: int = len(INTERACTIONS)) -> np.ndarray:
        v = np.zeros(k, dtype=np.float64)
        for label in self.interactions:
            v[label] = 1.0
        return v

    def box_at(self, dt: float) -> tuple[float, float, float, float]:
        vx, vy = self.velocity
        b = self.box
        return (b.x1 + vx * dt, b.y1 + vy * dt, b.x2 + vx * dt, b.y2 + vy * dt)


@dataclass
class ClipSample:
    frames: np.ndarray  # T, 3, H, W float32
    keyframe_index: int
    actors: list[Actor]
    clip_index: int

    @property
    def boxes(self) -> np.ndarray:
        return np.array([a.box.as_tuple() for a in self.actors], dtype=np.float64).reshape(-1, 4)

    @property
    def poses(self) -> np.ndarray:
        return np.array([a.pose for a in self.actors], dtype=np.int64)

    @property
    def interaction_targets(self) -> np.ndarray:
        return np.array([a.interaction_vector() for a in self.actors]).reshape(-1, len(INTERACTIONS))


# labeling rules ------------------------------------------------------------------------

def _angle_between(u, v) -> float:
    nu, nv = math.hypot(*u), math.hypot(*v)
    if nu == 0 or nv == 0:
        return math.pi
    c = (u[0] * v[0] + u[1] * v[1]) / (nu * nv)
    return math.acos(max(-1.0, min(1.0, c)))


def derive_labels(boxes: Sequence[BBox], headings: Sequence[int], velocities: Sequence[tuple[float, float]],
                  cfg: DataConfig) -> tuple[list[int], list[dict[int, tuple[int, ...]]]]:
    """Poses and interaction partners from keyframe geometry.

    * walk: nonzero velocity; sit: static with the box bottom on the frame
      edge; stand otherwise.
    * watch i->j: centers closer than ``interaction_distance`` and the
      direction to j within ``watch_half_angle`` of i's heading.
    * near: centers closer than ``near_fraction * width``.
    * follow: both moving, velocities within ``follow_angle``, centers
      closer than ``interaction_distance``.
    """
    n = len(boxes)
    centers = [b.center for b in boxes]
    moving = [math.hypot(*v) > 0 for v in velocities]
    poses = []
    for b, mv in zip(boxes, moving):
        if mv:
            poses.append(WALK)
        elif abs(b.y2 - cfg.height) < 1e-9:
            poses.append(SIT)
        else:
            poses.append(STAND)
    half = math.radians(cfg.watch_half_angle)
    follow = math.radians(cfg.follow_angle)
    inter: list[dict[int, tuple[int, ...]]] = []
    for i in range(n):
        partners: dict[int, list[int]] = {WATCH: [], NEAR: [], FOLLOW: []}
        for j in range(n):
            if j == i:
                continue
            delta = (centers[j][0] - centers[i][0], centers[j][1] - centers[i][1])
            dist = math.hypot(*delta)
            if dist < cfg.interaction_distance and _angle_between(DIRECTIONS[headings[i]], delta) <= half + 1e-12:
                partners[WATCH].append(j)
            if dist < cfg.near_distance:
                partners[NEAR].append(j)
            if (moving[i] and moving[j] and dist < cfg.interaction_distance
                    and _angle_between(velocities[i], velocities[j]) <= follow + 1e-12):
                partners[FOLLOW].append(j)
        inter.append({k: tuple(v) for k, v in partners.items() if v})
    return poses, inter


# generation ---------------------------------------------------------------------------------

def _boxes_clear(a, b, gap: float = 2.0) -> bool:
    return (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


class _Proto:
    __slots__ = ("box", "pose", "heading", "velocity")

    def __init__(self, box, pose, heading, velocity):
        self.box, self.pose, self.heading, self.velocity = box, pose, heading, velocity

    def box_at(self, dt):
        vx, vy = self.velocity
        x1, y1, x2, y2 = self.box
        return (x1 + vx * dt, y1 + vy * dt, x2 + vx * dt, y2 + vy * dt)


def _valid(p: _Proto, others: list[_Proto], cfg: DataConfig, k: int) -> bool:
    for t in range(cfg.frames):
        b = p.box_at(t - k)
        if b[0] < 0 or b[1] < 0 or b[2] > cfg.width or b[3] > cfg.height:
            return False
        if p.pose != SIT and b[3] > cfg.height - 3:
            return False
        for o in others:
            if not _boxes_clear(b, o.box_at(t - k)):
                return False
    return True


def _propose(rng: np.random.Generator, others: list[_Proto], cfg: DataConfig) -> _Proto:
    w = float(rng.integers(12, MAX_ACTOR[0] + 1))
    h = float(rng.integers(20, MAX_ACTOR[1] + 1))
    pose = int(rng.choice(3, p=[0.4, 0.35, 0.25]))
    heading = int(rng.integers(8))
    velocity = (0.0, 0.0)
    if pose == WALK:
        ux, uy = DIRECTIONS[heading]
        velocity = (cfg.speed * ux, cfg.speed * uy)
    cx = float(rng.uniform(w / 2, cfg.width - w / 2))
    cy = float(rng.uniform(h / 2, cfg.height - h / 2))
    if others and rng.random() < cfg.plant_prob:
        j = others[int(rng.integers(len(others)))]
        jc = ((j.box[0] + j.box[2]) / 2, (j.box[1] + j.box[3]) / 2)
        kind = int(rng.integers(3))
        if kind == WATCH:
            r = float(rng.uniform(18, cfg.interaction_distance - 4))
            jitter = float(rng.uniform(-0.2, 0.2))
            ux, uy = DIRECTIONS[heading]
            cx = jc[0] - r * ux - jitter * r * uy
            cy = jc[1] - r * uy + jitter * r * ux
        elif kind == NEAR:
            r = float(rng.uniform(14, cfg.near_distance - 1))
            a = float(rng.uniform(0, 2 * math.pi))
            cx, cy = jc[0] + r * math.cos(a), jc[1] + r * math.sin(a)
        elif kind == FOLLOW and j.pose == WALK:
            pose, heading, velocity = WALK, j.heading, j.velocity
            r = float(rng.uniform(18, cfg.interaction_distance - 4))
            a = float(rng.uniform(0, 2 * math.pi))
            cx, cy = jc[0] + r * math.cos(a), jc[1] + r * math.sin(a)
    x1, y1 = float(round(cx - w / 2)), float(round(cy - h / 2))
    box = (x1, y1, x1 + w, y1 + h)
    if pose == SIT:
        box = (box[0], cfg.height - h, box[2], float(cfg.height))
    return _Proto(box, pose, heading, velocity)


PALETTE = np.array([
    [0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.25, 0.4, 0.95], [0.9, 0.8, 0.15],
    [0.8, 0.3, 0.85], [0.2, 0.85, 0.85], [0.95, 0.55, 0.1], [0.55, 0.35, 0.2],
])


def _render(protos: list[_Proto], colors: np.ndarray, cfg: DataConfig, rng: np.random.Generator, k: int) -> np.ndarray:
    T, H, W = cfg.frames, cfg.height, cfg.width
    frames = 0.15 + cfg.noise * rng.standard_normal((T, 3, H, W))
    for t in range(T):
        for p, color in zip(protos, colors):
            x1, y1, x2, y2 = (int(round(v)) for v in p.box_at(t - k))
            frames[t, :, y1:y2, x1:x2] = color[:, None, None]
            ux, uy = DIRECTIONS[p.heading]
            sx = 0 if abs(ux) < 1e-9 else int(math.copysign(1, ux))
            sy = 0 if abs(uy) < 1e-9 else int(math.copysign(1, uy))
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            tx = int(round(cx + sx * ((x2 - x1) / 2 - 2.5))) - 2
            ty = int(round(cy + sy * ((y2 - y1) / 2 - 2.5))) - 2
            frames[t, :, max(ty, y1):min(ty + 4, y2), max(tx, x1):min(tx + 4, x2)] = 1.0
    return frames.astype(np.float32)


def gen_clip(cfg: DataConfig, clip_index: int) -> ClipSample:
    cfg.validate()
    k = cfg.frames // 2
    rng = rngmod.stream(cfg.seed, f"{cfg.split}/clip", clip_index)
    for _ in range(cfg.max_retries):
        n = int(rng.integers(cfg.min_actors, cfg.max_actors + 1))
        protos: list[_Proto] = []
        for _ in range(n):
            for _ in range(cfg.max_retries):
                p = _propose(rng, protos, cfg)
                if _valid(p, protos, cfg, k):
                    protos.append(p)
                    break
            else:
                break
        if len(protos) == n:
            break
    else:
        raise GenerationError("could not place actors", cfg.seed, clip_index)
    colors = PALETTE[rng.permutation(len(PALETTE))[:n]]
    boxes = [BBox(*p.box) for p in protos]
    poses, inter = derive_labels(boxes, [p.heading for p in protos], [p.velocity for p in protos], cfg)
    actors = [Actor(b, pose, p.heading, p.velocity, tuple(float(c) for c in color), it)
              for b, pose, p, color, it in zip(boxes, poses, protos, colors, inter)]
    frames = _render(protos, colors, cfg, rngmod.stream(cfg.seed, f"{cfg.split}/render", clip_index), k)
    return ClipSample(frames, k, actors, clip_index)


def gen_dataset(cfg: DataConfig) -> list[ClipSample]:
    cfg.validate()
    return [gen_clip(cfg, i) for i in range(cfg.num_clips)]


def relabel(sample: ClipSample, cfg: DataConfig):
    return derive_labels([a.box for a in sample.actors], [a.heading for a in sample.actors],
                         [a.velocity for a in sample.actors], cfg)


# annotations ----------------------------------------------------------------------------------

@dataclass(frozen=True)
class AnnotationRecord:
    clip_id: str
    timestamp: int
    x1: float
    y1: float
    x2: float
    y2: float
    action_id: int
    person_id: int
    confidence: float | None = None


def action_id(pose: int | None = None, interaction: int | None = None) -> int:
    """1-based ids: poses first, then interactions."""
    return pose + 1 if pose is not None else len(POSES) + interaction + 1


def action_name(aid: int) -> str:
    names = POSES + INTERACTIONS
    return names[aid - 1]


def clip_id(index: int) -> str:
    return f"clip{index:06d}"


def records_for_sample(sample: ClipSample, width: float, height: float) -> list[AnnotationRecord]:
    out = []
    for pid, a in enumerate(sample.actors):
        nb = (a.box.x1 / width, a.box.y1 / height, a.box.x2 / width, a.box.y2 / height)
        ids = [action_id(pose=a.pose)] + [action_id(interaction=i) for i in sorted(a.interactions)]
        for aid in ids:
            out.append(AnnotationRecord(clip_id(sample.clip_index), sample.clip_index, *nb, aid, pid))
    return out


HEADER = ["clip_id", "timestamp", "x1", "y1", "x2", "y2", "action_id", "person_id"]


def write_annotations(samples: Iterable[ClipSample] | Iterable[AnnotationRecord], path, width: float = 96,
                      height: float = 96, header: bool = False) -> None:
    """One CSV row per (person, action); headerless unless ``header``."""
    records: list[AnnotationRecord] = []
    for item in samples:
        if isinstance(item, AnnotationRecord):
            records.append(item)
        else:
            records.extend(records_for_sample(item, width, height))
    with_conf = any(r.confidence is not None for r in records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(HEADER + (["confidence"] if with_conf else []))
        for r in records:
            row = [r.clip_id, r.timestamp, repr(r.x1), repr(r.y1), repr(r.x2), repr(r.y2), r.action_id, r.person_id]
            if with_conf:
                row.append("" if r.confidence is None else repr(r.confidence))
            w.writerow(row)


def read_annotations(path) -> list[AnnotationRecord]:
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if lineno == 1 and row[0] == "clip_id":
                continue
            if len(row) not in (8, 9):
                raise ParseError(f"expected 8 or 9 columns, got {len(row)}", lineno)
            try:
                conf = float(row[8]) if len(row) == 9 and row[8] != "" else None
                rec = AnnotationRecord(row[0], int(row[1]), float(row[2]), float(row[3]), float(row[4]),
                                       float(row[5]), int(row[6]), int(row[7]), conf)
            except ValueError as e:
                raise ParseError(str(e), lineno) from e
            if not (0 <= rec.x1 < rec.x2 <= 1 and 0 <= rec.y1 < rec.y2 <= 1):
                raise ParseError("coordinates must satisfy 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1", lineno)
            out.append(rec)
    return out


# clip container ---------------------------------------------------------------------------------

MAGIC = b"DOADTNSR"
VERSION = 1


def save_clips(clips: Sequence[ClipSample] | Sequence[np.ndarray], path) -> None:
    """Write ``MAGIC, u32 version, u32 count`` then per clip five u32 dims and LE float32 data.

    Dims are the array shape left-padded with ones to five entries.
    """
    arrays = [c.frames if isinstance(c, ClipSample) else np.asarray(c) for c in clips]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for a in arrays:
            if a.ndim > 5:
                raise FormatError(f"clip tensors have at most 5 dims, got {a.ndim}")
            dims = (1,) * (5 - a.ndim) + a.shape
            fh.write(struct.pack("<5I", *dims))
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_clips(path) -> list[np.ndarray]:
    """Inverse of :func:`save_clips`; every array comes back as ``(T, C, H, W)`` (leading ones dropped)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 16
    out = []
    for i in range(count):
        if off + 20 > len(raw):
            raise FormatError(f"{path}: truncated header of clip {i}")
        dims = struct.unpack_from("<5I", raw, off)
        off += 20
        nbytes = 4 * int(np.prod(dims))
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated data of clip {i}")
        a = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims)
        off += nbytes
        while a.ndim > 4 and a.shape[0] == 1:
            a = a[0]
        out.append(a.astype(np.float32))
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out


# dataset directories -------------------------------------------------------------------------------

def _actor_json(a: Actor) -> dict:
    return {"box": list(a.box.as_tuple()), "pose": a.pose, "heading": a.heading, "velocity": list(a.velocity),
            "color": list(a.color), "interactions": {str(k): list(v) for k, v in a.interactions.items()}}


def _actor_from_json(d: dict) -> Actor:
    return Actor(BBox(*d["box"]), int(d["pose"]), int(d["heading"]), tuple(d["velocity"]), tuple(d["color"]),
                 {int(k): tuple(v) for k, v in d["interactions"].items()})


def write_dataset(directory, samples: Sequence[ClipSample], cfg: DataConfig) -> None:
    """``config.txt``, ``annotations.csv``, ``clips.bin`` and ``actors.json`` under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_kv(cfg.to_flat(), d / "config.txt")
    write_annotations(samples, d / "annotations.csv", cfg.width, cfg.height)
    save_clips(samples, d / "clips.bin")
    meta = [{"clip_index": s.clip_index, "keyframe_index": s.keyframe_index,
             "actors": [_actor_json(a) for a in s.actors]} for s in samples]
    (d / "actors.json").write_text(json.dumps(meta))


def read_dataset(directory) -> tuple[list[ClipSample], DataConfig]:
    d = Path(directory)
    cfg = DataConfig.from_flat(read_kv(d / "config.txt"))
    frames = load_clips(d / "clips.bin")
    meta = json.loads((d / "actors.json").read_text())
    if len(meta) != len(frames):
        raise FormatError(f"{d}: {len(frames)} clips but {len(meta)} metadata entries")
    samples = [ClipSample(f, m["keyframe_index"], [_actor_from_json(a) for a in m["actors"]], m["clip_index"])
               for f, m in zip(frames, meta)]
    return samples, cfg


def label_counts(samples: Iterable[ClipSample]) -> dict[str, int]:
    counts = {name: 0 for name in POSES + INTERACTIONS}
    for s in samples:
        for a in s.actors:
            counts[POSES[a.pose]] += 1
            for i in a.interactions:
                counts[INTERACTIONS[i]] += 1
    return counts


__all__ = [
    "POSES", "INTERACTIONS", "DataConfig", "Actor", "ClipSample", "AnnotationRecord", "derive_labels",
    "gen_clip", "gen_dataset", "write_annotations", "read_annotations", "save_clips", "load_clips",
    "write_dataset", "read_dataset", "records_for_sample", "label_counts", "format_value",
]

"""Training loop, frame-mAP evaluation, ablation runner and attention dumps."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import rng as rngmod
from . import tensor as tn
from .action import MemoryBank, renormalize_without_self
from .config import ModelConfig, TrainConfig
from .data import INTERACTIONS, POSES, WATCH, ClipSample
from .errors import ConfigError, FormatError, TrainingError
from .geometry import iou_matrix
from .model import DOADModel, sample_rng
from .optim import SGD
from .tensor import Tensor

log = logging.getLogger(__name__)

CATEGORIES = POSES + INTERACTIONS
INTERACTION_CATEGORIES = INTERACTIONS


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from zero, then step decay at each passed decay point."""
    if cfg.warmup_iters and step < cfg.warmup_iters:
        return cfg.base_lr * step / cfg.warmup_iters
    passed = sum(step >= p for p in cfg.decay_points)
    return cfg.base_lr * cfg.decay_factor ** passed


def make_run_dir(root, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(root) / f"{stamp}-{seed}"
    suffix = 1
    while path.exists():
        path = Path(root) / f"{stamp}-{seed}.{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    return path


# checkpoints -------------------------------------------------------------------------

def save_checkpoint(model: DOADModel, cfg: TrainConfig, path) -> None:
    meta = json.dumps({"seed": model.seed, "config": {k: list(v) if isinstance(v, tuple) else v
                                                      for k, v in cfg.to_flat().items()}})
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(meta), **arrays)


def load_checkpoint(path) -> tuple[DOADModel, TrainConfig]:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    cfg = TrainConfig.from_flat(meta["config"])
    model = DOADModel(cfg.model, seed=meta["seed"])
    model.load_state_dict(state)
    return model, cfg


# training ------------------------------------------------------------------------------

@dataclass
class LossRow:
    step: int
    lr: float
    total: float
    detection: float
    action: float


@dataclass
class TrainResult:
    model: DOADModel
    curve: list[LossRow]
    run_dir: Path | None = None

    def initial_loss(self, window: int = 20) -> float:
        return float(np.mean([r.total for r in self.curve[:window]]))

    def final_loss(self, window: int = 50) -> float:
        return float(np.mean([r.total for r in self.curve[-window:]]))


def write_curve(curve: Sequence[LossRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "total", "detection", "action"])
        for r in curve:
            w.writerow([r.step, repr(r.lr), repr(r.total), repr(r.detection), repr(r.action)])


def read_curve(path) -> list[LossRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossRow(int(r["step"]), float(r["lr"]), float(r["total"]), float(r["detection"]), float(r["action"]))
            for r in rows]


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return rngmod.stream(seed, "train/order", epoch).permutation(n)


def train_step(model: DOADModel, batch: Sequence[ClipSample], read_bank: MemoryBank | None,
               cfg: TrainConfig, step: int) -> tuple[Tensor, Tensor, Tensor, list]:
    """Forward one batch on a fresh tape, backprop, leave grads on the parameters."""
    model.zero_grad()
    with tn.Tape() as tape:
        feats = model.clip_features(np.stack([s.frames for s in batch]))
        det_terms, act_terms, outs = [], [], []
        for slot, (X, sample) in enumerate(zip(feats, batch)):
            out = model.clip_losses(X, sample, read_bank, cfg.train_handoff_iou, sample_rng(cfg.seed, step, slot))
            det_terms.append(out.detection)
            act_terms.append(out.action)
            outs.append(out)
        k = 1.0 / len(batch)
        det_loss = tn.scale(_total(det_terms), k)
        act_loss = tn.scale(_total(act_terms), k)
        total = tn.add(det_loss, act_loss)
    tn.backward(total, tape)
    return total, det_loss, act_loss, outs


def _total(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = tn.add(out, t)
    return out


def _clip_gradients(params: list[Tensor], max_norm: float) -> None:
    norm = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / norm


def train(cfg: TrainConfig, dataset: Sequence[ClipSample], run_dir=None,
          progress: Callable[[LossRow], None] | None = None) -> TrainResult:
    """Joint training of both branches.

    The memory bank is double-buffered per epoch: features written while
    visiting epoch ``e`` are read during epoch ``e + 1``, so every read sees a
    complete bank built before the current epoch started.
    """
    cfg.validate()
    if not dataset:
        raise ConfigError("train: empty dataset")
    model = DOADModel(cfg.model, seed=cfg.seed)
    params = model.parameters()
    opt = SGD(params, cfg.momentum)
    use_bank = cfg.model.memory_window > 0
    read_bank: MemoryBank | None = None
    write_bank = MemoryBank(cfg.model.memory_window) if use_bank else None
    curve: list[LossRow] = []
    n = len(dataset)
    bs = min(cfg.batch_size, n)
    per_epoch = max(n // bs, 1)
    order = epoch_order(cfg.seed, 0, n)
    for step in range(cfg.iterations):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0 and step > 0:
            order = epoch_order(cfg.seed, epoch, n)
            if use_bank:
                read_bank, write_bank = write_bank, MemoryBank(cfg.model.memory_window)
        batch = [dataset[i] for i in order[pos * bs:(pos + 1) * bs]]
        lr = lr_at(step, cfg)
        total, det_loss, act_loss, outs = train_step(model, batch, read_bank, cfg, step)
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingError(step, lr, value)
        if cfg.weight_decay:
            for p in params:
                if p.grad is not None:
                    p.grad += p.dtype.type(cfg.weight_decay) * p.data
        if cfg.grad_clip:
            _clip_gradients(params, cfg.grad_clip)
        opt.step(lr)
        if write_bank is not None:
            for sample, out in zip(batch, outs):
                write_bank.write(sample.clip_index, out.person_features)
        row = LossRow(step, lr, value, float(det_loss.data), float(act_loss.data))
        curve.append(row)
        if progress:
            progress(row)
    result = TrainResult(model, curve)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_curve(curve, run_dir / "loss_curve.csv")
        save_checkpoint(model, cfg, run_dir / "checkpoint.npz")
        result.run_dir = run_dir
    return result


# average precision -------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    frame: int
    category: int
    box: tuple[float, float, float, float]
    score: float


@dataclass(frozen=True)
class GroundTruth:
    frame: int
    category: int
    box: tuple[float, float, float, float]


def match_detections(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_threshold: float = 0.5) -> np.ndarray:
    """True-positive flags for detections sorted by descending score (stable)."""
    by_frame: dict[int, list[GroundTruth]] = {}
    for g in gts:
        by_frame.setdefault(g.frame, []).append(g)
    gt_boxes = {f: np.array([g.box for g in gs], dtype=np.float64) for f, gs in by_frame.items()}
    used = {f: np.zeros(len(gs), dtype=bool) for f, gs in by_frame.items()}
    tp = np.zeros(len(detections), dtype=bool)
    for i, d in enumerate(detections):
        if d.frame not in gt_boxes:
            continue
        ious = iou_matrix(np.array([d.box], dtype=np.float64), gt_boxes[d.frame])[0]
        ious[used[d.frame]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            used[d.frame][j] = True
            tp[i] = True
    return tp


def compute_ap(detections: Iterable[Detection], gts: Iterable[GroundTruth], category: int | None = None,
               iou_threshold: float = 0.5) -> float | None:
    """All-point interpolated AP; None when the category has no ground truth.

    Precision/recall points are taken only where the score changes, so
    detections with tied scores enter the curve together and the result does
    not depend on their order. Accumulated as an exact rational.
    """
    dets = [d for d in detections if category is None or d.category == category]
    gt = [g for g in gts if category is None or g.category == category]
    if not gt:
        return None
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    dets = [dets[i] for i in order]
    tp = match_detections(dets, gt, iou_threshold)
    if not len(dets):
        return 0.0
    ends = [i for i in range(len(dets)) if i == len(dets) - 1 or dets[i + 1].score != dets[i].score]
    ctp = np.cumsum(tp)
    points = [(int(ctp[i]), i + 1) for i in ends]  # (true positives, detections kept)
    best = Fraction(0)
    envelope = []
    for tps, kept in reversed(points):
        best = max(best, Fraction(tps, kept))
        envelope.append(best)
    envelope.reverse()
    ap, prev = Fraction(0), 0
    for (tps, _), p in zip(points, envelope):
        ap += Fraction(tps - prev, len(gt)) * p
        prev = tps
    return float(ap)


# evaluation ------------------------------------------------------------------------------

@dataclass
class ClipPrediction:
    clip_index: int
    boxes: np.ndarray
    scores: np.ndarray
    pose_probs: np.ndarray
    interaction_probs: np.ndarray
    attention: np.ndarray | None = None

    def detections(self) -> list[Detection]:
        probs = np.concatenate([self.pose_probs, self.interaction_probs], axis=1)
        return [Detection(self.clip_index, c, tuple(map(float, self.boxes[i])), float(self.scores[i] * probs[i, c]))
                for i in range(len(self.boxes)) for c in range(probs.shape[1])]


@dataclass
class EvalReport:
    ap: dict[str, float | None]
    counts: dict[str, int]
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def mean_ap(self) -> float:
        vals = [v for v in self.ap.values() if v is not None]
        return float(np.mean(vals)) if vals else 0.0

    def subset_map(self, names: Iterable[str]) -> float:
        vals = [self.ap[n] for n in names if self.ap.get(n) is not None]
        return float(np.mean(vals)) if vals else 0.0

    def summary(self) -> str:
        lines = [f"seed={self.seed}", f"mAP={self.mean_ap!r}"]
        for name in self.ap:
            ap = self.ap[name]
            lines.append(f"AP[{name}]={'absent' if ap is None else repr(ap)} gt={self.counts[name]}")
        return "\n".join(lines) + "\n"


def ground_truths(samples: Sequence[ClipSample]) -> list[GroundTruth]:
    out = []
    for s in samples:
        for a in s.actors:
            box = tuple(map(float, a.box.as_tuple()))
            out.append(GroundTruth(s.clip_index, a.pose, box))
            for k in range(len(INTERACTIONS)):
                if a.interactions.get(k):
                    out.append(GroundTruth(s.clip_index, len(POSES) + k, box))
    return out


def report_from_predictions(preds: Sequence[ClipPrediction], samples: Sequence[ClipSample], seed: int = 0,
                            config: dict | None = None, iou_threshold: float = 0.5) -> EvalReport:
    dets = [d for p in preds for d in p.detections()]
    gts = ground_truths(samples)
    ap, counts = {}, {}
    for c, name in enumerate(CATEGORIES):
        counts[name] = sum(g.category == c for g in gts)
        ap[name] = compute_ap(dets, gts, c, iou_threshold)
    return EvalReport(ap, counts, seed, dict(config or {}))


def predict(model: DOADModel, samples: Sequence[ClipSample], conf_threshold: float = 0.8, nms_iou: float = 0.5,
            oracle_boxes: bool = False, chunk: int = 8) -> list[ClipPrediction]:
    """Two-phase inference: every clip writes the bank before any clip reads it."""
    states = []
    for start in range(0, len(samples), chunk):
        part = samples[start:start + chunk]
        feats = model.clip_features(np.stack([s.frames for s in part]))
        for X, s in zip(feats, part):
            boxes = s.boxes if oracle_boxes else None
            states.append(model.infer_state(X, conf_threshold, nms_iou, boxes=boxes))
    bank = MemoryBank(model.cfg.memory_window) if model.cfg.memory_window > 0 else None
    if bank is not None:
        for s, st in zip(samples, states):
            bank.write(s.clip_index, st.features.data)
    preds = []
    for s, st in zip(samples, states):
        pose, inter = model.classify(st, bank, s.clip_index)
        preds.append(ClipPrediction(s.clip_index, st.boxes, st.scores, pose, inter, st.attention))
    return preds


def evaluate(model: DOADModel | str | Path, samples: Sequence[ClipSample], cfg: TrainConfig | None = None,
             oracle_boxes: bool = False) -> EvalReport:
    if not isinstance(model, DOADModel):
        model, cfg = load_checkpoint(model)
    if not samples:
        raise ConfigError("evaluate: empty evaluation set")
    cfg = cfg or TrainConfig(seed=model.seed, model=model.cfg)
    preds = predict(model, samples, cfg.infer_confidence, cfg.nms_iou, oracle_boxes)
    return report_from_predictions(preds, samples, model.seed, cfg.to_flat())


def write_report(report: EvalReport, directory) -> None:
    directory = Path(directory)
    with open(directory / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "ap", "gt_count"])
        for name, ap in report.ap.items():
            w.writerow([name, "absent" if ap is None else repr(ap), report.counts[name]])
    (directory / "summary.txt").write_text(report.summary())


# ablations ------------------------------------------------------------------------------------

ABLATION_VARIANTS: dict[str, dict] = {
    "decoupled": {},
    "coupled": {"coupled_mode": True},
    "no_transpc": {"transpc_enabled": False},
    "person_person": {"person_person_only": True},
    "blocks_1": {"transpc_blocks": 1},
    "blocks_2": {"transpc_blocks": 2},
    "blocks_3": {"transpc_blocks": 3},
}


@dataclass
class AblationRun:
    variant: str
    seed: int
    mean_ap: float
    interaction_map: float
    report: EvalReport


@dataclass
class AblationTable:
    runs: list[AblationRun]

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.runs))

    def values(self, variant: str, key: str = "mean_ap") -> np.ndarray:
        return np.array([getattr(r, key) for r in self.runs if r.variant == variant])

    def mean(self, variant: str, key: str = "mean_ap") -> float:
        return float(self.values(variant, key).mean())

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "seeds", "map_mean", "map_min", "map_max", "inter_map_mean", "inter_map_min",
                        "inter_map_max"])
            for v in self.variants():
                m, im = self.values(v), self.values(v, "interaction_map")
                w.writerow([v, len(m), repr(m.mean()), repr(m.min()), repr(m.max()),
                            repr(im.mean()), repr(im.min()), repr(im.max())])

    def write_runs(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "seed", "map", "inter_map"] + [f"ap_{c}" for c in CATEGORIES])
            for r in self.runs:
                w.writerow([r.variant, r.seed, repr(r.mean_ap), repr(r.interaction_map)]
                           + ["" if r.report.ap[c] is None else repr(r.report.ap[c]) for c in CATEGORIES])


def run_ablation(variants: dict[str, dict] | Sequence[str], cfg: TrainConfig, seeds: Sequence[int],
                 train_set: Sequence[ClipSample], eval_set: Sequence[ClipSample], run_dir=None) -> AblationTable:
    """Train and evaluate every variant for every seed; rows are ordered variant-major."""
    if not isinstance(variants, dict):
        variants = {v: ABLATION_VARIANTS[v] for v in variants}
    if len(variants) < 2:
        raise ConfigError("run_ablation needs at least two variants")
    runs = []
    for name, changes in variants.items():
        for seed in seeds:
            vcfg = cfg.replace(seed=seed, **changes)
            sub = Path(run_dir) / f"{name}-{seed}" if run_dir is not None else None
            result = train(vcfg, train_set, sub)
            report = evaluate(result.model, eval_set, vcfg)
            if sub is not None:
                write_report(report, sub)
            log.info("ablation %s seed %d: mAP %.4f", name, seed, report.mean_ap)
            runs.append(AblationRun(name, seed, report.mean_ap, report.subset_map(INTERACTION_CATEGORIES), report))
    table = AblationTable(runs)
    if run_dir is not None:
        table.write(Path(run_dir) / "ablation.csv")
        table.write_runs(Path(run_dir) / "ablation_runs.csv")
    return table


# attention dumps -------------------------------------------------------------------------------

@dataclass
class AttentionDump:
    clip_index: int
    boxes: np.ndarray
    raw: np.ndarray
    renormalized: np.ndarray

    @property
    def empty(self) -> bool:
        return len(self.boxes) < 2


def dump_attention(model: DOADModel, sample: ClipSample, conf_threshold: float = 0.8, nms_iou: float = 0.5,
                   boxes: np.ndarray | None = None) -> AttentionDump:
    """Final-block attention over the detected persons and its self-excluded renormalization."""
    X = model.clip_features(sample.frames[None])[0]
    state = model.infer_state(X, conf_threshold, nms_iou, boxes=boxes)
    if len(state.boxes) < 2 or state.attention is None:
        return AttentionDump(sample.clip_index, state.boxes, np.zeros((0, 0)), np.zeros((0, 0)))
    raw = np.asarray(state.attention, dtype=np.float64)
    return AttentionDump(sample.clip_index, state.boxes, raw, renormalize_without_self(raw))


def write_attention(dumps: Sequence[AttentionDump], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip", "matrix", "row", "col", "weight", "row_box", "col_box"])
        for d in dumps:
            for name, M in (("raw", d.raw), ("renormalized", d.renormalized)):
                for i in range(M.shape[0]):
                    for j in range(M.shape[1]):
                        w.writerow([d.clip_index, name, i, j, repr(float(M[i, j])),
                                    " ".join(map(repr, map(float, d.boxes[i]))),
                                    " ".join(map(repr, map(float, d.boxes[j])))])


@dataclass
class WatchStats:
    hits: int = 0
    cases: int = 0
    skipped: int = 0
    chance_sum: float = 0.0  # sum over cases of 1 / (number of candidate partners)

    @property
    def frequency(self) -> float:
        return self.hits / self.cases if self.cases else 0.0

    @property
    def chance(self) -> float:
        """Expected hit rate of a uniformly random pick among each case's other persons."""
        return self.chance_sum / self.cases if self.cases else 0.0


def _match_actors(det_boxes: np.ndarray, gt_boxes: np.ndarray, threshold: float = 0.5) -> dict[int, int]:
    """Greedy one-to-one gt -> detection assignment by IoU."""
    if not len(det_boxes) or not len(gt_boxes):
        return {}
    ious = iou_matrix(gt_boxes, det_boxes)
    out: dict[int, int] = {}
    for flat in np.argsort(-ious, axis=None, kind="stable"):
        g, d = divmod(int(flat), ious.shape[1])
        if ious[g, d] < threshold:
            break
        if g not in out and d not in out.values():
            out[g] = d
    return out


def watch_attention_stats(model: DOADModel, samples: Sequence[ClipSample], min_persons: int = 3,
                          conf_threshold: float = 0.8, nms_iou: float = 0.5,
                          oracle_boxes: bool = False) -> tuple[WatchStats, list[AttentionDump]]:
    """How often a watcher's renormalized attention peaks at the actor it watches.

    Only keyframes with at least ``min_persons`` matched persons count, so the
    chance rate is at most ``1 / (min_persons - 1)``; ``stats.chance`` gives the
    exact rate for the counted cases. Watch pairs whose target
    or partner was not detected are counted as skipped.
    """
    stats, dumps = WatchStats(), []
    for s in samples:
        pairs = [(i, j) for i, a in enumerate(s.actors) for j in a.interactions.get(WATCH, [])]
        if not pairs:
            continue
        dump = dump_attention(model, s, conf_threshold, nms_iou, s.boxes if oracle_boxes else None)
        dumps.append(dump)
        match = _match_actors(dump.boxes, s.boxes) if not dump.empty else {}
        for i, j in pairs:
            if i not in match or j not in match or len(match) < min_persons:
                stats.skipped += 1
                continue
            stats.cases += 1
            stats.chance_sum += 1 / (len(dump.boxes) - 1)
            stats.hits += int(np.argmax(dump.renormalized[match[i]]) == match[j])
    return stats, dumps

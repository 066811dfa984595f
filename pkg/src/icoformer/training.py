"""Losses, metrics, analytic synthetic scenes and a single-scene training loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, SphereUNet
from .numerics import Adam, Tape, Tensor
from .numerics.tensor import make_result
from .sphere import NodeType, SphereGraph, icosphere

log = logging.getLogger(__name__)

BERHU_FRACTION = 0.2
DELTA1_THRESHOLD = 1.25
SCENE_CLASSES = 6


# -- losses ------------------------------------------------------------

def _valid_mask(shape, valid) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != shape:
        valid = np.broadcast_to(valid.reshape(valid.shape + (1,) * (len(shape) - valid.ndim)), shape)
    return valid


def berhu_threshold(residual: np.ndarray, valid: np.ndarray) -> float:
    return BERHU_FRACTION * float(np.max(np.abs(residual[valid])))


def berhu_loss(pred: Tensor, gt, valid=None, c: float | None = None) -> Tensor:
    """Reverse Huber: |r| below c, (r^2 + c^2) / 2c above, averaged over valid nodes.

    ``c`` defaults to 0.2 * max|r| over the valid set and is treated as a
    constant (no gradient flows through it).
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    valid = _valid_mask(pred.shape, valid)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("berhu_loss: empty valid set")
    r = np.where(valid, pred.data - gt, 0.0)
    if c is None:
        c = berhu_threshold(r, valid)
    a = np.abs(r)
    if c > 0:
        quad = a > c
        elem = np.where(quad, (r * r + c * c) / (2.0 * c), a)
        dr = np.where(quad, r / c, np.sign(r))
    else:
        elem, dr = a, np.sign(r)
    elem = np.where(valid, elem, 0.0)
    dr = np.where(valid, dr, 0.0) / n
    return make_result(np.asarray(elem.sum() / n, dtype=pred.dtype), (pred,),
                       lambda g: ((g * dr).astype(pred.dtype),))


def cross_entropy_loss(logits: Tensor, labels, ignore_index: int | None = None) -> Tensor:
    """Mean -log softmax(logits)[label] over nodes whose label != ignore_index."""
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    n_nodes, n_cls = logits.shape
    if labels.shape[0] != n_nodes:
        raise ValueError("one label per node required")
    keep = np.ones(n_nodes, bool) if ignore_index is None else labels != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy_loss: every node is ignored")
    if np.any((labels[keep] < 0) | (labels[keep] >= n_cls)):
        raise ValueError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, labels[rows]].sum() / n

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels[rows]] -= 1.0
        grad[~keep] = 0.0
        return ((g * grad / n).astype(logits.dtype),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- metrics -----------------------------------------------------------

@dataclass
class MetricReport:
    mae: float | None = None
    mre: float | None = None
    delta1: float | None = None
    accuracy: float | None = None
    miou: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def depth_metrics(pred, gt, max_depth: float = 10.0) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    valid = (gt > 0) & (gt <= max_depth)
    if not valid.any():
        raise ValueError("depth_metrics: no valid ground-truth nodes")
    p, t = pred[valid], gt[valid]
    err = np.abs(p - t)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / t, t / p)
    ratio = np.where(p > 0, ratio, np.inf)
    return MetricReport(mae=float(err.mean()), mre=float((err / t).mean()),
                        delta1=float(np.mean(ratio < DELTA1_THRESHOLD)))


def seg_metrics(pred, gt, num_classes: int, ignore_index: int | None = None) -> MetricReport:
    """Accuracy over non-ignored nodes; mIoU averaged over classes present in gt."""
    pred = np.asarray(pred).astype(np.int64).reshape(-1)
    gt = np.asarray(gt).astype(np.int64).reshape(-1)
    keep = np.ones_like(gt, bool) if ignore_index is None else gt != ignore_index
    p, t = pred[keep], gt[keep]
    if p.size == 0:
        return MetricReport(accuracy=0.0, miou=0.0)
    conf = np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    present = conf.sum(1) > 0
    iou = inter[present] / union[present]
    return MetricReport(accuracy=float(inter.sum() / p.size), miou=float(iou.mean()))


# -- synthetic scenes --------------------------------------------------

# per-wall base colors: -x, +x, -y, +y, floor, ceiling
WALL_COLORS = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.25, 0.35, 0.90],
    [0.90, 0.80, 0.25],
    [0.55, 0.40, 0.30],
    [0.90, 0.90, 0.90],
])


@dataclass(eq=False)
class SynthScene:
    rank: int
    node_type: NodeType
    extents: tuple[float, float, float]
    depth: np.ndarray  # (N,) meters
    labels: np.ndarray  # (N,) int
    rgb: np.ndarray  # (N, 3) in [0, 1]
    name: str = "box"

    @property
    def num_nodes(self) -> int:
        return len(self.depth)


def box_raycast(dirs: np.ndarray, extents) -> tuple[np.ndarray, np.ndarray]:
    """Distance to and label of the first wall hit from the room center."""
    a = np.asarray(extents, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    mag = np.abs(dirs)
    with np.errstate(divide="ignore"):
        t = np.where(mag >= 1e-12, a / np.where(mag >= 1e-12, mag, 1.0), np.inf)
    axis = np.argmin(t, axis=1)
    rows = np.arange(len(dirs))
    depth = t[rows, axis]
    labels = 2 * axis + (dirs[rows, axis] > 0)
    return depth, labels.astype(np.int64)


def shade(depth: np.ndarray, labels: np.ndarray, extents) -> np.ndarray:
    """Base wall color darkened with distance (monotone, so depth is recoverable)."""
    far = float(np.linalg.norm(extents))
    k = 1.0 - 0.6 * (np.asarray(depth) / far)
    return np.clip(WALL_COLORS[labels] * k[:, None], 0.0, 1.0)


def synth_scene(g: SphereGraph, node_type="hex", extents=(3.0, 2.0, 1.5)) -> SynthScene:
    extents = tuple(float(e) for e in extents)
    if len(extents) != 3 or min(extents) <= 0:
        raise ValueError("extents must be three positive half-lengths")
    node_type = NodeType.parse(node_type)
    dirs = g.positions(node_type)
    depth, labels = box_raycast(dirs, extents)
    return SynthScene(g.rank, node_type, extents, depth, labels, shade(depth, labels, extents), "box")


def constant_depth_scene(g: SphereGraph, node_type="hex", radius: float = 2.0,
                         color=(0.6, 0.5, 0.4)) -> SynthScene:
    """Camera at the center of a uniformly colored spherical room.

    Depth, label and color are identical at every node of every rank.
    """
    node_type = NodeType.parse(node_type)
    n = g.node_count(node_type)
    return SynthScene(g.rank, node_type, (radius,) * 3, np.full(n, float(radius)),
                      np.zeros(n, dtype=np.int64), np.tile(np.asarray(color, dtype=np.float64), (n, 1)),
                      "sphere")


def make_scene(name: str, rank: int, node_type="hex", **kw) -> SynthScene:
    g = icosphere(rank)
    if name == "box":
        return synth_scene(g, node_type, **kw)
    if name == "sphere":
        return constant_depth_scene(g, node_type, **kw)
    raise ValueError(f"unknown scene {name!r} (box or sphere)")


# -- training ----------------------------------------------------------

class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: SphereUNet
    losses: list[float]
    metrics: MetricReport
    evals: list[tuple[int, dict]] = field(default_factory=list)
    seconds: float = 0.0


def task_loss(model: SphereUNet, scene: SynthScene, task: str) -> Tensor:
    out = model(scene.rgb)
    if task == "depth":
        return berhu_loss(out, scene.depth[:, None])
    return cross_entropy_loss(out, scene.labels)


def evaluate(model: SphereUNet, scene: SynthScene, task: str) -> MetricReport:
    out = model.predict(scene.rgb)
    if task == "depth":
        return depth_metrics(out[:, 0], scene.depth)
    return seg_metrics(out.argmax(axis=1), scene.labels, model.cfg.out_channels)


def check_task(cfg: ModelConfig, scene: SynthScene, task: str) -> None:
    if task not in ("depth", "seg"):
        raise ValueError(f"unknown task {task!r} (depth or seg)")
    if scene.rank != cfg.rank or scene.node_type is not NodeType(cfg.node_type):
        raise ValueError(f"scene is rank {scene.rank} {scene.node_type.value}, "
                         f"model expects rank {cfg.rank} {cfg.node_type}")
    if cfg.in_channels != 3:
        raise ValueError("scenes provide RGB input; in_channels must be 3")
    if task == "depth" and cfg.out_channels != 1:
        raise ValueError("depth task needs out_channels = 1")
    if task == "seg" and cfg.out_channels < int(scene.labels.max()) + 1:
        raise ValueError(f"seg task needs out_channels >= {int(scene.labels.max()) + 1}")


def train_toy(cfg: ModelConfig, scene: SynthScene, steps: int = 2000, seed: int = 0, task: str = "depth",
              lr: float = 1e-4, eval_every: int = 100, curve_path=None, model: SphereUNet | None = None,
              **model_kw) -> TrainResult:
    """Overfit one scene with Adam, batch size 1. Deterministic given ``seed``."""
    check_task(cfg, scene, task)
    model = model or SphereUNet(cfg, seed=seed, **model_kw)
    opt = Adam(dict(model.named_parameters()), lr=lr)
    losses, evals = [], []
    t0 = time.perf_counter()
    for step in range(1, steps + 1):
        opt.zero_grad()
        with Tape() as tape:
            loss = task_loss(model, scene, task)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at step {step}")
            tape.backward(loss)
        opt.step()
        losses.append(value)
        if eval_every and (step % eval_every == 0 or step == steps):
            rep = evaluate(model, scene, task).to_dict()
            evals.append((step, rep))
            log.info("step %d loss %.5f %s", step, value, rep)
    metrics = evaluate(model, scene, task)
    if curve_path is not None:
        write_curve(curve_path, losses, evals)
    return TrainResult(model, losses, metrics, evals, time.perf_counter() - t0)


def write_curve(path, losses: list[float], evals: list[tuple[int, dict]]) -> None:
    by_step = dict(evals)
    keys = sorted({k for _, rep in evals for k in rep})
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"] + keys)
        for i, value in enumerate(losses, start=1):
            rep = by_step.get(i, {})
            w.writerow([i, repr(value)] + [repr(rep[k]) if k in rep else "" for k in keys])

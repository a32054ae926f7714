"""Segmentation-side math: receptive fields, corner-offset box matching, prior
clustering, uncertainty-weighted multi-task loss, focal loss, offset voting and IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ClusteringError, DomainError, ShapeError

TASKS = ("sem", "off", "bbox", "cls")


@dataclass(frozen=True)
class LayerSpec:
    stride: int
    kernel: int

    def __post_init__(self):
        if self.stride < 1 or self.kernel < 1:
            raise ValueError(f"bad layer {self}")


def receptive_field_trace(layers, rf_in: int = 1) -> list[int]:
    if rf_in < 1:
        raise ValueError("rf_in must be >= 1")
    rf = rf_in
    out = []
    for layer in layers:
        rf = (rf - 1) * layer.stride + layer.kernel
        out.append(rf)
    return out


def receptive_field(layers, rf_in: int = 1) -> int:
    """Fold ``RF <- (RF - 1) * s + k`` over the stack in list order."""
    trace = receptive_field_trace(layers, rf_in)
    return trace[-1] if trace else rf_in


def parse_layer_file(text: str) -> list[LayerSpec]:
    layers = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'stride kernel', got {line!r}")
        layers.append(LayerSpec(int(parts[0]), int(parts[1])))
    return layers


@dataclass(frozen=True)
class BBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def center(self) -> tuple[float, float]:
        return ((self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2)


@dataclass(frozen=True)
class PriorBox:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError("prior dimensions must be positive")

    def at(self, cx: float, cy: float) -> BBox:
        return BBox(cx - self.width / 2, cy - self.height / 2, cx + self.width / 2, cy + self.height / 2)


def d_change(prior: BBox, gt: BBox, normalized: bool = False) -> float:
    """Relative corner-offset distance between a prior and a ground-truth box.

    Squared corner differences are divided by the gt height/width (not its
    square). ``normalized=True`` uses the scale-free ``(delta / size) ** 2`` form.
    """
    w, h = gt.width, gt.height
    if not (w > 0 and h > 0):
        raise DomainError(f"degenerate ground-truth box {gt}")
    dy_tl = abs(prior.ymin - gt.ymin)
    dx_tl = abs(prior.xmin - gt.xmin)
    dy_br = abs(prior.ymax - gt.ymax)
    dx_br = abs(prior.xmax - gt.xmax)
    if normalized:
        s = (dy_tl / h) ** 2 + (dx_tl / w) ** 2 + (dy_br / h) ** 2 + (dx_br / w) ** 2
    else:
        s = dy_tl ** 2 / h + dx_tl ** 2 / w + dy_br ** 2 / h + dx_br ** 2 / w
    return math.sqrt(s)


@dataclass
class MatchResult:
    best: dict = field(default_factory=dict)       # gt index -> (prior index, distance)
    positives: dict = field(default_factory=dict)  # prior index -> gt index


def match_priors(priors, gts, threshold: float = 0.5, normalized: bool = False) -> MatchResult:
    """Assign each gt its closest prior; priors within ``threshold`` of a gt are also positive."""
    result = MatchResult()
    if not gts or not priors:
        return result
    dist = np.array([[d_change(p, g, normalized) for p in priors] for g in gts])
    for gi in range(len(gts)):
        pi = int(np.argmin(dist[gi]))  # first minimum -> lowest prior index on ties
        result.best[gi] = (pi, float(dist[gi, pi]))
    for pi in range(len(priors)):
        gi = int(np.argmin(dist[:, pi]))
        if dist[gi, pi] <= threshold:
            result.positives[pi] = gi
    for gi, (pi, _) in result.best.items():
        result.positives[pi] = gi
    return result


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: list


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds. ``inertia`` records the objective per step."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k < 1 or n < k:
        raise ClusteringError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = [pts[int(rng.integers(n))]]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids.append(pts[idx])
        d2 = np.minimum(d2, ((pts - pts[idx]) ** 2).sum(axis=1))
    c = np.array(centroids)
    inertia = []
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dist = ((pts[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        inertia.append(float(dist[np.arange(n), labels].sum()))
        new = c.copy()
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.abs(new - c).max())
        c = new
        if shift <= tol:
            break
    dist = ((pts[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    labels = dist.argmin(axis=1)
    inertia.append(float(dist[np.arange(n), labels].sum()))
    return KMeansResult(c, labels, inertia)


def cluster_priors(gt_dims, k: int = 21, seed: int = 0) -> list[PriorBox]:
    """Prior box dimensions as k-means centroids in (w, h) space, sorted by area."""
    res = kmeans(np.asarray(gt_dims, dtype=np.float64).reshape(-1, 2), k, seed)
    order = np.argsort(res.centroids[:, 0] * res.centroids[:, 1], kind="stable")
    return [PriorBox(float(w), float(h)) for w, h in res.centroids[order]]


def assign_priors_to_layers(layer_rfs, priors) -> list[int | None]:
    """For each prior, the first layer whose RF is at least twice its larger side."""
    out = []
    for p in priors:
        need = 2 * max(p.width, p.height)
        out.append(next((i for i, rf in enumerate(layer_rfs) if rf >= need), None))
    return out


@dataclass(frozen=True)
class TaskLosses:
    L_sem: float = 0.0
    L_off: float = 0.0
    L_bbox: float = 0.0
    L_cls: float = 0.0

    def __post_init__(self):
        for v in (self.L_sem, self.L_off, self.L_bbox, self.L_cls):
            if not (math.isfinite(v) and v >= 0):
                raise DomainError(f"task losses must be finite and >= 0, got {self}")

    def values(self):
        return (self.L_sem, self.L_off, self.L_bbox, self.L_cls)


@dataclass(frozen=True)
class TaskSigmas:
    sigma_sem: float = 1.0
    sigma_off: float = 1.0
    sigma_bbox: float = 1.0
    sigma_cls: float = 1.0

    def values(self):
        return (self.sigma_sem, self.sigma_off, self.sigma_bbox, self.sigma_cls)


def hybrid_loss(losses: TaskLosses, sigmas: TaskSigmas) -> tuple[float, dict]:
    """Uncertainty-weighted sum ``L / sigma**2 + log(sigma)`` over the four tasks.

    Returns the total and ``{"sigma_<task>": d total / d sigma}``.
    """
    total = 0.0
    grads = {}
    for name, L, s in zip(TASKS, losses.values(), sigmas.values()):
        if not s > 0:
            raise DomainError(f"sigma_{name} must be positive, got {s}")
        total += L / (s * s) + math.log(s)
        grads[f"sigma_{name}"] = -2.0 * L / s ** 3 + 1.0 / s
    return total, grads


def focal_loss(p: float, gamma: float = 2.0, alpha: float = 0.25, eps: float | None = None) -> float:
    """``-alpha * (1 - p) ** gamma * ln(p)`` for the true-class probability ``p``.

    ``p == 0`` raises unless ``eps`` is given, in which case p is clamped to it.
    """
    if eps is not None:
        p = max(p, eps)
    if not (0.0 < p <= 1.0):
        raise DomainError(f"focal loss needs 0 < p <= 1, got {p}")
    return -alpha * (1.0 - p) ** gamma * math.log(p)


def focal_loss_grad(p: float, gamma: float = 2.0, alpha: float = 0.25) -> float:
    if not (0.0 < p <= 1.0):
        raise DomainError(f"focal loss needs 0 < p <= 1, got {p}")
    q = 1.0 - p
    lead = alpha * gamma * q ** (gamma - 1.0) * math.log(p) if gamma != 0 and q > 0 else 0.0
    return lead - alpha * q ** gamma / p


def assemble_instances(semantic: np.ndarray, offsets: np.ndarray, boxes, background: int = 0) -> np.ndarray:
    """Offset voting: each foreground pixel goes to the same-class box nearest its vote.

    ``offsets[y, x] = (dx, dy)`` points from the pixel to its predicted centre.
    Instance ids are 1-based box indices; background (and orphans) get 0.
    """
    semantic = np.asarray(semantic)
    offsets = np.asarray(offsets, dtype=np.float64)
    if semantic.ndim != 2 or offsets.shape != semantic.shape + (2,):
        raise ShapeError(f"semantic {semantic.shape} and offsets {offsets.shape} do not match")
    out = np.zeros(semantic.shape, dtype=np.int64)
    if not boxes:
        return out
    ys, xs = np.nonzero(semantic != background)
    if len(ys) == 0:
        return out
    vx = xs + offsets[ys, xs, 0]
    vy = ys + offsets[ys, xs, 1]
    centers = np.array([b[0].center for b in boxes])
    classes = np.array([b[1] for b in boxes])
    d = (vx[:, None] - centers[None, :, 0]) ** 2 + (vy[:, None] - centers[None, :, 1]) ** 2
    same = semantic[ys, xs][:, None] == classes[None, :]
    d = np.where(same, d, np.inf)
    best = d.argmin(axis=1)
    ok = np.isfinite(d[np.arange(len(ys)), best])
    out[ys[ok], xs[ok]] = best[ok] + 1
    return out


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum()) / float(union)


def miou(pred_masks, gt_masks) -> float:
    """Mean IoU over index-matched pairs; an empty/empty pair scores 1."""
    if len(pred_masks) != len(gt_masks):
        raise ShapeError("prediction and ground-truth lists differ in length")
    if not pred_masks:
        return 1.0
    return float(np.mean([iou(p, g) for p, g in zip(pred_masks, gt_masks)]))

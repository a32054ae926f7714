"""Synthetic amodal detector, weak-detection target selection and a greedy NN tracker."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .percept import BBox, iou
from .sensing import CameraConfig, mask_bbox, render_mask, visible_fraction
from .world import Pose2D, WorldState


@dataclass(frozen=True)
class OracleConfig:
    c_min: float = 0.1
    c_max: float = 0.95
    d_max: float = 8.0
    noise_sigma: float = 0.02
    lam: float = 0.6
    classes: tuple = ("A", "B")
    # probability of reporting the true class is confidence ** class_flip_power
    class_flip_power: float = 1.0
    vis_samples: int = 32
    # "episode": one noise offset per human held for the whole episode; "tick": fresh draw every tick
    noise_mode: str = "episode"

    def __post_init__(self):
        if self.noise_mode not in ("episode", "tick"):
            raise ValueError("noise_mode must be 'episode' or 'tick'")
        if not (0.0 <= self.c_min < self.c_max <= 1.0):
            raise ValueError("need 0 <= c_min < c_max <= 1")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")
        if not (0.0 < self.lam < 1.0):
            raise ValueError("lambda must lie in (0, 1)")


@dataclass
class DetectionRecord:
    human_id: int
    confidence: float
    predicted_class: str
    bbox: BBox | None
    visible_frac: float
    tick: int
    position: tuple = (0.0, 0.0)
    distance: float = 0.0
    iou: float | None = None
    track_id: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox"] = None if self.bbox is None else [self.bbox.xmin, self.bbox.ymin, self.bbox.xmax, self.bbox.ymax]
        d["position"] = list(self.position)
        return d


def confidence_model(visible_frac: float, distance: float, cfg: OracleConfig,
                     rng: np.random.Generator | None = None) -> float | None:
    """Visibility x proximity confidence with clamped Gaussian noise; None when unseen."""
    if visible_frac <= 0.0:
        return None
    proximity = max(0.0, 1.0 - distance / cfg.d_max)
    c = cfg.c_min + (cfg.c_max - cfg.c_min) * visible_frac * proximity
    if cfg.noise_sigma > 0 and rng is not None:
        c += rng.normal(0.0, cfg.noise_sigma)
    return min(max(c, 0.0), 1.0)


def sample_class(true_class: str, confidence: float, cfg: OracleConfig, u_keep: float, u_pick: float) -> str:
    """Keep the true label with probability ``confidence``; otherwise draw uniformly from all classes."""
    if u_keep < confidence ** cfg.class_flip_power:
        return true_class
    k = len(cfg.classes)
    return cfg.classes[min(int(u_pick * k), k - 1)]


def tick_rng(seed: int, tick: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(tick), 0xD37])


def episode_noise(seed: int, human_id: int) -> float:
    """Standard-normal offset fixed for one human over one episode."""
    return float(np.random.default_rng([int(seed), int(human_id), 0xD38]).normal())


def detect(state: WorldState, pose: Pose2D, cfg: OracleConfig, rng: np.random.Generator,
           cam: CameraConfig = CameraConfig(), with_iou_for=(), iou_resolution: int = 61,
           noise_seed: int | None = None) -> list[DetectionRecord]:
    """One record per visible human.

    Every human consumes the same three draws whether or not it is seen, so
    two robots in the same world see identical noise for the same human.
    ``with_iou_for`` lists human ids whose modal/amodal mask IoU is computed.
    In "episode" noise mode with a ``noise_seed`` the per-tick noise draw is
    replaced by a per-human offset, so an unchanged view keeps its confidence.
    """
    out = []
    for h in sorted(state.humans, key=lambda a: a.id):
        noise, u_keep, u_pick = rng.normal(), rng.random(), rng.random()
        vf = visible_fraction(h, pose, state, cfg.vis_samples, cam)
        if vf <= 0.0:
            continue
        if cfg.noise_mode == "episode" and noise_seed is not None:
            noise = episode_noise(noise_seed, h.id)
        dist = math.hypot(h.pose.x - pose.x, h.pose.y - pose.y)
        base = confidence_model(vf, dist, cfg, None)
        conf = min(max(base + cfg.noise_sigma * noise, 0.0), 1.0)
        pred = sample_class(h.true_class, conf, cfg, u_keep, u_pick)
        modal = render_mask(h, pose, state, iou_resolution, cam)
        box = mask_bbox(modal)
        if box is None:
            box = _angular_bbox(h, pose, cam, iou_resolution)
        rec = DetectionRecord(h.id, conf, pred, BBox(*box), vf, state.tick, (h.pose.x, h.pose.y), dist)
        if h.id in with_iou_for:
            amodal = render_mask(h, pose, state, iou_resolution, cam, amodal=True)
            rec.iou = iou(modal.values, amodal.values)
        out.append(rec)
    return out


def _angular_bbox(h, pose, cam: CameraConfig, res: int):
    # fallback when the visible sliver falls between raster columns
    rel = math.atan2(h.pose.y - pose.y, h.pose.x - pose.x) - pose.theta
    rel = math.atan2(math.sin(rel), math.cos(rel))
    col = (cam.fov / 2 - rel) / cam.fov * res
    col = min(max(col, 0.0), res - 1.0)
    mid = res / 2
    return (math.floor(col), math.floor(mid) - 1.0, math.floor(col) + 1.0, math.floor(mid) + 1.0)


@dataclass
class Track:
    track_id: int
    history: list = field(default_factory=list)
    est_pose: Pose2D = Pose2D(0.0, 0.0, 0.0)
    age: int = 0
    misses: int = 0

    @property
    def latest(self) -> DetectionRecord:
        return self.history[-1]

    @property
    def confidence(self) -> float:
        return self.history[-1].confidence


def select_target(detections, tracks, lam: float) -> Track | None:
    """Weakest track under ``lam``; ties go to the lowest track id."""
    weak = [t for t in tracks if t.confidence < lam]
    if not weak:
        return None
    return min(weak, key=lambda t: (t.confidence, t.track_id))


class Tracker:
    """Greedy nearest-neighbour association on estimated positions."""

    def __init__(self, gating_radius: float = 1.0, max_misses: int = 10):
        if not gating_radius > 0:
            raise ValueError("gating radius must be positive")
        self.gating_radius = gating_radius
        self.max_misses = max_misses
        self.tracks: list[Track] = []
        self.next_id = 1

    def update(self, detections) -> list[Track]:
        pairs = []
        for ti, t in enumerate(self.tracks):
            for di, d in enumerate(detections):
                dist = math.hypot(t.est_pose.x - d.position[0], t.est_pose.y - d.position[1])
                if dist <= self.gating_radius:
                    pairs.append((dist, t.track_id, di, ti))
        pairs.sort()
        used_t, used_d = set(), set()
        for dist, _, di, ti in pairs:
            if ti in used_t or di in used_d:
                continue
            used_t.add(ti)
            used_d.add(di)
            self._extend(self.tracks[ti], detections[di])
        survivors = []
        for ti, t in enumerate(self.tracks):
            if ti not in used_t:
                t.misses += 1
                t.age += 1
                if t.misses >= self.max_misses:
                    continue
            survivors.append(t)
        for di, d in enumerate(detections):
            if di in used_d:
                continue
            t = Track(self.next_id, [], Pose2D(d.position[0], d.position[1], 0.0))
            self.next_id += 1
            self._extend(t, d)
            t.age = 0
            survivors.append(t)
        self.tracks = survivors
        return self.tracks

    @staticmethod
    def _extend(track: Track, det: DetectionRecord) -> None:
        track.history.append(det)
        track.est_pose = Pose2D(det.position[0], det.position[1], 0.0)
        track.misses = 0
        track.age += 1
        det.track_id = track.track_id

    def get(self, track_id: int) -> Track | None:
        return next((t for t in self.tracks if t.track_id == track_id), None)


def update_tracks(tracker: Tracker, detections) -> list[Track]:
    return tracker.update(detections)


def write_detections_jsonl(records, path) -> None:
    """One detection per line with keys human_id, confidence, predicted_class, bbox,
    visible_frac, tick, position, distance, iou, track_id."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")

"""Recognition metrics computed purely from episode logs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HORIZON_LABELS = (80, 160, 320)
DEFAULT_HORIZON_TICKS = {80: 8, 160: 16, 320: 32}


@dataclass
class MetricsReport:
    acc_cls: float
    miou: float
    acc_tr: float
    delta_acc: dict            # horizon label -> accuracy, or None when nothing was pursued
    episodes: int
    seeds: list = field(default_factory=list)
    collision_rate: float = 0.0
    mean_return: float = 0.0
    pursuits: int = 0

    def as_row(self) -> dict:
        row = {"acc_cls": self.acc_cls, "miou": self.miou, "acc_tr": self.acc_tr}
        for k in sorted(self.delta_acc):
            row[f"delta_acc_{k}"] = self.delta_acc[k]
        row.update({"collision_rate": self.collision_rate, "episodes": self.episodes, "pursuits": self.pursuits})
        return row


def _first_detections(log) -> dict:
    first = {}
    for rec in log.ticks:
        for d in rec["detections"]:
            first.setdefault(d["human_id"], d)
    return first


def acc_cls(logs) -> float:
    """Share of humans whose first detection carries the correct class."""
    hits = total = 0
    for log in logs:
        for hid, d in _first_detections(log).items():
            total += 1
            hits += d["predicted_class"] == log.classes[hid]
    return hits / total if total else 0.0


def mean_iou(logs) -> float:
    """Mean modal-vs-amodal mask IoU at each human's first detection."""
    vals = [d["iou"] for log in logs for d in _first_detections(log).values() if d.get("iou") is not None]
    return float(np.mean(vals)) if vals else 0.0


def acc_tr(logs) -> float:
    """Share of detection-ticks whose track still maps to the human it was born on."""
    hits = total = 0
    for log in logs:
        birth = {}
        for rec in log.ticks:
            for d in rec["detections"]:
                tid = d["track_id"]
                if tid is None:
                    continue
                owner = birth.setdefault(tid, d["human_id"])
                total += 1
                hits += owner == d["human_id"]
    return hits / total if total else 0.0


def pursuit_correct(log, ticks_after: int) -> bool | None:
    """Whether the pursued human is classified correctly ``ticks_after`` past pursuit start.

    Unseen at that tick, or log ended earlier, counts as incorrect. None when
    the episode never pursued anything.
    """
    if not log.pursuit:
        return None
    when = log.pursuit["start_tick"] + ticks_after
    hid = log.pursuit["human_id"]
    for rec in log.ticks:
        if rec["tick"] == when:
            for d in rec["detections"]:
                if d["human_id"] == hid:
                    return d["predicted_class"] == log.classes[hid]
            return False
    return False


def delta_acc(logs, horizon_ticks: dict = DEFAULT_HORIZON_TICKS) -> dict:
    out = {}
    for label, ticks in sorted(horizon_ticks.items()):
        vals = [c for c in (pursuit_correct(log, ticks) for log in logs) if c is not None]
        out[label] = float(np.mean(vals)) if vals else None
    return out


def collision_rate(logs) -> float:
    return float(np.mean([log.collided for log in logs])) if logs else 0.0


def report(logs, seeds=(), horizon_ticks: dict = DEFAULT_HORIZON_TICKS) -> MetricsReport:
    if not logs:
        raise ValueError("need at least one episode")
    return MetricsReport(
        acc_cls=acc_cls(logs),
        miou=mean_iou(logs),
        acc_tr=acc_tr(logs),
        delta_acc=delta_acc(logs, horizon_ticks),
        episodes=len(logs),
        seeds=list(seeds),
        collision_rate=collision_rate(logs),
        mean_return=float(np.mean([log.total_return for log in logs])),
        pursuits=sum(1 for log in logs if log.pursuit),
    )

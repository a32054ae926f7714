import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amodal_pursuit.detection import (
    DetectionRecord,
    OracleConfig,
    Track,
    Tracker,
    confidence_model,
    detect,
    sample_class,
    select_target,
    tick_rng,
    write_detections_jsonl,
)
from amodal_pursuit.geometry import chains_to_segments
from amodal_pursuit.world import HumanAgent, Pose2D, RobotState, Velocity, WorldState
from oracles import confidence_formula, greedy_pairs

ORIGIN = Pose2D(0, 0, 0)
QUIET = OracleConfig(noise_sigma=0.0)


def world(humans=(), chains=()):
    segs = chains_to_segments(list(chains)) if chains else np.zeros((0, 4))
    return WorldState(0, RobotState(ORIGIN, Velocity(), 0.3), tuple(humans), segs)


def det(hid, x, y, conf=0.5, tick=0):
    return DetectionRecord(hid, conf, "A", None, 1.0, tick, (x, y))


def test_confidence_examples():
    cfg = OracleConfig(c_min=0.2, c_max=1.0, d_max=8, noise_sigma=0)
    assert confidence_model(1.0, 0.0, cfg) == 1.0
    assert confidence_model(0.0, 1.0, cfg) is None
    assert abs(confidence_model(0.5, 4.0, cfg) - 0.4) < 1e-12
    assert confidence_model(0.5, 4.0, cfg) == pytest.approx(confidence_formula(0.2, 1.0, 8, 0.5, 4.0))


@settings(max_examples=200, deadline=None)
@given(v1=st.floats(0.01, 1), v2=st.floats(0.01, 1), d1=st.floats(0, 12), d2=st.floats(0, 12))
def test_confidence_monotone(v1, v2, d1, d2):
    lo_v, hi_v = sorted((v1, v2))
    near, far = sorted((d1, d2))
    assert confidence_model(hi_v, near, QUIET) >= confidence_model(lo_v, near, QUIET)
    assert confidence_model(lo_v, near, QUIET) >= confidence_model(lo_v, far, QUIET)
    assert 0.0 <= confidence_model(v1, d1, OracleConfig(noise_sigma=0.5), np.random.default_rng(0)) <= 1.0


def test_oracle_config_validation():
    with pytest.raises(ValueError):
        OracleConfig(c_min=0.9, c_max=0.5)
    with pytest.raises(ValueError):
        OracleConfig(lam=1.0)
    with pytest.raises(ValueError):
        OracleConfig(d_max=0)


def test_episode_noise_holds_for_an_unchanged_view():
    w = world([HumanAgent(0, Pose2D(3, 0))])
    cfg = OracleConfig(noise_sigma=0.05)
    fixed = {detect(w, ORIGIN, cfg, tick_rng(0, t), noise_seed=7)[0].confidence for t in range(20)}
    assert len(fixed) == 1
    tick = OracleConfig(noise_sigma=0.05, noise_mode="tick")
    fresh = {detect(w, ORIGIN, tick, tick_rng(0, t), noise_seed=7)[0].confidence for t in range(20)}
    assert len(fresh) == 20
    with pytest.raises(ValueError):
        OracleConfig(noise_mode="never")


def test_detect_empty_when_nothing_in_view():
    assert detect(world(), ORIGIN, QUIET, tick_rng(0, 0)) == []
    behind = HumanAgent(0, Pose2D(-3, 0))
    assert detect(world([behind]), ORIGIN, QUIET, tick_rng(0, 0)) == []


def test_full_confidence_never_flips():
    cfg = OracleConfig(c_min=0.0, c_max=1.0, noise_sigma=0.0)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        assert sample_class("B", 1.0, cfg, rng.random(), rng.random()) == "B"


def test_half_confidence_two_classes_monte_carlo():
    rng = np.random.default_rng(1)
    hits = sum(sample_class("A", 0.5, QUIET, rng.random(), rng.random()) == "A" for _ in range(10000))
    assert abs(hits / 10000 - 0.75) <= 0.02


def test_detect_fields_and_idempotence():
    hs = [HumanAgent(0, Pose2D(3, 0.5), true_class="A"), HumanAgent(1, Pose2D(5, -1), true_class="B")]
    s = world(hs)
    a = detect(s, ORIGIN, QUIET, tick_rng(4, 0), with_iou_for=(0,))
    b = detect(s, ORIGIN, QUIET, tick_rng(4, 0), with_iou_for=(0,))
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert [r.human_id for r in a] == [0, 1]
    for r in a:
        assert 0 <= r.confidence <= 1
        assert r.bbox.xmax > r.bbox.xmin and r.bbox.ymax > r.bbox.ymin
    assert a[0].iou == 1.0 and a[1].iou is None


def test_common_random_numbers_per_human():
    # an occluded human consumes its draws, so the other's noise does not move
    cfg = OracleConfig(noise_sigma=0.05)
    h0, h1 = HumanAgent(0, Pose2D(3, 1)), HumanAgent(1, Pose2D(3, -1))
    open_ = detect(world([h0, h1]), ORIGIN, cfg, tick_rng(9, 3))
    wall = detect(world([h0, h1], [[(2, 0.3), (2, 3)]]), ORIGIN, cfg, tick_rng(9, 3))
    assert [r.human_id for r in wall] == [1]
    assert wall[0].confidence == open_[1].confidence


def test_detections_jsonl(tmp_path):
    import json
    recs = detect(world([HumanAgent(0, Pose2D(3, 0))]), ORIGIN, QUIET, tick_rng(0, 0))
    p = tmp_path / "d.jsonl"
    write_detections_jsonl(recs, p)
    rows = [json.loads(line) for line in p.read_text().splitlines()]
    assert rows[0]["human_id"] == 0 and len(rows[0]["bbox"]) == 4


def track(tid, conf):
    return Track(tid, [det(tid, 0, 0, conf)])


def test_select_target_examples():
    assert select_target([], [track(1, 0.7), track(2, 0.6)], 0.6) is None
    assert select_target([], [track(1, 0.3)], 0.6).track_id == 1
    assert select_target([], [track(1, 0.5), track(2, 0.3)], 0.6).track_id == 2
    assert select_target([], [track(3, 0.3), track(2, 0.3)], 0.6).track_id == 2


@settings(max_examples=200, deadline=None)
@given(confs=st.lists(st.floats(0, 1), max_size=8), lam=st.floats(0.01, 0.99))
def test_select_target_never_strong(confs, lam):
    t = select_target([], [track(i, c) for i, c in enumerate(confs)], lam)
    if t is None:
        assert all(c >= lam for c in confs)
    else:
        assert t.confidence < lam
        assert t.confidence == min(confs)


def test_tracker_examples():
    tr = Tracker(1.0)
    tr.update([det(0, 0, 0)])
    tr.update([det(0, 0.1, 0)])
    assert len(tr.tracks) == 1 and len(tr.tracks[0].history) == 2
    tr.update([det(0, 2.1, 0)])
    assert sorted(t.track_id for t in tr.tracks) == [1, 2]


def test_tracker_crossed_pairs_follow_greedy_oracle():
    tr = Tracker(1.0)
    tr.update([det(0, 0, 0), det(1, 1.0, 0)])
    dets = [det(0, 0.55, 0), det(1, 0.05, 0)]
    tr.update(dets)
    want = greedy_pairs([(0, 0), (1.0, 0)], [d.position for d in dets], 1.0)
    got = {t.track_id - 1: next(i for i, d in enumerate(dets) if d.track_id == t.track_id) for t in tr.tracks}
    assert got == want


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), max_size=5), min_size=1, max_size=6))
def test_tracker_matches_oracle_and_never_reuses_ids(frames):
    tr = Tracker(1.0, max_misses=2)
    seen = set()
    for pts in frames:
        prev = [(t.est_pose.x, t.est_pose.y) for t in tr.tracks]
        prev_ids = [t.track_id for t in tr.tracks]
        dets = [det(i, x, y) for i, (x, y) in enumerate(pts)]
        tr.update(dets)
        want = greedy_pairs(prev, pts, 1.0)
        for ti, dj in want.items():
            assert dets[dj].track_id == prev_ids[ti]
        new = {t.track_id for t in tr.tracks} - set(prev_ids)
        assert not (new & seen)
        seen |= {t.track_id for t in tr.tracks}
        assert all(t.misses <= tr.max_misses for t in tr.tracks)


def test_tracks_retire_after_max_misses():
    tr = Tracker(1.0, max_misses=3)
    tr.update([det(0, 0, 0)])
    for _ in range(2):
        tr.update([])
    assert len(tr.tracks) == 1
    tr.update([])
    assert tr.tracks == []
    tr.update([det(0, 0, 0)])
    assert tr.tracks[0].track_id == 2

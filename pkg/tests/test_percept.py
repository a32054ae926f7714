import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amodal_pursuit.errors import ClusteringError, DomainError, ShapeError
from amodal_pursuit.percept import (
    BBox,
    LayerSpec,
    PriorBox,
    TaskLosses,
    TaskSigmas,
    assemble_instances,
    assign_priors_to_layers,
    cluster_priors,
    d_change,
    focal_loss,
    focal_loss_grad,
    hybrid_loss,
    iou,
    kmeans,
    match_priors,
    miou,
    parse_layer_file,
    receptive_field,
    receptive_field_trace,
)
from oracles import central_difference, rect_iou, rect_mask

layers = st.lists(st.tuples(st.integers(1, 4), st.integers(1, 7)), max_size=6)


# receptive field

def test_rf_examples():
    assert receptive_field([]) == 1
    assert receptive_field([LayerSpec(1, 3)]) == 3
    stack = [LayerSpec(1, 3), LayerSpec(2, 3), LayerSpec(1, 3)]
    assert receptive_field_trace(stack) == [3, 7, 9]
    assert receptive_field(stack) == 9


@settings(max_examples=200, deadline=None)
@given(stack=layers, pos=st.integers(0, 5), which=st.sampled_from(["stride", "kernel"]))
def test_rf_monotone_in_every_parameter(stack, pos, which):
    if not stack:
        return
    pos %= len(stack)
    grown = list(stack)
    s, k = grown[pos]
    grown[pos] = (s + 1, k) if which == "stride" else (s, k + 1)
    base = receptive_field([LayerSpec(*p) for p in stack])
    bigger = receptive_field([LayerSpec(*p) for p in grown])
    assert bigger >= base


def test_layer_file_parse():
    text = "# comment\n1 3\n\n2 3  # pool\n1 3\n"
    assert receptive_field(parse_layer_file(text)) == 9
    with pytest.raises(ValueError):
        parse_layer_file("1 2 3")
    with pytest.raises(ValueError):
        LayerSpec(0, 3)


def test_prior_layer_assignment():
    rfs = [3, 7, 9, 40]
    out = assign_priors_to_layers(rfs, [PriorBox(1, 1.5), PriorBox(4, 2), PriorBox(30, 1)])
    assert out == [0, 2, None]


# d_change

GT = BBox(0, 0, 10, 10)


def test_d_change_examples():
    assert d_change(GT, GT) == 0.0
    assert abs(d_change(BBox(1, 0, 11, 10), GT) - math.sqrt(0.2)) < 1e-9
    assert abs(d_change(BBox(2, 0, 12, 10), GT) - math.sqrt(0.8)) < 1e-9
    assert abs(d_change(BBox(1, 0, 11, 10), GT) - 0.44721) < 1e-5
    assert abs(d_change(BBox(2, 0, 12, 10), GT) - 0.89443) < 1e-5


def test_d_change_literal_vs_normalized():
    prior, gt = BBox(2, 0, 12, 20), BBox(0, 0, 10, 20)
    # dx=2 on both x corners, width 10
    assert d_change(prior, gt) == pytest.approx(math.sqrt(2 * 4 / 10), abs=1e-12)
    assert d_change(prior, gt, normalized=True) == pytest.approx(math.sqrt(2 * (2 / 10) ** 2), abs=1e-12)


def test_d_change_degenerate_gt():
    with pytest.raises(DomainError):
        d_change(GT, BBox(0, 0, 0, 10))


boxes = st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 40), st.floats(0.5, 40)).map(
    lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200, deadline=None)
@given(a=boxes, b=boxes)
def test_d_change_nonnegative_and_zero_on_self(a, b):
    assert d_change(a, a) == 0.0
    assert d_change(a, b) >= 0.0


def test_match_priors_examples():
    r = match_priors([GT], [GT])
    assert r.best == {0: (0, 0.0)}
    r = match_priors([BBox(1, 0, 11, 10), BBox(2, 0, 12, 10)], [GT])
    assert r.best[0][0] == 0
    assert r.best[0][1] == pytest.approx(math.sqrt(0.2))
    assert 0 in r.positives and 1 not in r.positives
    assert match_priors([GT], []).best == {}


def test_match_ties_go_to_lowest_index():
    r = match_priors([BBox(1, 0, 11, 10), BBox(-1, 0, 9, 10)], [GT])
    assert r.best[0][0] == 0


# clustering

def test_cluster_identity_when_k_equals_n():
    rng = np.random.default_rng(0)
    dims = rng.choice(np.arange(1, 200), size=(21, 2), replace=False).astype(float)
    priors = cluster_priors(dims, k=21)
    got = sorted((p.width, p.height) for p in priors)
    assert got == sorted(map(tuple, dims))
    areas = [p.width * p.height for p in priors]
    assert areas == sorted(areas)


def test_cluster_two_groups():
    rng = np.random.default_rng(1)
    a = rng.normal((10, 20), 0.5, (50, 2))
    b = rng.normal((100, 200), 0.5, (50, 2))
    priors = cluster_priors(np.vstack([a, b]), k=2, seed=3)
    assert abs(priors[0].width - a[:, 0].mean()) < 1.0 and abs(priors[0].height - a[:, 1].mean()) < 1.0
    assert abs(priors[1].width - b[:, 0].mean()) < 1.0 and abs(priors[1].height - b[:, 1].mean()) < 1.0


def test_cluster_default_k_and_errors():
    rng = np.random.default_rng(2)
    assert len(cluster_priors(rng.uniform(1, 100, (60, 2)))) == 21
    with pytest.raises(ClusteringError):
        cluster_priors(rng.uniform(1, 100, (5, 2)), k=21)


@pytest.mark.parametrize("seed", range(10))
def test_kmeans_objective_never_increases(seed):
    pts = np.random.default_rng(seed).uniform(0, 100, (80, 2))
    res = kmeans(pts, 6, seed)
    assert all(a >= b - 1e-9 for a, b in zip(res.inertia, res.inertia[1:]))
    assert np.array_equal(res.labels, kmeans(pts, 6, seed).labels)


# hybrid loss

def test_hybrid_examples():
    assert hybrid_loss(TaskLosses(), TaskSigmas())[0] == 0.0
    assert abs(hybrid_loss(TaskLosses(L_sem=1.0), TaskSigmas())[0] - 1.0) < 1e-9
    # stationary point at sigma**2 = 2L
    _, g = hybrid_loss(TaskLosses(L_bbox=2.0), TaskSigmas(sigma_bbox=2.0))
    assert abs(g["sigma_bbox"]) < 1e-12


def test_hybrid_stationarity_numerically():
    L = 2.0

    def f(s):
        return hybrid_loss(TaskLosses(L_cls=L), TaskSigmas(sigma_cls=s))[0]
    assert abs(central_difference(f, math.sqrt(2 * L) ** 1, 1e-5)) < 1e-6
    grid = np.linspace(0.5, 5, 2001)
    assert abs(grid[np.argmin([f(s) for s in grid])] - 2.0) < 5e-3


def test_hybrid_rejects_nonpositive_sigma():
    with pytest.raises(DomainError):
        hybrid_loss(TaskLosses(), TaskSigmas(sigma_off=0.0))
    with pytest.raises(DomainError):
        TaskLosses(L_sem=-1.0)


def test_hybrid_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        L = rng.uniform(0, 5, 4)
        s = rng.uniform(0.3, 3, 4)
        _, g = hybrid_loss(TaskLosses(*L), TaskSigmas(*s))
        for i, name in enumerate(("sem", "off", "bbox", "cls")):
            def f(x, i=i):
                ss = s.copy()
                ss[i] = x
                return hybrid_loss(TaskLosses(*L), TaskSigmas(*ss))[0]
            fd = central_difference(f, s[i], 1e-5)
            an = g[f"sigma_{name}"]
            assert abs(an - fd) <= 1e-6 * max(1.0, abs(an))


# focal loss

def test_focal_examples():
    assert abs(focal_loss(0.5, gamma=0, alpha=1) - 0.693147) < 1e-6
    assert abs(focal_loss(0.5, gamma=0, alpha=1) - math.log(2)) < 1e-9
    assert focal_loss(1.0) == 0.0
    assert abs(focal_loss(0.9, gamma=2, alpha=1) - 0.00105361) < 1e-8
    assert abs(focal_loss(0.9, gamma=2, alpha=1) - 0.01 * math.log(1 / 0.9)) < 1e-9


def test_focal_defaults_and_domain():
    assert focal_loss(0.5) == pytest.approx(0.25 * 0.25 * math.log(2))
    with pytest.raises(DomainError):
        focal_loss(0.0)
    assert focal_loss(0.0, eps=1e-7) == pytest.approx(-0.25 * (1 - 1e-7) ** 2 * math.log(1e-7))


def test_focal_reduces_to_cross_entropy_on_grid():
    for p in np.linspace(1e-3, 1.0, 1000):
        assert abs(focal_loss(p, gamma=0, alpha=1) + math.log(p)) <= 1e-12


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 3.0])
def test_focal_gradient(gamma):
    for p in np.linspace(0.05, 0.95, 19):
        fd = central_difference(lambda x: focal_loss(x, gamma, 0.25), p, 1e-6)
        assert abs(focal_loss_grad(p, gamma, 0.25) - fd) < 1e-6


# instance assembly

def test_assembly_single_box():
    sem = np.zeros((20, 20), dtype=int)
    sem[5:15, 5:15] = 1
    ys, xs = np.mgrid[0:20, 0:20]
    off = np.stack([10 - xs, 10 - ys], axis=-1).astype(float)
    out = assemble_instances(sem, off, [(BBox(5, 5, 15, 15), 1, 0.9)])
    assert np.array_equal(out, sem)


def test_assembly_background_ignores_offsets():
    sem = np.zeros((8, 8), dtype=int)
    off = np.ones((8, 8, 2))
    out = assemble_instances(sem, off, [(BBox(0, 0, 4, 4), 1, 1.0)])
    assert not out.any()


def test_assembly_two_boxes_follow_vote_partition():
    h, w = 40, 80
    sem = np.ones((h, w), dtype=int)
    ys, xs = np.mgrid[0:h, 0:w]
    c1, c2 = (15.0, 20.0), (65.0, 20.0)  # centres 50 px apart
    rng = np.random.default_rng(0)
    votes_first = rng.random((h, w)) < 0.5
    tx = np.where(votes_first, c1[0], c2[0])
    ty = np.where(votes_first, c1[1], c2[1])
    off = np.stack([tx - xs, ty - ys], axis=-1)
    bxs = [(BBox(5, 10, 25, 30), 1, 0.9), (BBox(55, 10, 75, 30), 1, 0.8)]
    out = assemble_instances(sem, off, bxs)
    assert (out == 1).sum() == votes_first.sum()
    assert (out == 2).sum() == (~votes_first).sum()


def test_assembly_class_gating_and_ids():
    rng = np.random.default_rng(5)
    sem = rng.integers(0, 3, (30, 30))
    off = rng.normal(0, 5, (30, 30, 2))
    bxs = [(BBox(0, 0, 10, 10), 1, 0.5), (BBox(15, 15, 25, 25), 2, 0.5), (BBox(5, 20, 9, 29), 1, 0.5)]
    out = assemble_instances(sem, off, bxs)
    assert set(np.unique(out)) <= {0, 1, 2, 3}
    assert np.all((out == 2) <= (sem == 2))
    assert np.all(out[sem == 0] == 0)


def test_assembly_shape_mismatch():
    with pytest.raises(ShapeError):
        assemble_instances(np.zeros((4, 4)), np.zeros((4, 5, 2)), [])


# IoU

def test_miou_examples():
    a = rect_mask((20, 30), 0, 0, 10, 10)
    b = rect_mask((20, 30), 5, 0, 10, 10)
    assert miou([a], [a]) == 1.0
    assert miou([a], [rect_mask((20, 30), 15, 0, 10, 10)]) == 0.0
    assert miou([a], [b]) == 1 / 3
    assert iou(a, b) == rect_iou((0, 0, 10, 10), (5, 0, 10, 10))
    assert miou([np.zeros((3, 3))], [np.zeros((3, 3))]) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 10), st.integers(1, 10)),
       st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 10), st.integers(1, 10)))
def test_iou_matches_rectangle_arithmetic(a, b):
    ma, mb = rect_mask((32, 32), *a), rect_mask((32, 32), *b)
    assert iou(ma, mb) == pytest.approx(rect_iou(a, b), abs=1e-12)
    assert 0.0 <= iou(ma, mb) <= 1.0

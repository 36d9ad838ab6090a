import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aptnet.errors import SchemaError
from aptnet.geometry import (
    PointCloudSample,
    build_radius_graph,
    grid_interpolation_matrix,
    grid_pe,
    rescale_coords,
    sample_supernodes,
    sinusoidal_pe,
)
from aptnet.tensor import Tensor


def test_rescale_examples():
    c = np.array([[0.0, 0.0], [200.0, 200.0], [50.0, 120.0]])
    assert np.allclose(rescale_coords(c, 200.0), c)
    assert np.allclose(rescale_coords(np.array([[0.0], [1000.0]]), 200.0).ravel(), [0.0, 200.0])
    c = np.array([[10.0, 0.0], [60.0, 100.0], [20.0, 30.0]])
    out = rescale_coords(c, 200.0)
    assert np.allclose(out[:, 0], (c[:, 0] - 10.0) * 4)
    assert np.allclose(out[:, 1], c[:, 1] * 2)


def test_rescale_degenerate_axis_and_fixed_bounds():
    out = rescale_coords(np.array([[1.0, 5.0], [2.0, 5.0]]))
    assert np.allclose(out[:, 1], 100.0)
    out = rescale_coords(np.array([[0.5, 0.5]]), bounds=([0, 0], [1, 1]))
    assert np.allclose(out, 100.0)


def test_supernodes_all_points_when_budget_equals_cloud():
    pts = np.random.default_rng(1).uniform(size=(10, 2))
    s = sample_supernodes(pts, 10, "seeded-uniform")
    assert sorted(s.index.tolist()) == list(range(10))
    s = sample_supernodes(pts, 10, "farthest-point")
    assert sorted(s.index.tolist()) == list(range(10))


def test_anchor_always_included():
    pts = np.random.default_rng(2).uniform(size=(40, 2))
    well = np.array([[0.5, 0.5]])
    for strategy in ("seeded-uniform", "farthest-point"):
        s = sample_supernodes(pts, 8, strategy, anchors=well, seed=4)
        assert len(s) == 8
        assert np.allclose(s.coords[s.anchor_mask], well)
        assert s.anchor_mask.sum() == 1


def test_anchor_on_a_cloud_point_is_not_drawn_twice():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    s = sample_supernodes(pts, 4, anchors=pts[2:3])
    assert len(np.unique(s.coords, axis=0)) == 4
    assert s.index[0] == 2


def test_farthest_point_picks_opposite_corner():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    for seed in range(8):
        s = sample_supernodes(square, 2, "farthest-point", seed=seed)
        a, b = s.coords
        assert np.allclose(a + b, [1.0, 1.0])


def test_supernode_errors():
    pts = np.zeros((3, 2))
    with pytest.raises(ValueError):
        sample_supernodes(pts, 4)
    with pytest.raises(ValueError):
        sample_supernodes(np.eye(2), 1, anchors=np.ones((2, 2)))
    with pytest.raises(ValueError):
        sample_supernodes(np.eye(2), 2, strategy="random")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16), st.sampled_from(["seeded-uniform", "farthest-point"]))
def test_supernodes_ignore_storage_order(seed, strategy):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(30, 2))
    perm = rng.permutation(30)
    a = sample_supernodes(pts, 6, strategy, seed=seed)
    b = sample_supernodes(pts[perm], 6, strategy, seed=seed)
    assert np.array_equal(a.coords, b.coords)
    assert np.array_equal(perm[b.index], a.index)


def test_radius_graph_examples():
    line = np.array([[0.0], [1.0], [2.0]])
    g = build_radius_graph(line, [[1.0]], 1.0)
    assert sorted(g.member.tolist()) == [0, 1, 2]
    g = build_radius_graph(line, [[1.0]], 0.5)
    assert g.member.tolist() == [1]
    g = build_radius_graph(line, [[1.0], [50.0]], 1.0)
    assert g.empty.tolist() == [False, True]
    assert np.allclose(g.offset[:, 0], line[g.member, 0] - 1.0)


def test_radius_graph_caps_neighbors_deterministically():
    pts = np.random.default_rng(0).uniform(size=(50, 2))
    g1 = build_radius_graph(pts, [[0.5, 0.5]], 10.0, max_neighbors=7, seed=3)
    g2 = build_radius_graph(pts, [[0.5, 0.5]], 10.0, max_neighbors=7, seed=3)
    assert g1.n_edges == 7 and np.array_equal(g1.member, g2.member)
    with pytest.raises(ValueError):
        build_radius_graph(pts, [[0.5, 0.5]], 0.0)


def test_sinusoidal_examples():
    z = sinusoidal_pe(0.0, 8)
    assert np.all(z[0::2] == 0) and np.all(z[1::2] == 1)
    assert np.allclose(sinusoidal_pe(1.0, 4, 10000.0), [np.sin(1), np.cos(1), np.sin(1e-2), np.cos(1e-2)])
    with pytest.raises(ValueError):
        sinusoidal_pe(0.0, 3)


@given(st.floats(-1e6, 1e6))
def test_sinusoidal_bounded(v):
    assert np.max(np.abs(sinusoidal_pe(v, 16))) <= 1.0


def test_grid_pe_examples():
    table = np.random.default_rng(0).normal(size=(3, 3, 5))
    # vertex (1, 2) of a 3x3 grid over [0, 200]
    assert np.allclose(grid_pe(np.array([[100.0, 200.0]]), table).data[0], table[1, 2])
    t1 = np.random.default_rng(1).normal(size=(2, 4))
    assert np.allclose(grid_pe(np.array([[100.0]]), t1).data[0], t1.mean(axis=0))
    w = grid_interpolation_matrix(np.array([[0.25, 0.75]]), (2, 2), 1.0).toarray()[0]
    # corners in row-major order: (0,0), (0,1), (1,0), (1,1)
    assert np.allclose(w, [0.1875, 0.5625, 0.0625, 0.1875])


def test_grid_pe_gradient_reaches_corners():
    table = Tensor(np.zeros((2, 2, 1)), requires_grad=True)
    grid_pe(np.array([[50.0, 150.0]]), table).sum().backward()
    assert np.allclose(table.grad[..., 0], [[0.1875, 0.5625], [0.0625, 0.1875]])


def test_point_cloud_validation():
    ok = PointCloudSample(np.zeros((3, 2)), np.zeros((3, 1)), [0.1, 0.2], np.zeros((2, 3, 1)))
    assert (ok.dim, ok.d_a, ok.d_z, ok.n_times) == (2, 1, 1, 2)
    with pytest.raises(SchemaError):
        PointCloudSample(np.zeros((3, 2)), np.zeros((3, 1)), [0.2, 0.1], np.zeros((2, 3, 1)))
    with pytest.raises(SchemaError):
        PointCloudSample(np.zeros((3, 2)), np.zeros((4, 1)), [0.1], np.zeros((1, 3, 1)))
    ada = PointCloudSample([np.zeros((3, 2)), np.zeros((5, 2))], [np.zeros((3, 1)), np.zeros((5, 1))],
                           [0.1, 0.2], [np.zeros((3, 1)), np.zeros((5, 1))], mesh_mode="adaptive")
    assert ada.node_counts() == [3, 5]


def test_anchors_round_trip_through_metadata():
    s = PointCloudSample(np.zeros((1, 2)), np.zeros((1, 1)), [0.1], np.zeros((1, 1, 1)),
                         metadata={"anchors": "0.25,0.5;1.0,2.0"})
    assert np.array_equal(s.anchors, [[0.25, 0.5], [1.0, 2.0]])

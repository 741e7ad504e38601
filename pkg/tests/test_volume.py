import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from voxfit.errors import ConfigError, DataError, ShapeError
from voxfit.volume import (Mask, MeasuredData, NeighborGraph, ParamSet, Protocol,
                           grid_graph, mesh_graph, pack, unpack)


def brute_edges(inside, n_axes):
    idx = -np.ones(inside.shape, int)
    idx[inside] = np.arange(inside.sum())
    cells = list(zip(*np.nonzero(inside)))
    out = set()
    for a, b in itertools.combinations(cells, 2):
        diff = np.abs(np.subtract(a, b))
        if diff.sum() == 1 and np.argmax(diff) < n_axes:
            i, j = sorted((idx[a], idx[b]))
            out.add((i, j))
    return out


def edge_set(g):
    return {tuple(e) for e in g.edges.tolist()}


class TestPack:
    def test_full_mask_row_major(self):
        vol = np.array([[1.0, 2.0], [3.0, 4.0]])
        d = pack(vol, Mask.full((2, 2)))
        assert d.values[:, 0].tolist() == [1.0, 2.0, 3.0, 4.0]
        assert d.sample_origin.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]

    def test_single_cell(self):
        vol = np.array([[1.0, 2.0], [3.0, 4.0]])
        m = np.zeros((2, 2), bool)
        m[1, 0] = True
        d = pack(vol, Mask(m))
        assert d.values.shape == (1, 1)
        assert d.values[0, 0] == 3.0

    def test_checkerboard_roundtrip(self, rng):
        g = np.indices((3, 3, 3)).sum(axis=0) % 2 == 0
        vol = rng.standard_normal((3, 3, 3, 5))
        mask = Mask(g)
        d = pack(vol, mask)
        assert d.n_samples == g.sum() == 14
        back = unpack(d.values, mask)
        np.testing.assert_array_equal(back[g], vol[g])
        assert np.all(back[~g] == 0)

    def test_random_mask_is_mask_multiply(self, rng):
        m = rng.random((4, 4)) < 0.5
        m[0, 0] = True
        vol = rng.standard_normal((4, 4))
        out = unpack(pack(vol, Mask(m)).values[:, 0], Mask(m))
        np.testing.assert_array_equal(out, vol * m)

    def test_fill_value(self):
        m = np.array([True, False, True])
        out = unpack(np.array([5.0, 6.0]), Mask(m), fill=-1.0)
        assert out.tolist() == [5.0, -1.0, 6.0]

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            pack(np.zeros((3, 2)), Mask.full((2, 2)))

    def test_count_mismatch(self):
        with pytest.raises(ShapeError):
            unpack(np.zeros(3), Mask.full((2, 2)))

    @given(hnp.arrays(bool, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5)),
           st.floats(-10, 10))
    def test_roundtrip_property(self, inside, fill):
        if not inside.any():
            inside = inside.copy()
            inside.flat[0] = True
        vol = np.arange(inside.size, dtype=float).reshape(inside.shape) + 0.5
        mask = Mask(inside)
        out = unpack(pack(vol, mask).values[:, 0], mask, fill=fill)
        np.testing.assert_array_equal(out[inside], vol[inside])
        assert np.all(out[~inside] == fill)


class TestGridGraph:
    def test_row_of_three(self):
        g = grid_graph(Mask.full((1, 3)), "2d")
        assert edge_set(g) == {(0, 1), (1, 2)}

    def test_single_cell(self):
        m = np.zeros((3, 3), bool)
        m[1, 1] = True
        assert grid_graph(Mask(m)).n_edges == 0

    def test_three_by_three(self):
        assert grid_graph(Mask.full((3, 3)), "2d").n_edges == 12

    def test_2d_ignores_third_axis(self):
        assert grid_graph(Mask.full((2, 2, 2)), "2d").n_edges == 8
        assert grid_graph(Mask.full((2, 2, 2)), "3d").n_edges == 12

    def test_bad_connectivity(self):
        with pytest.raises(ConfigError):
            grid_graph(Mask.full((2, 2)), "diag")

    @given(hnp.arrays(bool, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5)),
           st.sampled_from(["2d", "3d"]))
    def test_matches_brute_force(self, inside, conn):
        if not inside.any():
            inside = inside.copy()
            inside.flat[-1] = True
        g = grid_graph(Mask(inside), conn)
        assert edge_set(g) == brute_edges(inside, 2 if conn == "2d" else 3)
        assert len(edge_set(g)) == g.n_edges
        assert np.all(g.edges[:, 0] < g.edges[:, 1])


def icosahedron_faces():
    # vertex 0 top, 1-5 upper ring, 6-10 lower ring, 11 bottom
    faces = []
    for i in range(5):
        a, b = 1 + i, 1 + (i + 1) % 5
        c, d = 6 + i, 6 + (i + 1) % 5
        faces += [(0, a, b), (11, c, d), (a, b, c), (b, d, c)]
    return faces


class TestMeshGraph:
    def test_triangle(self):
        assert edge_set(mesh_graph(3, faces=[(0, 1, 2)])) == {(0, 1), (0, 2), (1, 2)}

    def test_duplicate_faces(self):
        a = mesh_graph(4, faces=[(0, 1, 2), (2, 1, 0), (0, 1, 2)])
        assert edge_set(a) == {(0, 1), (0, 2), (1, 2)}

    def test_icosahedron(self):
        faces = icosahedron_faces()
        assert len(faces) == 20
        g = mesh_graph(12, faces=faces)
        # Euler: V - E + F = 2
        assert g.n_edges == 12 + 20 - 2 == 30
        assert np.all(g.degrees() == 5)

    def test_edges_input(self):
        g = mesh_graph(3, edges=[(2, 0), (0, 2), (1, 1)])
        assert edge_set(g) == {(0, 2)}

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            mesh_graph(3, faces=[(0, 1, 3)])


class TestTypes:
    def test_graph_rejects_self_loop_and_duplicates(self):
        with pytest.raises(ConfigError):
            NeighborGraph(3, [(1, 1)])
        with pytest.raises(ConfigError):
            NeighborGraph(3, [(0, 1), (0, 1)])
        with pytest.raises(IndexError):
            NeighborGraph(2, [(0, 2)])

    def test_mask_needs_a_cell(self):
        with pytest.raises(DataError):
            Mask(np.zeros((2, 2), bool))

    def test_weights_validation(self):
        with pytest.raises(DataError):
            MeasuredData(np.ones((2, 2)), weights=-np.ones((2, 2)))
        with pytest.raises(DataError):
            MeasuredData(np.array([[np.nan]]))
        with pytest.raises(ShapeError):
            MeasuredData(np.ones((2, 2)), weights=np.ones((3, 2)))
        d = MeasuredData(np.ones((2, 3)), weights=np.array([[1.0, 0.0, 2.0]]))
        assert d.n_active == 4
        assert MeasuredData(np.ones((2, 3)), weights=[]).weights is None

    def test_paramset_invariants(self):
        with pytest.raises(ConfigError):
            ParamSet(("a", "a"), {"a": [1.0]}, {"a": 0}, {"a": 2})
        with pytest.raises(ConfigError):
            ParamSet(("a",), {"a": [1.0]}, {"a": 2}, {"a": 2})
        with pytest.raises(DataError):
            ParamSet(("a",), {"a": [3.0]}, {"a": 0}, {"a": 2})
        with pytest.raises(ShapeError):
            ParamSet(("a", "b"), {"a": [1.0], "b": [1.0, 1.0]}, {"a": 0, "b": 0},
                     {"a": 2, "b": 2})
        p = ParamSet.clipped(("a",), {"a": [-1.0, 5.0]}, {"a": 0}, {"a": 2})
        assert p["a"].tolist() == [0.0, 2.0]

    def test_protocol_broadcast_check(self):
        p = Protocol({"TE_s": [1.0, 2.0, 3.0]})
        assert p["TE_s"].shape == (1, 3)
        assert p.n_meas == 3
        p.check(10, 3)
        with pytest.raises(ShapeError):
            p.check(10, 4)
        with pytest.raises(ConfigError):
            p["bval"]
        with pytest.raises(DataError):
            Protocol({"x": [np.inf]})

    def test_immutable(self):
        d = MeasuredData(np.ones((2, 2)))
        with pytest.raises(ValueError):
            d.values[0, 0] = 3.0

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cube_mesh
from crossmodal.errors import DegenerateError, FormatError, MeshIndexError, TruncationError
from crossmodal.mesh_io import (TriangleMesh, fit_to_view, mesh_centroid, parse_off, serialize_off)

TRI = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"


def test_single_triangle():
    m = parse_off(TRI.encode())
    assert m.n_faces == 1 and m.n_vertices == 3


def test_quad_is_fan_triangulated():
    m = parse_off(b"OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])


def test_counts_glued_to_header():
    m = parse_off(b"OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    assert m.n_faces == 1


def test_truncated_vertices():
    with pytest.raises(TruncationError):
        parse_off(b"OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")


def test_missing_header():
    with pytest.raises(FormatError):
        parse_off(b"3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")


def test_index_out_of_range():
    with pytest.raises(MeshIndexError):
        parse_off(b"OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n")


def test_writer_format_is_exact():
    m = TriangleMesh([[0, 0, 0], [1.5, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert serialize_off(m) == b"OFF\n3 1 0\n0.0 0.0 0.0\n1.5 0.0 0.0\n0.0 1.0 0.0\n3 0 1 2\n"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_round_trip(seed):
    rng = np.random.default_rng(seed)
    nv = int(rng.integers(3, 20))
    faces = np.stack([rng.choice(nv, 3, replace=False) for _ in range(int(rng.integers(1, 15)))])
    m = TriangleMesh(rng.standard_normal((nv, 3)) * 10 ** rng.uniform(-3, 3), faces)
    back = parse_off(serialize_off(m))
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)


class TestCentroid:
    def test_cube_symmetry(self):
        np.testing.assert_allclose(mesh_centroid(cube_mesh()), 0, atol=1e-15)

    def test_single_triangle(self):
        np.testing.assert_allclose(mesh_centroid(parse_off(TRI)), [1 / 3, 1 / 3, 0])

    def test_two_triangles_against_monte_carlo(self):
        v = [[0, 0, 0], [2, 0, 0], [0, 2, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1]]
        m = TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])
        # independent oracle: rejection-sample each triangle's bounding square uniformly
        rng = np.random.default_rng(0)
        pts = []
        for scale, z, share in ((2.0, 0.0, 0.8), (1.0, 1.0, 0.2)):
            uv = rng.random((int(400_000 * share), 2)) * scale
            uv = uv[uv.sum(1) <= scale]
            pts.append(np.column_stack([uv, np.full(len(uv), z)]))
        # rejection keeps half of each square, so shares stay proportional to area
        mc = np.concatenate(pts).mean(axis=0)
        np.testing.assert_allclose(mc, [0.6, 0.6, 0.2], atol=1e-2)
        np.testing.assert_allclose(mesh_centroid(m), mc, atol=1e-2)
        np.testing.assert_allclose(mesh_centroid(m), [0.6, 0.6, 0.2], atol=1e-12)

    def test_zero_area_faces_ignored(self):
        m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2], [3, 3, 3]])
        np.testing.assert_allclose(mesh_centroid(m), [1 / 3, 1 / 3, 0])

    def test_degenerate(self):
        m = TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
        with pytest.raises(DegenerateError):
            mesh_centroid(m)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_invariant_under_reordering(self, seed):
        rng = np.random.default_rng(seed)
        m = TriangleMesh(rng.standard_normal((12, 3)), np.stack([rng.choice(12, 3, replace=False) for _ in range(10)]))
        fperm = rng.permutation(m.n_faces)
        vperm = rng.permutation(m.n_vertices)
        inv = np.argsort(vperm)
        m2 = TriangleMesh(m.vertices[vperm], inv[m.faces[fperm]])
        np.testing.assert_allclose(mesh_centroid(m2), mesh_centroid(m), atol=1e-12)


class TestFitToView:
    def test_idempotent(self, sphere):
        once = fit_to_view(sphere)
        np.testing.assert_allclose(fit_to_view(once).vertices, once.vertices, atol=1e-12)

    def test_similarity_invariance(self, sphere):
        moved = sphere.with_vertices(sphere.vertices * 5 + 3)
        np.testing.assert_allclose(fit_to_view(moved).vertices, fit_to_view(sphere).vertices, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_unit_max_norm(self, seed):
        rng = np.random.default_rng(seed)
        m = TriangleMesh(rng.standard_normal((10, 3)) * 4 + 2, np.stack([rng.choice(10, 3, replace=False) for _ in range(8)]))
        r = np.linalg.norm(fit_to_view(m).vertices, axis=1).max()
        assert abs(r - 1) < 1e-9

    def test_coincident_vertices(self):
        m = TriangleMesh(np.ones((3, 3)), [[0, 1, 2]])
        with pytest.raises(DegenerateError):
            fit_to_view(m)

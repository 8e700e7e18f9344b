import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afem_ocp.mesh import (Mesh, MeshError, create_unit_square_mesh, element_angles, grading_norm,
                           mesh_size_function, prolongate, refine, refine_uniform,
                           shape_regularity, size_ratio_bounds)


def test_unit_square_counts():
    m = create_unit_square_mesh(3)
    assert m.n_vertices == 16 and m.n_elements == 18
    assert np.isclose(m.areas.sum(), 1.0)
    assert np.all(m.areas > 0)
    assert len(m.boundary_edges) == 12
    assert m.is_conforming()
    # refinement edge (v1, v2) is the hypotenuse
    c = m.coords
    hyp = np.linalg.norm(c[:, 2] - c[:, 1], axis=1)
    assert np.allclose(hyp, np.sqrt(2) / 3)


def test_unit_square_rejects_zero():
    with pytest.raises(ValueError):
        create_unit_square_mesh(0)


def test_edge_structures():
    m = create_unit_square_mesh(2)
    # Euler: V - E + F = 1 for a disc
    assert m.n_vertices - len(m.edges) + m.n_elements == 1
    assert len(m.interior_edges) == len(m.edges) - len(m.boundary_edges)
    for t in range(m.n_elements):
        for k, (i, j) in enumerate([(1, 2), (2, 0), (0, 1)]):
            e = m.edges[m.elem2edge[t, k]]
            assert set(e) == {m.elements[t, i], m.elements[t, j]}
    assert np.array_equal(m.free_vertices, [4])


def test_single_bisection():
    m = create_unit_square_mesh(1)
    fine, refined = refine(m, [0])
    # element 0 shares its refinement edge with element 1, so both split
    assert fine.n_elements == 4 and fine.n_vertices == 5
    assert np.array_equal(refined, [0, 1])
    assert np.allclose(fine.vertices[4], [0.5, 0.5])
    assert fine.is_conforming()
    assert np.array_equal(fine.parent, [0, 1, 0, 1])


def test_refine_empty_and_invalid():
    m = create_unit_square_mesh(2)
    same, refined = refine(m, [])
    assert same.n_elements == m.n_elements and refined.size == 0
    with pytest.raises(ValueError):
        refine(m, [m.n_elements])
    with pytest.raises(ValueError):
        refine(m, [0], r=0)


def test_uniform_refinement_halves_h():
    m = create_unit_square_mesh(2)
    fine = refine_uniform(m, 2)
    assert fine.n_elements == 4 * m.n_elements
    assert np.allclose(fine.h, m.h[0] / 2)
    assert fine.is_conforming()
    assert np.isclose(shape_regularity(fine), 45.0)


def test_non_matching_labels_still_close():
    # the second triangle's refinement edge is a boundary edge, not the shared diagonal
    v = [[0, 0], [1, 0], [1, 1], [0, 1]]
    elements = [[1, 2, 0], [2, 3, 0]]
    bad = Mesh(v, elements, [[0, 1], [1, 2], [2, 3], [3, 0]])
    assert bad.is_conforming()
    fine, refined = refine(bad, [0])
    assert fine.is_conforming()
    assert np.array_equal(refined, [0, 1])
    assert np.isclose(fine.areas.sum(), 1.0)


def test_labels_never_cycle_on_long_runs(rng):
    m = create_unit_square_mesh(2)
    for _ in range(60):
        marked = rng.choice(m.n_elements, size=min(3, m.n_elements), replace=False)
        m, _ = refine(m, marked)
    assert m.is_conforming()
    assert shape_regularity(m) >= 45.0 - 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(0, 10_000), min_size=1, max_size=6), min_size=1, max_size=6),
       st.integers(1, 3))
def test_random_refinement_invariants(seq, r):
    m = create_unit_square_mesh(2)
    for picks in seq:
        marked = np.array(picks) % m.n_elements
        fine, refined = refine(m, marked, r)
        assert fine.is_conforming()
        assert np.isclose(fine.areas.sum(), 1.0)
        assert set(np.unique(marked)) <= set(refined)
        # area shrinks by exactly 2 per bisection
        dg = fine.generation - m.generation[fine.parent]
        assert np.array_equal(fine.areas * 2.0 ** dg, m.areas[fine.parent])
        # marked elements are bisected at least r times
        is_marked = np.isin(fine.parent, marked)
        assert np.all(dg[is_marked] >= r)
        assert shape_regularity(fine) >= 45.0 - 1e-9
        m = fine


def test_prolongate_exact_for_linear(graded_mesh):
    f = lambda x, y: 1.0 + 2.0 * x - 3.0 * y
    m = graded_mesh
    vals = f(*m.vertices.T)
    fine, _ = refine(m, np.arange(0, m.n_elements, 3), r=3)
    assert np.allclose(prolongate(fine, vals), f(*fine.vertices.T))


def test_mesh_size_function(graded_mesh):
    h = mesh_size_function(graded_mesh)
    assert h.shape == (graded_mesh.n_vertices,)
    assert h.min() >= graded_mesh.h.min() and h.max() <= graded_mesh.h.max()
    lo, hi = size_ratio_bounds(graded_mesh)
    assert 0 < lo <= 1 <= hi
    assert grading_norm(create_unit_square_mesh(4)) == pytest.approx(0.0, abs=1e-12)
    assert grading_norm(graded_mesh) > 0


def test_angles_sum():
    m = create_unit_square_mesh(3)
    assert np.allclose(element_angles(m).sum(axis=1), 180.0)


def test_arrays_read_only():
    m = create_unit_square_mesh(2)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0


def test_mesh_error_type():
    assert issubclass(MeshError, RuntimeError)

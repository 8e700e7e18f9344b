"""Conforming triangle meshes with newest-vertex bisection.

Element convention: ``elements[t] = (v0, v1, v2)`` is counter-clockwise and the
refinement edge is ``(v1, v2)``, opposite the newest vertex ``v0``.  Bisection
puts the midpoint ``m`` on the refinement edge and produces the children
``(m, v0, v1)`` (left) and ``(m, v2, v0)`` (right).  The left child keeps the
parent's id, the right child is appended.
"""
import logging
from functools import cached_property

import numpy as np

logger = logging.getLogger(__name__)

# local edges, refinement edge first
LOCAL_EDGES = np.array([(1, 2), (2, 0), (0, 1)])


class MeshError(RuntimeError):
    pass


class Mesh:
    """Triangulation with NVB labels, boundary edges and refinement provenance.

    Attributes
    ----------
    vertices : (nv, 2) float array
    elements : (nt, 3) int array, refinement edge is local edge (1, 2)
    boundary_edges : (nb, 2) int array
    generation : (nt,) number of bisections since the initial mesh
    parent : (nt,) id of the ancestor in the previous mesh, or None
    vertex_parents : (nv, 2) endpoints of the bisected edge for new vertices,
        ``(-1, -1)`` for vertices inherited from the previous mesh, or None
    """

    def __init__(self, vertices, elements, boundary_edges, generation=None,
                 parent=None, vertex_parents=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(boundary_edges, dtype=np.int64).reshape(-1, 2)
        if generation is None:
            generation = np.zeros(len(self.elements), dtype=np.int64)
        self.generation = np.asarray(generation, dtype=np.int64)
        self.parent = parent
        self.vertex_parents = vertex_parents
        for arr in (self.vertices, self.elements, self.boundary_edges, self.generation):
            arr.flags.writeable = False

    def __repr__(self):
        return f"Mesh(n_vertices={self.n_vertices}, n_elements={self.n_elements})"

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    @cached_property
    def coords(self):
        """Element vertex coordinates, shape ``(nt, 3, 2)``."""
        return self.vertices[self.elements]

    @cached_property
    def areas(self):
        c = self.coords
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def h(self):
        """Element size ``|T|^(1/2)``."""
        return np.sqrt(self.areas)

    @cached_property
    def grad_lambda(self):
        """Gradients of the barycentric coordinates, shape ``(nt, 3, 2)``."""
        c = self.coords
        g = np.empty_like(c)
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            e = c[:, k] - c[:, j]
            # rotate the opposite edge inward
            g[:, i, 0] = -e[:, 1]
            g[:, i, 1] = e[:, 0]
        return g / (2.0 * self.areas)[:, None, None]

    @cached_property
    def _edge_data(self):
        nv = self.n_vertices
        loc = self.elements[:, LOCAL_EDGES]  # (nt, 3, 2)
        a = np.minimum(loc[..., 0], loc[..., 1]).ravel()
        b = np.maximum(loc[..., 0], loc[..., 1]).ravel()
        keys, first, inverse = np.unique(a * nv + b, return_index=True, return_inverse=True)
        edges = np.stack([keys // nv, keys % nv], axis=1)
        elem2edge = inverse.reshape(-1, 3)
        ne = len(keys)
        edge2elem = -np.ones((ne, 2), dtype=np.int64)
        edge2local = -np.ones((ne, 2), dtype=np.int64)
        idx = np.arange(3 * self.n_elements)
        edge2elem[inverse, 0] = idx // 3
        edge2local[inverse, 0] = idx % 3
        last = np.empty(ne, dtype=np.int64)
        last[inverse] = idx  # last writer wins
        second = last != first
        edge2elem[second, 0] = first[second] // 3
        edge2local[second, 0] = first[second] % 3
        edge2elem[second, 1] = last[second] // 3
        edge2local[second, 1] = last[second] % 3
        counts = np.bincount(inverse, minlength=ne)
        return edges, elem2edge, edge2elem, edge2local, counts

    @property
    def edges(self):
        return self._edge_data[0]

    @property
    def elem2edge(self):
        return self._edge_data[1]

    @property
    def edge2elem(self):
        """``(ne, 2)`` incident elements; second column is -1 on the boundary."""
        return self._edge_data[2]

    @property
    def edge2local(self):
        return self._edge_data[3]

    @cached_property
    def interior_edges(self):
        return np.flatnonzero(self.edge2elem[:, 1] >= 0)

    @cached_property
    def boundary_vertices(self):
        return np.unique(self.boundary_edges)

    @cached_property
    def free_vertices(self):
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary_vertices] = False
        return np.flatnonzero(mask)

    def is_conforming(self):
        """Edge-incidence audit: no hanging nodes and every element positively oriented."""
        if np.any(self.areas <= 0):
            return False
        counts = self._edge_data[4]
        if np.any(counts > 2):
            return False
        nv = self.n_vertices
        single = self.edges[counts == 1]
        b = np.sort(self.boundary_edges, axis=1)
        return np.array_equal(np.sort(single[:, 0] * nv + single[:, 1]),
                              np.sort(b[:, 0] * nv + b[:, 1]))


def create_unit_square_mesh(n):
    """Uniform mesh of ``(0, 1)^2`` with ``2 n^2`` right triangles.

    Every cell is cut along its anti-diagonal; the hypotenuse is the
    refinement edge, so the two triangles in a cell share it and the labeling
    is compatible.
    """
    n = int(n)
    if n < 1:
        raise ValueError(f"need at least one subdivision per side, got {n}")
    t = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(t, t, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    I, J = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    I, J = I.ravel(), J.ravel()
    lower = np.column_stack([vid(I, J), vid(I + 1, J), vid(I, J + 1)])
    upper = np.column_stack([vid(I + 1, J + 1), vid(I, J + 1), vid(I + 1, J)])
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper

    k = np.arange(n)
    bnd = np.concatenate([
        np.column_stack([vid(k, 0), vid(k + 1, 0)]),
        np.column_stack([vid(n, k), vid(n, k + 1)]),
        np.column_stack([vid(k + 1, n), vid(k, n)]),
        np.column_stack([vid(0, k + 1), vid(0, k)]),
    ])
    return Mesh(vertices, elements, bnd)


def _bisect_once(mesh, marked):
    """One NVB pass: bisect `marked` once each and close the mesh conformingly."""
    vertices = mesh.vertices
    elements = mesh.elements.copy()
    nv, nt = mesh.n_vertices, mesh.n_elements
    edges, elem2edge = mesh.edges, mesh.elem2edge
    ne = len(edges)

    cut = np.zeros(ne, dtype=bool)
    cut[elem2edge[marked, 0]] = True
    guard = 100 * max(nt, 1)
    while True:
        need = cut[elem2edge].any(axis=1) & ~cut[elem2edge[:, 0]]
        if not need.any():
            break
        cut[elem2edge[need, 0]] = True
        guard -= int(need.sum())
        if guard < 0:
            raise MeshError("closure did not terminate; refinement edge labels are incompatible")

    cut_ids = np.flatnonzero(cut)
    edge2new = -np.ones(ne, dtype=np.int64)
    edge2new[cut_ids] = nv + np.arange(len(cut_ids))
    new_vertices = 0.5 * (vertices[edges[cut_ids, 0]] + vertices[edges[cut_ids, 1]])
    vertex_parents = -np.ones((nv + len(cut_ids), 2), dtype=np.int64)
    vertex_parents[nv:] = edges[cut_ids]
    vertices = np.vstack([vertices, new_vertices])

    generation = mesh.generation.copy()
    ancestor = np.arange(nt)
    refedge = elem2edge[:, 0].copy()
    e2n = np.append(edge2new, -1)  # index ne stands for "edge created in this pass"
    refined = np.zeros(nt, dtype=bool)
    for pass_ in range(2):
        idx = np.flatnonzero(e2n[refedge] >= 0)
        if idx.size == 0:
            break
        if pass_ == 0:
            refined[idx] = True
            ref_left, ref_right = elem2edge[idx, 2], elem2edge[idx, 1]
        else:
            ref_left = ref_right = np.full(idx.size, ne)
        m = e2n[refedge[idx]]
        v0, v1, v2 = elements[idx, 0], elements[idx, 1], elements[idx, 2]
        elements[idx] = np.column_stack([m, v0, v1])
        elements = np.vstack([elements, np.column_stack([m, v2, v0])])
        generation[idx] += 1
        generation = np.concatenate([generation, generation[idx]])
        ancestor = np.concatenate([ancestor, ancestor[idx]])
        refedge[idx] = ref_left
        refedge = np.concatenate([refedge, ref_right])

    # boundary edges
    bnd = mesh.boundary_edges
    nv_ = mesh.n_vertices
    a = np.minimum(bnd[:, 0], bnd[:, 1])
    b = np.maximum(bnd[:, 0], bnd[:, 1])
    eid = np.searchsorted(edges[:, 0] * nv_ + edges[:, 1], a * nv_ + b)
    mid = edge2new[eid]
    split = mid >= 0
    new_bnd = np.concatenate([
        bnd[~split],
        np.column_stack([bnd[split, 0], mid[split]]),
        np.column_stack([mid[split], bnd[split, 1]]),
    ])

    child = Mesh(vertices, elements, new_bnd, generation,
                 parent=ancestor, vertex_parents=vertex_parents)
    return child, refined


def refine(mesh, marked, r=1):
    """Bisect every marked element `r` times with conforming closure.

    Returns the refined mesh and the sorted ids of elements of `mesh` that
    were split (marked ones plus those refined by closure).  The new mesh
    carries ``parent`` (element ancestry into `mesh`) and ``vertex_parents``.
    """
    if r < 1:
        raise ValueError("r must be at least 1")
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    if marked.size and (marked[0] < 0 or marked[-1] >= mesh.n_elements):
        raise ValueError("marked element id out of range")
    if marked.size == 0:
        same = Mesh(mesh.vertices, mesh.elements, mesh.boundary_edges, mesh.generation,
                    parent=np.arange(mesh.n_elements),
                    vertex_parents=-np.ones((mesh.n_vertices, 2), dtype=np.int64))
        return same, marked

    nv0, nt0 = mesh.n_vertices, mesh.n_elements
    ancestor = np.arange(nt0)
    vparents = -np.ones((nv0, 2), dtype=np.int64)
    refined = np.zeros(nt0, dtype=bool)
    is_marked = np.zeros(nt0, dtype=bool)
    is_marked[marked] = True
    current = mesh
    todo = marked
    for _ in range(r):
        current, split = _bisect_once(current, todo)
        refined[ancestor[split]] = True
        ancestor = ancestor[current.parent]
        step_vp = current.vertex_parents
        vparents = np.vstack([vparents, step_vp[len(vparents):]])
        todo = np.flatnonzero(is_marked[ancestor])
    out = Mesh(current.vertices, current.elements, current.boundary_edges,
               current.generation, parent=ancestor, vertex_parents=vparents)
    return out, np.flatnonzero(refined)


def refine_uniform(mesh, r=2):
    """Bisect every element `r` times; ``r=2`` halves all element diameters."""
    return refine(mesh, np.arange(mesh.n_elements), r)[0]


def prolongate(fine, values):
    """Inject a P1 field from the parent mesh into `fine` (exact for nested spaces)."""
    vp = fine.vertex_parents
    out = np.empty(fine.n_vertices)
    n_old = len(values)
    out[:n_old] = values
    # with r > 1 a new vertex may sit on an edge created earlier in the same call
    pending = np.arange(n_old, fine.n_vertices)
    while pending.size:
        ready = ~(np.isin(vp[pending, 0], pending) | np.isin(vp[pending, 1], pending))
        idx = pending[ready]
        out[idx] = 0.5 * (out[vp[idx, 0]] + out[vp[idx, 1]])
        pending = pending[~ready]
    return out


def mesh_size_function(mesh):
    """Nodal field: mean of ``|T|^(1/2)`` over the elements touching each vertex."""
    nv = mesh.n_vertices
    flat = mesh.elements.ravel()
    sums = np.bincount(flat, weights=np.repeat(mesh.h, 3), minlength=nv)
    counts = np.bincount(flat, minlength=nv)
    return sums / np.maximum(counts, 1)


def grading_norm(mesh, hfield=None):
    """``max_T |grad h_T|`` of the piecewise linear mesh-size function."""
    if hfield is None:
        hfield = mesh_size_function(mesh)
    g = np.einsum("ti,tik->tk", hfield[mesh.elements], mesh.grad_lambda)
    return float(np.max(np.hypot(g[:, 0], g[:, 1]))) if mesh.n_elements else 0.0


def size_ratio_bounds(mesh, hfield=None):
    """Empirical ``(min, max)`` of ``h_field|_T / h_T`` over vertices of each element."""
    if hfield is None:
        hfield = mesh_size_function(mesh)
    ratio = hfield[mesh.elements] / mesh.h[:, None]
    return float(ratio.min()), float(ratio.max())


def element_angles(mesh):
    """Interior angles in degrees, shape ``(nt, 3)``."""
    c = mesh.coords
    out = np.empty((mesh.n_elements, 3))
    for i in range(3):
        u = c[:, (i + 1) % 3] - c[:, i]
        v = c[:, (i + 2) % 3] - c[:, i]
        cosang = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        out[:, i] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return out


def shape_regularity(mesh):
    """Smallest interior angle of the mesh in degrees."""
    return float(element_angles(mesh).min())

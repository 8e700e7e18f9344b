"""Output and comparison helpers used by the command line: VTK, active sets, tables."""
import csv
import logging
import math

import numpy as np

from . import fem
from .control import clamp_control
from .mesh import create_unit_square_mesh

logger = logging.getLogger(__name__)


# --- VTK --------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def write_vtk(path, mesh, point_data=None, cell_data=None, title="afem-ocp"):
    """Legacy ASCII unstructured grid with triangle cells (VTK type 5)."""
    nv, nt = mesh.n_vertices, mesh.n_elements
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {nv} double"]
    lines += [f"{_fmt(x)} {_fmt(y)} 0.0" for x, y in mesh.vertices]
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.elements]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt

    def block(kind, n, data):
        if not data:
            return
        lines.append(f"{kind} {n}")
        for name, values in data.items():
            values = np.asarray(values)
            if len(values) != n:
                raise ValueError(f"{name}: expected {n} values, got {len(values)}")
            is_int = np.issubdtype(values.dtype, np.integer)
            lines.append(f"SCALARS {name} {'int' if is_int else 'double'} 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(str(int(v)) if is_int else _fmt(v) for v in values)

    block("CELL_DATA", nt, cell_data)
    block("POINT_DATA", nv, point_data)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_snapshot(path, mesh, sol=None, indicators=None):
    cell = {"generation": mesh.generation}
    point = {}
    if indicators is not None:
        cell["eta2"] = indicators.eta2
        cell["eta2_y"] = indicators.eta_y2
        cell["eta2_p"] = indicators.eta_p2
    if sol is not None:
        point["y"] = sol.y
        point["p"] = sol.p
        # the control is not a nodal field; this is a vertex sample for display
        point["u_vertex_sample"] = clamp_control(sol.p, sol.spec)
    write_vtk(path, mesh, point, cell)


# --- active sets ------------------------------------------------------------

def level_set_segments(mesh, values, level):
    """Segments of ``{v = level}`` for the P1 field with nodal `values`.

    Only elements where the field strictly crosses `level` contribute; each
    gives one straight segment with endpoints on its edges.
    """
    v = values[mesh.elements] - level
    c = mesh.coords
    segs = []
    for i in range(3):
        j = (i + 1) % 3
        cross = (v[:, i] * v[:, j] < 0) | ((v[:, i] == 0) & (v[:, j] != 0))
        segs.append(cross)
    cross = np.stack(segs, axis=1)
    ids = np.flatnonzero(cross.sum(axis=1) == 2)
    out = np.zeros((ids.size, 4))
    for n, t in enumerate(ids):
        pts = []
        for i in range(3):
            if cross[t, i]:
                j = (i + 1) % 3
                s = v[t, i] / (v[t, i] - v[t, j])
                pts.append(c[t, i] + s * (c[t, j] - c[t, i]))
        out[n] = np.concatenate(pts[:2])
    return out


def _element_set_boundary(mesh, inside):
    """Edges separating elements in `inside` from the rest (domain boundary excluded)."""
    ids = mesh.interior_edges
    t = mesh.edge2elem[ids]
    sep = ids[inside[t[:, 0]] != inside[t[:, 1]]]
    e = mesh.edges[sep]
    return np.hstack([mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]])


def active_set_boundaries(mesh, p, spec):
    """Active-set borders of the variational control and of its nodal interpolant.

    The variational borders are the straight lines ``-p/alpha = a`` and
    ``-p/alpha = b`` inside each element.  The comparison control is the
    nodal interpolant of the clamped values, a post-processing stand-in for a
    full control discretization; its active set is a union of whole elements.
    """
    z = -p / spec.alpha
    uz = clamp_control(p, spec)[mesh.elements]
    return {
        "variational": {"lower": level_set_segments(mesh, z, spec.a),
                        "upper": level_set_segments(mesh, z, spec.b)},
        "full": {"lower": _element_set_boundary(mesh, np.all(uz == spec.a, axis=1)),
                 "upper": _element_set_boundary(mesh, np.all(uz == spec.b, axis=1))},
    }


def emit_activeset(path, mesh, sol, spec):
    """Write both active-set borders as a segment CSV (``kind,bound,x0,y0,x1,y1``)."""
    bnd = active_set_boundaries(mesh, sol.p, spec)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "bound", "x0", "y0", "x1", "y1"])
        for kind in ("variational", "full"):
            for bound in ("lower", "upper"):
                for seg in bnd[kind][bound]:
                    w.writerow([kind, bound] + [repr(float(s)) for s in seg])
    return bnd


# --- comparisons ------------------------------------------------------------

def _quantity(hist):
    err = hist.column("err")
    if np.all(np.isfinite(err)) and len(err):
        return "err", err
    return "eta", hist.column("eta")


def compare(histories, labels=None, reference=-1):
    """Merge histories into rows aligned with the reference history by DOF count.

    Each row carries the value of the combined error (or of eta when exact
    errors are missing) and its ratio to the reference value at the nearest
    DOF count on a log scale.
    """
    if len(histories) < 2:
        raise ValueError("need at least two histories")
    labels = labels or [h.label or f"run{i}" for i, h in enumerate(histories)]
    ref = histories[reference]
    qname, qref = _quantity(ref)
    if qname == "err" and not all(_quantity(h)[0] == "err" for h in histories):
        qname, qref = "eta", ref.column("eta")
    Nref = ref.column("n_dof")
    rows = []
    for label, hist in zip(labels, histories):
        N = hist.column("n_dof")
        q = hist.column(qname)
        for rec, n, v in zip(hist.records, N, q):
            j = int(np.argmin(np.abs(np.log(Nref) - np.log(n))))
            rows.append({"label": label, "k": rec.k, "n_dof": int(n), "quantity": qname,
                         "value": float(v), "ref_n_dof": int(Nref[j]),
                         "ref_value": float(qref[j]), "efficiency": float(v / qref[j])})
    return rows


def format_table(rows, columns):
    widths = {c: max(len(c), *(len(_cell(r[c])) for r in rows)) if rows else len(c) for c in columns}
    out = ["  ".join(c.rjust(widths[c]) for c in columns)]
    for r in rows:
        out.append("  ".join(_cell(r[c]).rjust(widths[c]) for c in columns))
    return "\n".join(out)


def _cell(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if isinstance(v, float):
        return f"{v:.4e}"
    return str(v)


# --- Poisson oracle ---------------------------------------------------------

def solve_poisson(mesh, problem, quad_order=fem.DEFAULT_QUAD_ORDER):
    K = fem.assemble_operator(mesh, problem.coeff, quad_order)
    b = fem.assemble_load(mesh, problem.f, quad_order)
    system = fem.apply_dirichlet(fem.SparseSystem(K, b), mesh, problem.boundary)
    return fem.solve_spd(system)


def poisson_convergence(problem, sizes=(8, 16, 32, 64), quad_order=fem.DEFAULT_QUAD_ORDER):
    """L2 errors and rates with respect to h on uniform meshes of the unit square."""
    rows = []
    for n in sizes:
        mesh = create_unit_square_mesh(n)
        y = solve_poisson(mesh, problem, quad_order)
        err = fem.l2_norm_diff(mesh, y, problem.exact, 8)
        rate = None
        if rows:
            rate = math.log(rows[-1]["err"] / err) / math.log(n / rows[-1]["n"])
        rows.append({"n": n, "n_dof": mesh.n_vertices, "err": err, "eoc_h": rate})
    return rows

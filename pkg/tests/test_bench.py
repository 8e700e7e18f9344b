import hashlib

import numpy as np
import pytest

from afem_ocp import bench
from afem_ocp.adapt import AdaptOptions, afem_loop
from afem_ocp.control import solve_ocp
from afem_ocp.mesh import Mesh, create_unit_square_mesh
from afem_ocp.problems import ProblemSpec, example1

# frozen from `afem-ocp run --problem example1 --refine uniform --n0 2 --max-iters 2 --emit vtk`
SNAPSHOT0_SHA256 = "936d23af29929d187e24516d29b202217457868436a7c6472403a37d47ca9f4c"


def parse_vtk(path):
    lines = path.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2] == "ASCII" and lines[3] == "DATASET UNSTRUCTURED_GRID"
    i = 4
    npts = int(lines[i].split()[1])
    pts = np.array([list(map(float, l.split())) for l in lines[i + 1:i + 1 + npts]])
    i += 1 + npts
    kind, ncells, size = lines[i].split()
    assert kind == "CELLS" and int(size) == 4 * int(ncells)
    cells = np.array([list(map(int, l.split())) for l in lines[i + 1:i + 1 + int(ncells)]])
    i += 1 + int(ncells)
    assert lines[i] == f"CELL_TYPES {ncells}"
    types = set(lines[i + 1:i + 1 + int(ncells)])
    return pts, cells, types, lines


def test_snapshot_checksum(tmp_path):
    hist = afem_loop(example1(), AdaptOptions(uniform=True, n0=2, max_iters=1))
    path = tmp_path / "s.vtk"
    bench.write_snapshot(path, hist.mesh, hist.solution, hist.indicators)
    assert hashlib.sha256(path.read_bytes()).hexdigest() == SNAPSHOT0_SHA256
    pts, cells, types, lines = parse_vtk(path)
    assert types == {"5"} and np.all(cells[:, 0] == 3)
    assert pts.shape == (9, 3) and cells.max() < 9
    for name in ("generation", "eta2", "eta2_y", "eta2_p", "y", "p", "u_vertex_sample"):
        assert any(l.startswith(f"SCALARS {name} ") for l in lines)


def test_vtk_length_mismatch(tmp_path):
    m = create_unit_square_mesh(1)
    with pytest.raises(ValueError):
        bench.write_vtk(tmp_path / "x.vtk", m, point_data={"v": np.zeros(3)})


def test_level_set_single_element():
    m = Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]])
    z = np.array([0.0, 2.0, 4.0])
    seg = bench.level_set_segments(m, z, 1.0)
    assert seg.shape == (1, 4)
    ends = {tuple(np.round(seg[0, :2], 12)), tuple(np.round(seg[0, 2:], 12))}
    # z = 2x + 4y: the line z = 1 meets edge (0,1) at x = 1/2 and edge (2,0) at y = 1/4
    assert ends == {(0.5, 0.0), (0.0, 0.25)}


def test_no_active_set_gives_empty_boundaries(tmp_path):
    mesh = create_unit_square_mesh(4)
    spec = ProblemSpec(f=0.0, y_d=0.0, alpha=1.0, a=-1.0, b=1.0)
    sol = solve_ocp(mesh, spec)
    bnd = bench.emit_activeset(tmp_path / "a.csv", mesh, sol, spec)
    assert all(len(bnd[k][b]) == 0 for k in bnd for b in bnd[k])
    assert (tmp_path / "a.csv").read_text() == "kind,bound,x0,y0,x1,y1\n"


def test_example1_active_set_overlay():
    hist = afem_loop(example1(), AdaptOptions(theta=0.3, max_iters=40))
    mesh, sol, spec = hist.mesh, hist.solution, example1()
    bnd = bench.active_set_boundaries(mesh, sol.p, spec)
    var = np.vstack([bnd["variational"]["lower"], bnd["variational"]["upper"]])
    full = np.vstack([bnd["full"]["lower"], bnd["full"]["upper"]])
    assert len(var) and len(full)
    # variational borders pass through element interiors, not only along edges
    verts = {tuple(v) for v in np.round(mesh.vertices, 12)}
    var_pts = {tuple(p) for p in np.round(var.reshape(-1, 2), 12)}
    assert len(var_pts - verts) > 0
    # the comparison borders run along mesh edges
    full_pts = {tuple(p) for p in np.round(full.reshape(-1, 2), 12)}
    assert full_pts <= verts


def test_compare_identical_histories():
    hist = afem_loop(example1(), AdaptOptions(theta=0.5, max_iters=4))
    rows = bench.compare([hist, hist], ["a", "b"])
    assert all(r["efficiency"] == 1.0 for r in rows)
    with pytest.raises(ValueError):
        bench.compare([hist])


def test_format_table():
    out = bench.format_table([{"a": 1, "b": 0.5, "c": None}], ["a", "b", "c"])
    assert out.splitlines()[1].split() == ["1", "5.0000e-01", "-"]

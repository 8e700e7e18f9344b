"""Discrete optimal control with variational control discretization.

The control is never a finite element function: it is the pointwise
projection ``u_T(x) = clip(-p_T(x) / alpha, a, b)`` of the piecewise linear
adjoint.  Integrals involving ``u_T`` are computed on the sub-triangles cut out
by the straight lines ``-p_T / alpha = a`` and ``-p_T / alpha = b``.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import ReducedSolver, SolverError, evaluate
from .quadrature import triangle_rule

logger = logging.getLogger(__name__)

CLIP_AREA_TOL = 1e-14


def clamp_control(p_value, spec):
    """``max(a, min(b, -p / alpha))``."""
    return np.maximum(spec.a, np.minimum(spec.b, -np.asarray(p_value, dtype=float) / spec.alpha))


# --- clipping ---------------------------------------------------------------

def _det3(B):
    return (B[:, 0, 0] * (B[:, 1, 1] * B[:, 2, 2] - B[:, 1, 2] * B[:, 2, 1])
            - B[:, 0, 1] * (B[:, 1, 0] * B[:, 2, 2] - B[:, 1, 2] * B[:, 2, 0])
            + B[:, 0, 2] * (B[:, 1, 0] * B[:, 2, 1] - B[:, 1, 1] * B[:, 2, 0]))


def _clip_above(B, Z, parent, c):
    """Part of each sub-triangle where the linear function with vertex values `Z` exceeds `c`.

    `B` holds the vertices in barycentric coordinates of the parent element,
    shape ``(m, 3, 3)``.  Orientation is preserved.
    """
    above = Z > c
    k = above.sum(axis=1)
    outB = [B[k == 3]]
    outZ = [Z[k == 3]]
    outP = [parent[k == 3]]
    rows = np.arange(len(B))

    for count in (1, 2):
        sel = rows[k == count]
        if sel.size == 0:
            continue
        # index of the lone vertex (the single one above, or the single one below)
        lone = np.argmax(above[sel] if count == 1 else ~above[sel], axis=1)
        j0, j1, j2 = lone, (lone + 1) % 3, (lone + 2) % 3
        Bs, Zs = B[sel], Z[sel]
        r = np.arange(sel.size)
        z0, z1, z2 = Zs[r, j0], Zs[r, j1], Zs[r, j2]
        b0, b1, b2 = Bs[r, j0], Bs[r, j1], Bs[r, j2]
        t1 = ((c - z0) / (z1 - z0))[:, None]
        t2 = ((c - z0) / (z2 - z0))[:, None]
        P1 = b0 + t1 * (b1 - b0)
        P2 = b0 + t2 * (b2 - b0)
        cc = np.full(sel.size, float(c))
        if count == 1:
            outB.append(np.stack([b0, P1, P2], axis=1))
            outZ.append(np.stack([z0, cc, cc], axis=1))
            outP.append(parent[sel])
        else:
            outB.append(np.stack([P1, b1, b2], axis=1))
            outZ.append(np.stack([cc, z1, z2], axis=1))
            outB.append(np.stack([P1, b2, P2], axis=1))
            outZ.append(np.stack([cc, z2, cc], axis=1))
            outP.extend([parent[sel], parent[sel]])
    B = np.concatenate(outB)
    Z = np.concatenate(outZ)
    P = np.concatenate(outP)
    keep = np.abs(_det3(B)) >= CLIP_AREA_TOL
    return B[keep], Z[keep], P[keep]


@dataclass
class ClipRegions:
    """Sub-triangles (barycentric in their parent) for the three control regions."""
    lower: tuple
    inactive: tuple
    upper: tuple


def clip_regions(mesh, z, a, b):
    """Split every element by the lines ``z = a`` and ``z = b``.

    `z` is a nodal array; each region is ``(B, Z, parent)`` where ``Z`` holds
    the values of `z` at the sub-triangle vertices.
    """
    nt = mesh.n_elements
    B0 = np.broadcast_to(np.eye(3), (nt, 3, 3))
    Z0 = z[mesh.elements]
    P0 = np.arange(nt)
    Bl, Zl, Pl = _clip_above(B0, -Z0, P0, -a)
    Bu, Zu, Pu = _clip_above(B0, Z0, P0, b)
    Bm, Zm, Pm = _clip_above(B0, Z0, P0, a)
    Bm, Zm, Pm = _clip_above(Bm, -Zm, Pm, -b)
    return ClipRegions((Bl, -Zl, Pl), (Bm, -Zm, Pm), (Bu, Zu, Pu))


def _sub_quadrature(mesh, region, order):
    """Parent barycentrics ``(m, nq, 3)``, weights ``(m, nq)`` (absolute) and parents."""
    B, Z, P = region
    bary, w = triangle_rule(order)
    lam = np.einsum("qi,mik->mqk", bary, B)
    zq = Z @ bary.T
    weights = np.abs(_det3(B))[:, None] * mesh.areas[P][:, None] * w[None, :]
    return lam, zq, weights, P


def integrate_clamped(mesh, p, spec, integrand, order=5):
    """``sum_T int_T integrand(x, u_T(x))`` split exactly along the kink lines.

    `integrand(x, y, u, lam, parent)` returns values at the quadrature points.
    Returns the per-element integrals.
    """
    z = -p / spec.alpha
    regions = clip_regions(mesh, z, spec.a, spec.b)
    out = np.zeros(mesh.n_elements)
    for region, kind in ((regions.lower, "a"), (regions.inactive, "z"), (regions.upper, "b")):
        if len(region[0]) == 0:
            continue
        lam, zq, wq, P = _sub_quadrature(mesh, region, order)
        u = zq if kind == "z" else np.full_like(zq, spec.a if kind == "a" else spec.b)
        pts = np.einsum("mqk,mkd->mqd", lam, mesh.coords[P])
        vals = integrand(pts[..., 0], pts[..., 1], u, lam, P)
        out += np.bincount(P, weights=np.sum(wq * vals, axis=1), minlength=mesh.n_elements)
    return out


def control_load(mesh, p, spec):
    """Entries ``int clamp(-p_T/alpha) phi_i``, exact for P1 `p`."""
    z = -p / spec.alpha
    zt = z[mesh.elements]
    lower = np.all(zt <= spec.a, axis=1)
    upper = np.all(zt >= spec.b, axis=1)
    inside = np.all((zt >= spec.a) & (zt <= spec.b), axis=1) & ~lower & ~upper
    cut = ~(lower | upper | inside)
    # elements on one side of both kink lines have closed-form loads
    local = np.zeros((mesh.n_elements, 3))
    areas = mesh.areas
    local[lower] = (spec.a * areas[lower] / 3.0)[:, None]
    local[upper] = (spec.b * areas[upper] / 3.0)[:, None]
    zi = zt[inside]
    local[inside] = areas[inside, None] * (zi + zi.sum(axis=1, keepdims=True)) / 12.0
    ids = np.flatnonzero(cut)
    if ids.size:
        sub = _ElementSubset(mesh, ids)
        regions = clip_regions(sub, z, spec.a, spec.b)
        part = np.zeros((ids.size, 3))
        for region, kind in ((regions.lower, "a"), (regions.inactive, "z"), (regions.upper, "b")):
            if len(region[0]) == 0:
                continue
            lam, zq, wq, P = _sub_quadrature(sub, region, 2)
            u = zq if kind == "z" else (spec.a if kind == "a" else spec.b)
            contrib = np.einsum("mq,mqi->mi", wq * u, lam)
            for i in range(3):
                part[:, i] += np.bincount(P, weights=contrib[:, i], minlength=ids.size)
        local[ids] = part
    return np.bincount(mesh.elements.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


class _ElementSubset:
    """Minimal element-subset view (elements, coords, areas) used by the clipping kernels."""

    def __init__(self, mesh, ids):
        self.elements = mesh.elements[ids]
        self.coords = mesh.coords[ids]
        self.areas = mesh.areas[ids]
        self.n_elements = len(ids)


def inactive_mass(mesh, p, spec):
    """``int_{a < -p/alpha < b} phi_i phi_j``, the derivative of the control load times ``-alpha``."""
    z = -p / spec.alpha
    regions = clip_regions(mesh, z, spec.a, spec.b)
    lam, _, wq, P = _sub_quadrature(mesh, regions.inactive, 2)
    local = np.einsum("mq,mqi,mqj->mij", wq, lam, lam)
    e = mesh.elements[P]
    rows = np.repeat(e, 3, axis=1).ravel()
    cols = np.tile(e, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def control_l2_diff(mesh, p, q, spec, order=5):
    """``|| clamp(-p/alpha) - clamp(-q/alpha) ||_{L2}``."""
    bary, w = triangle_rule(order)
    d = clamp_control(fem.field_at(mesh, p, bary), spec) - clamp_control(fem.field_at(mesh, q, bary), spec)
    return float(np.sqrt(np.sum(mesh.areas * (d ** 2 @ w))))


# --- solves -----------------------------------------------------------------

@dataclass
class SolverOptions:
    tol: float = 1e-10
    max_iter: int = 500
    damping: Optional[float] = None
    method: str = "fixed-point"
    linear_tol: float = 1e-12
    track_energy: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.method not in ("fixed-point", "active-set"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.damping is not None and not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")

    def damping_for(self, alpha):
        if self.damping is not None:
            return self.damping
        return 0.5 if alpha < 0.05 else 1.0


@dataclass(frozen=True)
class DiscreteSolution:
    mesh: object
    y: np.ndarray
    p: np.ndarray
    spec: object
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True

    def control(self, bary):
        """Control sampled at barycentric points of every element, ``(nt, nq)``."""
        return clamp_control(fem.field_at(self.mesh, self.p, bary), self.spec)


class Discretization:
    """Operators and factorization of one mesh, shared by state and adjoint solves."""

    def __init__(self, mesh, spec, quad_order=fem.DEFAULT_QUAD_ORDER, linear_tol=1e-12):
        self.mesh = mesh
        self.spec = spec
        self.quad_order = quad_order
        self.linear_tol = linear_tol
        self.K = fem.assemble_operator(mesh, spec.coeff, quad_order)
        if spec.coeff.self_adjoint:
            self.K_adj = self.K
        else:
            self.K_adj = fem.assemble_operator(mesh, spec.coeff.adjoint(), quad_order)
        self.M = fem.assemble_mass(mesh)
        self.F = fem.assemble_load(mesh, spec.f, quad_order)
        self.Yd = fem.assemble_load(mesh, spec.y_d, quad_order)
        xb = mesh.vertices[mesh.boundary_vertices]
        self.g = evaluate(spec.boundary, xb[:, 0], xb[:, 1]).astype(float)
        self.state_solver = ReducedSolver(self.K, mesh)
        if self.K_adj is self.K or (self.K != self.K_adj.T).nnz == 0:
            self.adjoint_solver = self.state_solver
        else:
            self.adjoint_solver = ReducedSolver(self.K_adj.T, mesh)

    def state(self, control=None):
        rhs = self.F.copy()
        if control is None:
            pass
        elif callable(control):
            rhs += fem.assemble_load(self.mesh, control, self.quad_order)
        else:
            rhs += control_load(self.mesh, np.asarray(control, dtype=float), self.spec)
        return self.state_solver.solve(rhs, self.g, self.linear_tol)

    def adjoint(self, y):
        rhs = self.M @ y - self.Yd
        return self.adjoint_solver.solve(rhs, None, self.linear_tol)

    def energy(self, y, p):
        """Cost ``1/2 ||y - y_d||^2 + alpha/2 ||u||^2`` by quadrature."""
        bary, w, pts = fem.quad_points(self.mesh, self.quad_order)
        yq = fem.field_at(self.mesh, y, bary)
        d = yq - evaluate(self.spec.y_d, pts[..., 0], pts[..., 1])
        u2 = integrate_clamped(self.mesh, p, self.spec,
                               lambda x, y_, u, lam, P: u ** 2, 2).sum()
        return 0.5 * float(np.sum(self.mesh.areas * (d ** 2 @ w))) + 0.5 * self.spec.alpha * u2


def solve_state(mesh, control, spec, quad_order=fem.DEFAULT_QUAD_ORDER):
    """Discrete state for a nodal adjoint array (variational control) or a callable control."""
    return Discretization(mesh, spec, quad_order).state(control)


def solve_adjoint(mesh, y, spec, quad_order=fem.DEFAULT_QUAD_ORDER):
    return Discretization(mesh, spec, quad_order).adjoint(y)


def vi_residual(sol, spec, previous_p=None, order=5):
    """Fixed-point defect of the optimality system.

    The pointwise projection part vanishes by construction; what remains is
    the L2 distance between the controls induced by `sol.p` and by the
    previous outer iterate.
    """
    bary, _ = triangle_rule(order)
    pq = fem.field_at(sol.mesh, sol.p, bary)
    pointwise = float(np.max(np.abs(sol.control(bary) - clamp_control(pq, spec)))) if pq.size else 0.0
    if previous_p is None:
        return pointwise
    return pointwise + control_l2_diff(sol.mesh, sol.p, previous_p, spec, order)


def _converged(mesh, p, p_prev, change, spec, opts):
    scale = opts.tol * (1.0 + fem.l2_norm(mesh, p))
    return change <= scale and control_l2_diff(mesh, p, p_prev, spec) <= scale


def _fixed_point(disc, p, opts):
    mesh, spec = disc.mesh, disc.spec
    omega = opts.damping_for(spec.alpha)
    last_energy = None
    change = np.inf
    for it in range(1, opts.max_iter + 1):
        y = disc.state(p)
        p_new = (1.0 - omega) * p + omega * disc.adjoint(y)
        change = fem.l2_norm(mesh, p_new - p)
        if opts.track_energy:
            J = disc.energy(y, p)
            if last_energy is not None and J > last_energy + 1e-10:
                logger.warning("cost increased from %.12e to %.12e at outer iteration %d",
                               last_energy, J, it)
            last_energy = J
        p_prev, p = p, p_new
        if _converged(mesh, p, p_prev, change, spec, opts):
            return disc.state(p), p, p_prev, it, True
    return disc.state(p), p, p_prev, opts.max_iter, False


def _active_set(disc, p, opts):
    """Semismooth Newton on the coupled state/adjoint system (primal-dual active set)."""
    mesh, spec = disc.mesh, disc.spec
    free = mesh.free_vertices
    Kff = disc.K[free][:, free]
    Kaff = disc.K_adj.T[free][:, free]
    Mff = disc.M[free][:, free]
    y = disc.state(p)
    p_prev = p
    for it in range(1, opts.max_iter + 1):
        R1 = (disc.K @ y - disc.F - control_load(mesh, p, spec))[free]
        R2 = (disc.K_adj.T @ p - disc.M @ y + disc.Yd)[free]
        MI = inactive_mass(mesh, p, spec)[free][:, free] / spec.alpha
        J = sp.bmat([[Kff, MI], [-Mff, Kaff]], format="csc")
        step = fem.factorize(J).solve(-np.concatenate([R1, R2]))
        n = len(free)
        p_prev = p.copy()
        y = y.copy()
        p = p.copy()
        y[free] += step[:n]
        p[free] += step[n:]
        change = fem.l2_norm(mesh, p - p_prev)
        if _converged(mesh, p, p_prev, change, spec, opts):
            return disc.state(p), p, p_prev, it, True
    return disc.state(p), p, p_prev, opts.max_iter, False


def solve_ocp(mesh, spec, opts=None, p0=None, disc=None):
    """Solve the discrete optimality system; returns a :class:`DiscreteSolution`.

    Raises :class:`~afem_ocp.fem.SolverError` if the outer iteration does not
    reach ``opts.tol``; the exception carries the last iterate as ``solution``.
    """
    opts = opts or SolverOptions()
    disc = disc or Discretization(mesh, spec, linear_tol=opts.linear_tol)
    p = np.zeros(mesh.n_vertices) if p0 is None else np.asarray(p0, dtype=float).copy()
    run = _fixed_point if opts.method == "fixed-point" else _active_set
    y, p, p_prev, iters, ok = run(disc, p, opts)
    sol = DiscreteSolution(mesh, y, p, spec, iters, 0.0, ok)
    res = vi_residual(sol, spec, p_prev)
    sol = DiscreteSolution(mesh, y, p, spec, iters, res, ok)
    logger.debug("OCP solve on %d dofs: %d outer iterations, defect %.3e", mesh.n_vertices, iters, res)
    if not ok:
        err = SolverError(f"outer iteration did not converge in {iters} steps (defect {res:.3e})")
        err.solution = sol
        raise err
    return sol

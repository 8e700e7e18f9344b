"""Piecewise linear finite elements on a :class:`~afem_ocp.mesh.Mesh`.

Scalar data are plain callables ``g(x, y)`` that broadcast over numpy arrays,
or numbers.  Nodal fields are 1-D arrays with one value per mesh vertex.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .quadrature import triangle_rule

logger = logging.getLogger(__name__)

DEFAULT_QUAD_ORDER = 5
DIRECT_SOLVE_MAX_DOFS = 400_000


class DataError(ValueError):
    """Problem data could not be evaluated (non-finite value)."""


class SolverError(RuntimeError):
    pass


def evaluate(g, x, y):
    if callable(g):
        return np.broadcast_to(np.asarray(g(x, y), dtype=float), np.shape(x))
    return np.full(np.shape(x), float(g))


def quad_points(mesh, order=DEFAULT_QUAD_ORDER):
    """Barycentric rule, weights and physical points ``(nt, nq, 2)``."""
    bary, w = triangle_rule(order)
    pts = np.einsum("qi,tik->tqk", bary, mesh.coords)
    return bary, w, pts


def _check_finite(values, what):
    bad = ~np.isfinite(values)
    if bad.any():
        t = int(np.argwhere(bad)[0][0])
        raise DataError(f"non-finite {what} at a quadrature point of element {t}")


@dataclass
class CoefficientSet:
    """Coefficients of ``L y = -div(A grad y) + a0 y``.

    `A` is ``None`` (identity), a constant 2x2 array, or a callable returning
    ``(..., 2, 2)``.  `div_A` returns the row divergence ``sum_j d_j a_ij`` with
    shape ``(..., 2)``; when missing for variable `A` it is approximated by
    central differences.  `A_adjoint` defaults to the transpose of `A`.
    """
    A: object = None
    a0: object = 0.0
    div_A: object = None
    A_adjoint: object = None
    fd_step: float = 1e-6

    @property
    def variable_A(self):
        return callable(self.A)

    @property
    def self_adjoint(self):
        """True when ``L* = L`` is known without evaluating anything."""
        if self.A_adjoint is not None or callable(self.A):
            return False
        return self.A is None or np.allclose(np.asarray(self.A), np.asarray(self.A).T)

    def adjoint(self):
        if self.self_adjoint:
            return self
        if self.A_adjoint is not None:
            A_adj = self.A_adjoint
        elif callable(self.A):
            A = self.A
            A_adj = lambda x, y: np.swapaxes(A(x, y), -1, -2)
        elif self.A is None:
            A_adj = None
        else:
            A_adj = np.asarray(self.A).T
        return CoefficientSet(A_adj, self.a0, None, self.A, self.fd_step)

    def eval_A(self, x, y):
        shape = np.shape(x) + (2, 2)
        if self.A is None:
            return np.broadcast_to(np.eye(2), shape)
        if callable(self.A):
            return np.broadcast_to(np.asarray(self.A(x, y), dtype=float), shape)
        return np.broadcast_to(np.asarray(self.A, dtype=float), shape)

    def eval_div_A(self, x, y, h=1.0):
        if not self.variable_A:
            return np.zeros(np.shape(x) + (2,))
        if self.div_A is not None:
            return np.asarray(self.div_A(x, y), dtype=float)
        d = self.fd_step * np.asarray(h, dtype=float)
        dAx = (self.A(x + d, y) - self.A(x - d, y)) / (2 * d)[..., None, None]
        dAy = (self.A(x, y + d) - self.A(x, y - d)) / (2 * d)[..., None, None]
        return dAx[..., :, 0] + dAy[..., :, 1]

    def check(self, mesh, order=DEFAULT_QUAD_ORDER):
        """Sample symmetry, positive definiteness and ``a0 >= 0`` at quadrature points."""
        _, _, pts = quad_points(mesh, order)
        x, y = pts[..., 0], pts[..., 1]
        A = self.eval_A(x, y)
        if not np.allclose(A, np.swapaxes(A, -1, -2)):
            raise DataError("A is not symmetric")
        if np.any(np.linalg.eigvalsh(A)[..., 0] <= 0):
            raise DataError("A is not positive definite")
        if np.any(evaluate(self.a0, x, y) < 0):
            raise DataError("a0 is negative")


def _scatter(mesh, local):
    """Sum element matrices ``(nt, 3, 3)`` into a CSR matrix."""
    e = mesh.elements
    rows = np.repeat(e, 3, axis=1).ravel()
    cols = np.tile(e, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def element_stiffness(mesh, coeff=None, quad_order=DEFAULT_QUAD_ORDER):
    coeff = coeff or CoefficientSet()
    G = mesh.grad_lambda
    if coeff.variable_A:
        _, w, pts = quad_points(mesh, quad_order)
        A = np.einsum("q,tqkl->tkl", w, coeff.eval_A(pts[..., 0], pts[..., 1]))
    else:
        A = coeff.eval_A(np.zeros(mesh.n_elements), np.zeros(mesh.n_elements))
    K = (G @ A) @ np.swapaxes(G, 1, 2) * mesh.areas[:, None, None]
    return 0.5 * (K + np.swapaxes(K, 1, 2))


def element_mass(mesh, weight=1.0, quad_order=DEFAULT_QUAD_ORDER):
    if not callable(weight):
        ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
        return float(weight) * mesh.areas[:, None, None] * ref
    bary, w, pts = quad_points(mesh, quad_order)
    c = evaluate(weight, pts[..., 0], pts[..., 1])
    _check_finite(c, "mass weight")
    M = np.einsum("q,tq,qi,qj->tij", w, c, bary, bary) * mesh.areas[:, None, None]
    return 0.5 * (M + np.swapaxes(M, 1, 2))


def assemble_operator(mesh, coeff=None, quad_order=DEFAULT_QUAD_ORDER):
    """Matrix of ``a(phi_j, phi_i) = (A grad phi_j, grad phi_i) + (a0 phi_j, phi_i)``."""
    if quad_order < 2:
        raise ValueError("quad_order must be at least 2")
    coeff = coeff or CoefficientSet()
    local = element_stiffness(mesh, coeff, quad_order)
    if callable(coeff.a0) or coeff.a0 != 0:
        local = local + element_mass(mesh, coeff.a0, quad_order)
    return _scatter(mesh, local)


def assemble_mass(mesh, weight=1.0, quad_order=DEFAULT_QUAD_ORDER):
    return _scatter(mesh, element_mass(mesh, weight, quad_order))


def load_from_samples(mesh, values, bary, w):
    """Load vector from samples ``values (nt, nq)`` at the barycentric nodes."""
    local = np.einsum("q,tq,qi->ti", w, values, bary) * mesh.areas[:, None]
    return np.bincount(mesh.elements.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def assemble_load(mesh, g, quad_order=DEFAULT_QUAD_ORDER):
    """Vector with entries ``int g phi_i``."""
    bary, w, pts = quad_points(mesh, quad_order)
    vals = evaluate(g, pts[..., 0], pts[..., 1])
    _check_finite(vals, "load data")
    return load_from_samples(mesh, vals, bary, w)


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))


def apply_dirichlet(system, mesh, boundary_values=0.0):
    """Symmetric elimination of the boundary vertices of `mesh`.

    The returned system has unit rows/columns at constrained dofs and the
    lifted right-hand side; its solution takes the nodal interpolant of
    `boundary_values` on the boundary.
    """
    fixed = mesh.boundary_vertices
    xb = mesh.vertices[fixed]
    g = evaluate(boundary_values, xb[:, 0], xb[:, 1]).astype(float)
    _check_finite(g[:, None], "boundary data")
    K = system.matrix.tocsr()
    n = K.shape[0]
    full = np.zeros(n)
    full[fixed] = g
    rhs = system.rhs - K @ full
    rhs[fixed] = g
    keep = np.ones(n)
    keep[fixed] = 0.0
    D = sp.diags(keep)
    Kr = (D @ K @ D + sp.diags(1.0 - keep)).tocsr()
    Kr.eliminate_zeros()
    return SparseSystem(Kr, rhs, fixed, g)


def factorize(A):
    """Sparse LU of a square matrix.

    Symmetric matrices use a symmetric fill-reducing ordering without row
    pivoting, which keeps the fill of graded meshes close to that of
    uniform ones.
    """
    A = A.tocsc()
    try:
        if (A != A.T).nnz == 0:
            return spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                             options={"SymmetricMode": True})
        return spla.splu(A, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from exc


def _cg(A, b, rel_tol, maxiter):
    d = A.diagonal()
    M = sp.diags(1.0 / d)
    x, info = spla.cg(A, b, rtol=rel_tol, atol=0.0, maxiter=maxiter, M=M)
    return x, info


def solve_spd(system, rel_tol=1e-12, direct_max=DIRECT_SOLVE_MAX_DOFS, maxiter=None):
    """Solve an eliminated system; returns the nodal vector.

    Sparse LU below `direct_max` unknowns, Jacobi-preconditioned CG above.
    Raises :class:`SolverError` when the relative residual exceeds `rel_tol`.
    """
    A = system.matrix.tocsc()
    b = np.asarray(system.rhs, dtype=float)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b)
    if A.shape[0] <= direct_max:
        lu = factorize(A)
        x = lu.solve(b)
        res = np.linalg.norm(b - A @ x) / nb
        if res > rel_tol:
            # one step of iterative refinement before giving up
            x += lu.solve(b - A @ x)
            res = np.linalg.norm(b - A @ x) / nb
    else:
        x, info = _cg(A, b, rel_tol, maxiter or 10 * A.shape[0])
        res = np.linalg.norm(b - A @ x) / nb
        if info != 0:
            d = A.diagonal()
            raise SolverError(f"CG did not converge (info={info}, residual {res:.3e}, "
                              f"diagonal range [{d.min():.3e}, {d.max():.3e}])")
    if not np.isfinite(res) or res > rel_tol:
        raise SolverError(f"relative residual {res:.3e} exceeds {rel_tol:.1e}; "
                          "operator may not be positive definite")
    return x


class ReducedSolver:
    """Factorization of the free-dof block of an operator, reused across solves."""

    def __init__(self, K, mesh):
        self.free = mesh.free_vertices
        self.fixed = mesh.boundary_vertices
        K = K.tocsr()
        self.K = K
        self.K_ff = K[self.free][:, self.free].tocsc()
        self.K_fb = K[self.free][:, self.fixed]
        self.n = K.shape[0]
        if len(self.free):
            self._lu = factorize(self.K_ff)

    def solve(self, rhs, boundary=None, rel_tol=1e-12):
        x = np.zeros(self.n)
        if boundary is not None:
            x[self.fixed] = boundary
        if not len(self.free):
            return x
        b = rhs[self.free]
        if boundary is not None:
            b = b - self.K_fb @ x[self.fixed]
        xf = self._lu.solve(b)
        nb = np.linalg.norm(b)
        if nb > 0:
            res = np.linalg.norm(b - self.K_ff @ xf) / nb
            if res > rel_tol:
                xf += self._lu.solve(b - self.K_ff @ xf)
                res = np.linalg.norm(b - self.K_ff @ xf) / nb
            if not np.isfinite(res) or res > max(rel_tol, 1e-8):
                raise SolverError(f"relative residual {res:.3e} exceeds {rel_tol:.1e}")
        x[self.free] = xf
        return x


def interpolate_nodal(mesh, g):
    vals = evaluate(g, mesh.vertices[:, 0], mesh.vertices[:, 1]).astype(float)
    bad = ~np.isfinite(vals)
    if bad.any():
        raise DataError(f"non-finite value at vertex {int(np.flatnonzero(bad)[0])}")
    return vals


def field_at(mesh, values, bary):
    """Values of a P1 field at barycentric points, shape ``(nt, nq)``."""
    return values[mesh.elements] @ bary.T


def l2_norm_diff(mesh, values, g, quad_order=DEFAULT_QUAD_ORDER):
    """``|| field - g ||_{L2}`` by elementwise quadrature."""
    bary, w, pts = quad_points(mesh, quad_order)
    d = field_at(mesh, values, bary) - evaluate(g, pts[..., 0], pts[..., 1])
    return float(np.sqrt(np.sum(mesh.areas * (d ** 2 @ w))))


def l2_norm(mesh, values):
    """Exact L2 norm of a P1 field."""
    v = values[mesh.elements]
    s = (np.sum(v ** 2, axis=1) + np.sum(v, axis=1) ** 2) / 12.0
    return float(np.sqrt(np.sum(mesh.areas * s)))


def element_mean(mesh, g, T=None, quad_order=DEFAULT_QUAD_ORDER):
    """``int_T g / |T|`` for one element id, or for all elements when `T` is None."""
    _, w, pts = quad_points(mesh, quad_order)
    if T is not None:
        pts = pts[T:T + 1]
    vals = evaluate(g, pts[..., 0], pts[..., 1])
    means = vals @ w
    return float(means[0]) if T is not None else means

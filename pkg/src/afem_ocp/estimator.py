"""L2-norm residual error indicators and data oscillation.

For the state equation the indicator on an element T is

    h_T^4 ||f + u_T - L y_T||_T^2 + sum_{E in interior edges of T} h_E^3 ||[A grad y_T] . n_E||_E^2

with ``h_T = |T|^(1/2)`` and ``h_E`` the edge length; the adjoint indicator is
the same with ``y_T - y_d - L* p_T`` and ``A*``.
"""
from dataclasses import dataclass

import numpy as np

from . import fem
from .control import clamp_control
from .quadrature import edge_rule


@dataclass
class IndicatorSet:
    """Squared per-element indicators."""
    eta_y2: np.ndarray
    eta_p2: np.ndarray
    osc_y2: np.ndarray
    osc_p2: np.ndarray

    def __post_init__(self):
        for name in ("eta_y2", "eta_p2", "osc_y2", "osc_p2"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"negative entry in {name}")

    @property
    def eta2(self):
        return self.eta_y2 + self.eta_p2

    @property
    def osc2(self):
        return self.osc_y2 + self.osc_p2

    @property
    def eta_y(self):
        return float(np.sqrt(self.eta_y2.sum()))

    @property
    def eta_p(self):
        return float(np.sqrt(self.eta_p2.sum()))

    @property
    def eta(self):
        return float(np.sqrt(self.eta2.sum()))

    @property
    def osc(self):
        return float(np.sqrt(self.osc2.sum()))


def _operator_at(mesh, values, coeff, bary, pts):
    """``L v`` for a P1 field at quadrature points: ``-(div A) . grad v + a0 v``."""
    grad = np.einsum("ti,tik->tk", values[mesh.elements], mesh.grad_lambda)
    x, y = pts[..., 0], pts[..., 1]
    out = fem.evaluate(coeff.a0, x, y) * fem.field_at(mesh, values, bary)
    if coeff.variable_A:
        divA = coeff.eval_div_A(x, y, mesh.h[:, None])
        out = out - np.einsum("tqk,tk->tq", divA, grad)
    return out


def element_residuals(mesh, sol, spec, quad_order=fem.DEFAULT_QUAD_ORDER):
    """State and adjoint element residuals sampled at the quadrature nodes.

    Returns ``(R_y, R_p, weights)`` with ``R_*`` of shape ``(nt, nq)``.
    """
    bary, w, pts = fem.quad_points(mesh, quad_order)
    x, y = pts[..., 0], pts[..., 1]
    u = clamp_control(fem.field_at(mesh, sol.p, bary), spec)
    f = fem.evaluate(spec.f, x, y)
    yd = fem.evaluate(spec.y_d, x, y)
    fem._check_finite(f, "f")
    fem._check_finite(yd, "y_d")
    Ry = f + u - _operator_at(mesh, sol.y, spec.coeff, bary, pts)
    Rp = fem.field_at(mesh, sol.y, bary) - yd - _operator_at(mesh, sol.p, spec.coeff.adjoint(), bary, pts)
    return Ry, Rp, w


def _element_terms(mesh, R, w):
    areas = mesh.areas
    norm2 = areas * (R ** 2 @ w)
    mean = R @ w
    osc2 = areas * ((R - mean[:, None]) ** 2 @ w)
    weight = mesh.h ** 4
    return weight * norm2, weight * osc2


def edge_jumps(mesh, values, coeff, npoints=2):
    """``h_E^3 ||[A grad v] . n_E||_E^2`` for every interior edge.

    Returns ``(edge ids, values)``.
    """
    ids = mesh.interior_edges
    if ids.size == 0:
        return ids, np.zeros(0)
    e = mesh.edges[ids]
    t1, t2 = mesh.edge2elem[ids, 0], mesh.edge2elem[ids, 1]
    xa, xb = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    tangent = xb - xa
    length = np.hypot(tangent[:, 0], tangent[:, 1])
    normal = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / length[:, None]
    grad = np.einsum("ti,tik->tk", values[mesh.elements], mesh.grad_lambda)
    s, ws = edge_rule(npoints)
    pts = xa[:, None, :] + s[None, :, None] * tangent[:, None, :]
    A = coeff.eval_A(pts[..., 0], pts[..., 1])  # (ne, nq, 2, 2)
    jump = np.einsum("eqkl,el->eqk", A, grad[t1] - grad[t2])
    jn = np.einsum("eqk,ek->eq", jump, normal)
    return ids, length ** 3 * length * (jn ** 2 @ ws)


def _distribute(mesh, ids, vals):
    t = mesh.edge2elem[ids]
    return (np.bincount(t[:, 0], weights=vals, minlength=mesh.n_elements)
            + np.bincount(t[:, 1], weights=vals, minlength=mesh.n_elements))


def total_indicators(mesh, sol, spec, quad_order=fem.DEFAULT_QUAD_ORDER, edge_points=2):
    """All squared indicators and oscillations on `mesh`."""
    Ry, Rp, w = element_residuals(mesh, sol, spec, quad_order)
    ey, oy = _element_terms(mesh, Ry, w)
    ep, op = _element_terms(mesh, Rp, w)
    ids, jy = edge_jumps(mesh, sol.y, spec.coeff, edge_points)
    _, jp = edge_jumps(mesh, sol.p, spec.coeff.adjoint(), edge_points)
    ey = ey + _distribute(mesh, ids, jy)
    ep = ep + _distribute(mesh, ids, jp)
    return IndicatorSet(ey, ep, oy, op)


def state_indicator(mesh, sol, spec, T, **kw):
    """Squared state indicator of element `T`."""
    return float(total_indicators(mesh, sol, spec, **kw).eta_y2[T])


def adjoint_indicator(mesh, sol, spec, T, **kw):
    return float(total_indicators(mesh, sol, spec, **kw).eta_p2[T])


def data_oscillation(mesh, sol, spec, quad_order=fem.DEFAULT_QUAD_ORDER):
    """Total ``(osc_y, osc_p)`` of the state and adjoint element residuals."""
    Ry, Rp, w = element_residuals(mesh, sol, spec, quad_order)
    _, oy = _element_terms(mesh, Ry, w)
    _, op = _element_terms(mesh, Rp, w)
    return float(np.sqrt(oy.sum())), float(np.sqrt(op.sum()))


def oscillation(mesh, g, quad_order=fem.DEFAULT_QUAD_ORDER):
    """``osc(g, T) = ||h_T^2 (g - mean_T g)||_T`` for every element."""
    bary, w, pts = fem.quad_points(mesh, quad_order)
    vals = fem.evaluate(g, pts[..., 0], pts[..., 1])
    return np.sqrt(_element_terms(mesh, vals, w)[1])


def effectivity_index(eta, err_u, err_y, err_p):
    """``eta / (||u - u_T|| + ||y - y_T|| + ||p - p_T||)``; ``inf`` for a zero error."""
    denom = err_u + err_y + err_p
    if denom == 0:
        return float("inf")
    return float(eta / denom)

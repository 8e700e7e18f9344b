"""Problem definitions: the two benchmark control problems and a Poisson oracle."""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .fem import CoefficientSet, DataError


@dataclass(frozen=True)
class ExactTriple:
    """Exact optimal control, state and adjoint with ``L y`` and ``L* p``."""
    u: Callable
    y: Callable
    p: Callable
    Ly: Callable
    Lp: Callable


@dataclass(frozen=True)
class ProblemSpec:
    """min 1/2 ||y - y_d||^2 + alpha/2 ||u||^2,  L y = f + u,  a <= u <= b."""
    f: object
    y_d: object
    alpha: float
    a: float
    b: float
    coeff: CoefficientSet = field(default_factory=CoefficientSet)
    boundary: object = 0.0
    exact: Optional[ExactTriple] = None
    name: str = "custom"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.a < self.b:
            raise ValueError(f"need a < b, got [{self.a}, {self.b}]")

    def clamp(self, p):
        return np.clip(-np.asarray(p) / self.alpha, self.a, self.b)

    def scaled(self, s):
        """The same problem with data, bounds and exact solution multiplied by ``s > 0``.

        The optimality system is positively homogeneous, so the solution
        scales by the same factor.
        """
        def mul(g):
            if callable(g):
                return lambda x, y: s * g(x, y)
            return s * g
        exact = None
        if self.exact is not None:
            e = self.exact
            exact = ExactTriple(mul(e.u), mul(e.y), mul(e.p), mul(e.Ly), mul(e.Lp))
        return ProblemSpec(mul(self.f), mul(self.y_d), self.alpha, s * self.a, s * self.b,
                           self.coeff, mul(self.boundary), exact, f"{self.name}*{s:g}")


# --- Example 1: smooth solution with interior layers ------------------------

ALPHA1 = 0.1
A1, B1 = -5.0, -1.0


def _s1(x1, x2):
    return -50.0 * x1 + 100.0 * x2 - 25.0


def y1(x1, x2):
    return np.arctan(_s1(x1, x2))


def lap_y1(x1, x2):
    s = _s1(x1, x2)
    # |grad s|^2 = 50^2 + 100^2
    return -2.0 * s / (1.0 + s ** 2) ** 2 * 12500.0


def _w1(x1, x2):
    return 200.0 * (1.0 / 16.0 - (x1 - 0.5) ** 2 - (x2 - 0.5) ** 2)


def p1(x1, x2):
    g = x1 * (1 - x1) * x2 * (1 - x2)
    return 16.0 * g * (1.0 + np.arctan(_w1(x1, x2)))


def lap_p1(x1, x2):
    g = x1 * (1 - x1) * x2 * (1 - x2)
    gx = (1 - 2 * x1) * x2 * (1 - x2)
    gy = x1 * (1 - x1) * (1 - 2 * x2)
    lap_g = -2.0 * x2 * (1 - x2) - 2.0 * x1 * (1 - x1)
    w = _w1(x1, x2)
    q = 1.0 + np.arctan(w)
    wx = -400.0 * (x1 - 0.5)
    wy = -400.0 * (x2 - 0.5)
    d = 1.0 + w ** 2
    qx, qy = wx / d, wy / d
    lap_q = -800.0 / d - 2.0 * w * (wx ** 2 + wy ** 2) / d ** 2
    return 16.0 * (lap_g * q + 2.0 * (gx * qx + gy * qy) + g * lap_q)


def u1(x1, x2):
    return np.maximum(A1, np.minimum(B1, -p1(x1, x2) / ALPHA1))


def f1(x1, x2):
    return -lap_y1(x1, x2) - u1(x1, x2)


def yd1(x1, x2):
    return y1(x1, x2) + lap_p1(x1, x2)


def example1():
    """Exact-solution benchmark on the unit square, alpha = 0.1, u in [-5, -1]."""
    exact = ExactTriple(u=u1, y=y1, p=p1,
                        Ly=lambda x1, x2: -lap_y1(x1, x2),
                        Lp=lambda x1, x2: -lap_p1(x1, x2))
    return ProblemSpec(f=f1, y_d=yd1, alpha=ALPHA1, a=A1, b=B1,
                       boundary=y1, exact=exact, name="example1")


# --- Example 2: singular data, no exact solution ----------------------------

def _radial_power(r2, power, where):
    with np.errstate(divide="ignore"):
        out = r2 ** power
    if np.any(~np.isfinite(out)):
        raise DataError(f"{where} evaluated at its singular point")
    return out


def f2(x1, x2):
    # ((x1-1)^2 + (x2-1)^2)^(-3/4) = r^(-1.5), singular at (1, 1)
    return _radial_power((x1 - 1.0) ** 2 + (x2 - 1.0) ** 2, -0.75, "f")


def yd2(x1, x2):
    # (x1^2 + x2^2)^(-0.95) = r^(-1.9), singular at the origin
    return _radial_power(x1 ** 2 + x2 ** 2, -0.95, "y_d")


def example2():
    """Singular-data benchmark: alpha = 1e-2, u in [10, 15], zero boundary data."""
    return ProblemSpec(f=f2, y_d=yd2, alpha=1e-2, a=10.0, b=15.0, name="example2")


# --- Poisson oracle ---------------------------------------------------------

@dataclass(frozen=True)
class PoissonProblem:
    f: Callable
    exact: Callable
    coeff: CoefficientSet = field(default_factory=CoefficientSet)
    boundary: object = 0.0
    name: str = "poisson"


def poisson_exact(x1, x2):
    return np.sin(np.pi * x1) * np.sin(np.pi * x2)


def manufactured_poisson():
    """``-Laplace y = 2 pi^2 sin(pi x1) sin(pi x2)`` with zero boundary values."""
    return PoissonProblem(f=lambda x1, x2: 2.0 * np.pi ** 2 * poisson_exact(x1, x2),
                          exact=poisson_exact)


PROBLEMS = {
    "example1": example1,
    "example2": example2,
    "poisson": manufactured_poisson,
}


def get_problem(name):
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


def exact_errors(mesh, sol, triple, spec, quad_order=8):
    """``(||u - u_T||, ||y - y_T||, ||p - p_T||)`` in L2.

    The control error is integrated on the sub-triangles cut by the kink
    lines of ``u_T``, so the discrete control is smooth on each piece.
    """
    from . import fem
    from .control import integrate_clamped

    def sq(x, y, u, lam, parent):
        return (u - triple.u(x, y)) ** 2

    err_u = float(np.sqrt(max(integrate_clamped(mesh, sol.p, spec, sq, quad_order).sum(), 0.0)))
    err_y = fem.l2_norm_diff(mesh, sol.y, triple.y, quad_order)
    err_p = fem.l2_norm_diff(mesh, sol.p, triple.p, quad_order)
    return err_u, err_y, err_p


def consistency_audit(n_points=100, seed=0):
    """Residuals of the Example 1 optimality system at random interior points.

    Returns the largest relative defects of ``f + u + Lap y = 0``,
    ``y - y_d + Lap p = 0`` and of the projection formula ``u = clamp(-p/alpha)``.
    """
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(0.0, 1.0, (2, n_points))
    u = u1(x, y)
    parts = [(f1(x, y), u, lap_y1(x, y)), (y1(x, y), -yd1(x, y), lap_p1(x, y))]
    out = {}
    for name, terms in zip(("state", "adjoint"), parts):
        scale = np.maximum.reduce([np.abs(t) for t in terms])
        out[name] = float(np.max(np.abs(sum(terms)) / np.maximum(scale, np.finfo(float).tiny)))
    proj = np.clip(-p1(x, y) / ALPHA1, A1, B1)
    out["projection"] = float(np.max(np.abs(u - proj) / np.maximum(np.abs(proj), 1.0)))
    return out

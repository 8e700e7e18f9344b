"""Quadrature rules on the reference triangle and on edges.

Triangle rules are returned in barycentric coordinates with weights that sum
to one, so that ``sum(w * g(x)) * area`` approximates the integral over a
physical triangle.
"""
from functools import lru_cache

import numpy as np


def _perm3(a, b):
    # all distinct permutations of (a, b, b)
    return [(a, b, b), (b, a, b), (b, b, a)]


@lru_cache(maxsize=None)
def _stroud(order):
    # collapsed (Duffy) Gauss-Legendre product rule, exact to `order`;
    # the Jacobian factor (1 - xi) raises the degree in xi by one
    n = (order + 3) // 2
    s, ws = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (s + 1.0)
    ws = 0.5 * ws
    bary = []
    weights = []
    for xi, wi in zip(s, ws):
        for eta, wj in zip(s, ws):
            l1 = xi
            l2 = (1.0 - xi) * eta
            bary.append((1.0 - l1 - l2, l1, l2))
            weights.append(2.0 * wi * wj * (1.0 - xi))
    return np.array(bary), np.array(weights)


@lru_cache(maxsize=None)
def triangle_rule(order=5):
    """Barycentric points ``(nq, 3)`` and weights ``(nq,)`` exact to degree `order`."""
    if order < 0:
        raise ValueError("quadrature order must be non-negative")
    if order <= 1:
        pts, w = [(1 / 3, 1 / 3, 1 / 3)], [1.0]
    elif order == 2:
        pts, w = _perm3(2 / 3, 1 / 6), [1 / 3] * 3
    elif order <= 4:
        a1, b1 = 0.10810301816807022736, 0.44594849091596488632
        a2, b2 = 0.81684757298045851308, 0.09157621350977074346
        pts = _perm3(a1, b1) + _perm3(a2, b2)
        w = [0.22338158967801146570] * 3 + [0.10995174365532186764] * 3
    elif order == 5:
        r15 = np.sqrt(15.0)
        b1 = (6.0 - r15) / 21.0
        b2 = (6.0 + r15) / 21.0
        pts = [(1 / 3, 1 / 3, 1 / 3)] + _perm3(1 - 2 * b1, b1) + _perm3(1 - 2 * b2, b2)
        w = [9 / 40] + [(155 - r15) / 1200] * 3 + [(155 + r15) / 1200] * 3
    else:
        return _stroud(order)
    return np.array(pts, dtype=float), np.array(w, dtype=float)


@lru_cache(maxsize=None)
def edge_rule(npoints=2):
    """Gauss-Legendre points on [0, 1] and weights summing to one."""
    s, w = np.polynomial.legendre.leggauss(npoints)
    return 0.5 * (s + 1.0), 0.5 * w

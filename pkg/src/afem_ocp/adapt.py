"""Doerfler marking and the SOLVE -> ESTIMATE -> MARK -> REFINE loop."""
import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import List, Optional

import numpy as np

from . import fem
from .control import Discretization, SolverOptions, solve_ocp
from .estimator import effectivity_index, total_indicators
from .fem import SolverError
from .mesh import create_unit_square_mesh, grading_norm, prolongate, refine, size_ratio_bounds
from .problems import exact_errors

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("k", "n_elem", "n_dof", "eta", "eta_y", "eta_p", "osc", "err_u", "err_y",
               "err_p", "grading", "marked", "ratio_err", "ratio_eta", "seconds")


def reduction_factor(r=1, d=2):
    """``1 - 2^(-3r/d)``: guaranteed decrease of the marked indicator mass."""
    return 1.0 - 2.0 ** (-3.0 * r / d)


def doerfler_mark(eta2, theta):
    """Smallest set of element ids carrying a ``theta^2`` share of ``sum(eta2)``.

    Elements are taken by decreasing indicator, ties by increasing id; the
    shortest such prefix is a minimum-cardinality set.  Returns an empty
    array when every indicator vanishes.
    """
    eta2 = np.asarray(eta2, dtype=float)
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    if eta2.size == 0:
        raise ValueError("empty indicator set")
    if not np.any(eta2 > 0):
        logger.info("all indicators vanish; nothing to mark")
        return np.zeros(0, dtype=np.int64)
    if theta == 1:
        return np.flatnonzero(eta2 > 0)
    order = np.argsort(-eta2, kind="stable")
    csum = np.cumsum(eta2[order])
    target = theta ** 2 * math.fsum(eta2)
    n = int(np.searchsorted(csum, target, side="left")) + 1
    n = min(n, eta2.size)
    # cumsum rounding may leave the prefix a hair short
    while n < eta2.size and math.fsum(eta2[order[:n]]) < target:
        n += 1
    return np.sort(order[:n])


@dataclass
class AdaptOptions:
    theta: float = 0.3
    r: int = 1
    max_dofs: Optional[int] = None
    max_iters: Optional[int] = None
    eta_tol: Optional[float] = None
    uniform: bool = False
    uniform_r: int = 2
    n0: int = 4
    quad_order: int = fem.DEFAULT_QUAD_ORDER
    error_quad_order: int = 6
    exclude: int = 5
    mu_warn: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if self.r < 1 or self.uniform_r < 1:
            raise ValueError("r must be at least 1")
        if self.max_dofs is None and self.max_iters is None and self.eta_tol is None:
            self.max_iters = 30

    @property
    def bisections(self):
        return self.uniform_r if self.uniform else self.r


@dataclass
class HistoryRecord:
    k: int
    n_elem: int
    n_dof: int
    eta: float
    eta_y: float
    eta_p: float
    osc: float
    err_u: Optional[float] = None
    err_y: Optional[float] = None
    err_p: Optional[float] = None
    grading: float = 0.0
    marked: int = 0
    ratio_err: Optional[float] = None
    ratio_eta: Optional[float] = None
    seconds: Optional[float] = None

    @property
    def err(self):
        if self.err_u is None:
            return None
        return self.err_u + self.err_y + self.err_p


@dataclass
class AdaptiveHistory:
    records: List[HistoryRecord] = field(default_factory=list)
    failed: bool = False
    message: str = ""
    mesh: object = None
    solution: object = None
    indicators: object = None
    label: str = ""

    def __len__(self):
        return len(self.records)

    def column(self, name):
        if name == "err":
            return np.array([np.nan if r.err is None else r.err for r in self.records])
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name)
                         for r in self.records], dtype=float)

    def append(self, rec):
        if self.records:
            last = self.records[-1]
            if rec.k <= last.k:
                raise ValueError("iteration indices must increase")
            if rec.n_dof < last.n_dof:
                raise ValueError("DOF count decreased")
        self.records.append(rec)

    def write_csv(self, path, timing=True):
        """Write the history; ``timing=False`` blanks wall times for reproducible files."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for rec in self.records:
                row = []
                for name in CSV_COLUMNS:
                    v = getattr(rec, name)
                    if name == "seconds" and not timing:
                        v = None
                    row.append("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)))
                w.writerow(row)

    @classmethod
    def read_csv(cls, path, label=""):
        hist = cls(label=label or str(path))
        types = {f.name: f.type for f in fields(HistoryRecord)}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
            for row in reader:
                kw = {}
                for name in CSV_COLUMNS:
                    v = row[name]
                    if v == "":
                        kw[name] = None
                    elif types[name] is int or types[name] == "int":
                        kw[name] = int(v)
                    else:
                        kw[name] = float(v)
                hist.records.append(HistoryRecord(**kw))
        return hist


def afem_loop(spec, opts=None, solver_opts=None, mesh=None, callback=None):
    """Run the adaptive loop until the stop rule fires.

    `callback(k, mesh, solution, indicators)` is invoked after each ESTIMATE
    step (used for VTK snapshots).  Solver failure ends the loop with
    ``history.failed`` set and the records gathered so far.
    """
    opts = opts or AdaptOptions()
    solver_opts = solver_opts or SolverOptions()
    mesh = mesh if mesh is not None else create_unit_square_mesh(opts.n0)
    hist = AdaptiveHistory(label=f"{spec.name}:{'uniform' if opts.uniform else f'theta={opts.theta:g}'}")
    p0 = None
    prev = None
    k = 0
    while True:
        t0 = time.perf_counter()
        disc = Discretization(mesh, spec, opts.quad_order, solver_opts.linear_tol)
        try:
            sol = solve_ocp(mesh, spec, solver_opts, p0, disc)
        except SolverError as exc:
            hist.failed = True
            hist.message = str(exc)
            logger.error("iteration %d: %s", k, exc)
            break
        ind = total_indicators(mesh, sol, spec, opts.quad_order)
        errs = (None, None, None)
        if spec.exact is not None:
            errs = exact_errors(mesh, sol, spec.exact, spec, opts.error_quad_order)
        hfun_grading = grading_norm(mesh)
        if opts.mu_warn is not None and hfun_grading > opts.mu_warn:
            logger.warning("iteration %d: grading %.3g exceeds %.3g", k, hfun_grading, opts.mu_warn)
        n_dof = mesh.n_vertices
        stop = ((opts.max_iters is not None and k + 1 >= opts.max_iters)
                or (opts.max_dofs is not None and n_dof >= opts.max_dofs)
                or (opts.eta_tol is not None and ind.eta <= opts.eta_tol)
                or ind.eta == 0.0)
        if stop:
            marked = np.zeros(0, dtype=np.int64)
        elif opts.uniform:
            marked = np.arange(mesh.n_elements)
        else:
            marked = doerfler_mark(ind.eta2, opts.theta)
            assert ind.eta2[marked].sum() >= opts.theta ** 2 * ind.eta2.sum() * (1 - 1e-12)
        rec = HistoryRecord(k=k, n_elem=mesh.n_elements, n_dof=n_dof, eta=ind.eta,
                            eta_y=ind.eta_y, eta_p=ind.eta_p, osc=ind.osc,
                            err_u=errs[0], err_y=errs[1], err_p=errs[2],
                            grading=hfun_grading, marked=int(marked.size))
        if prev is not None:
            rec.ratio_eta = rec.eta / prev.eta if prev.eta > 0 else None
            if rec.err is not None and prev.err is not None:
                rec.ratio_err = (rec.err + rec.osc) / (prev.err + prev.osc)
        if rec.err is not None:
            logger.info("k=%d dofs=%d eta=%.4e err=%.4e effectivity=%.3f", k, n_dof, rec.eta,
                        rec.err, effectivity_index(rec.eta, *errs))
        else:
            logger.info("k=%d dofs=%d eta=%.4e", k, n_dof, rec.eta)
        if callback is not None:
            callback(k, mesh, sol, ind)
        hist.mesh, hist.solution, hist.indicators = mesh, sol, ind
        if stop:
            rec.seconds = time.perf_counter() - t0
            hist.append(rec)
            break
        new_mesh, _ = refine(mesh, marked, opts.bisections)
        p0 = prolongate(new_mesh, sol.p)
        rec.seconds = time.perf_counter() - t0
        hist.append(rec)
        prev = rec
        mesh = new_mesh
        k += 1
    lo, hi = size_ratio_bounds(mesh)
    logger.debug("final mesh-size ratio bounds [%.3f, %.3f]", lo, hi)
    return hist


def _series(history, quantity):
    N = history.column("n_dof")
    q = history.column(quantity)
    ok = np.isfinite(q) & (q > 0)
    if not ok.all():
        logger.warning("skipping %d non-positive or missing values of %s", int((~ok).sum()), quantity)
    return N[ok], q[ok]


def eoc(history, quantity="eta"):
    """Pairwise rates ``-log(q_{k+1}/q_k) / log(N_{k+1}/N_k)`` with N the DOF count.

    `history` is an :class:`AdaptiveHistory` or a pair ``(N, q)``.
    """
    if isinstance(history, AdaptiveHistory):
        N, q = _series(history, quantity)
    else:
        N, q = (np.asarray(a, dtype=float) for a in history)
    return list(-np.diff(np.log(q)) / np.diff(np.log(N)))


def tail_eoc(history, quantity="eta", window=4):
    """Least-squares rate over the last `window` records (positive when decreasing)."""
    if isinstance(history, AdaptiveHistory):
        N, q = _series(history, quantity)
    else:
        N, q = (np.asarray(a, dtype=float) for a in history)
    N, q = N[-window:], q[-window:]
    if len(N) < 2:
        raise ValueError("need at least two records")
    slope = np.polyfit(np.log(N), np.log(q), 1)[0]
    return float(-slope)


def contraction_report(history, exclude=5):
    """Successive ratios of (error + osc) and of eta, and the share below one after `exclude`."""
    if isinstance(history, AdaptiveHistory):
        err = history.column("err") + history.column("osc")
        eta = history.column("eta")
    else:
        err = np.asarray(history, dtype=float)
        eta = err
    r_err = list(err[1:] / err[:-1])
    r_eta = list(eta[1:] / eta[:-1])
    tail = np.array(r_err[exclude:])
    tail = tail[np.isfinite(tail)]
    share = float(np.mean(tail < 1.0)) if tail.size else float("nan")
    return {"ratio_err": r_err, "ratio_eta": r_eta, "share_err_below_one": share}

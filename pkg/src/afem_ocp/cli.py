"""``afem-ocp`` command line: run, compare and activeset.

Exit codes: 0 success, 1 configuration error, 2 solver failure, 3 I/O error.
"""
import argparse
import configparser
import contextlib
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import bench
from .adapt import AdaptiveHistory, AdaptOptions, afem_loop, eoc, tail_eoc
from .control import SolverOptions
from .fem import DataError
from .problems import PoissonProblem, consistency_audit, get_problem

logger = logging.getLogger("afem_ocp")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3
EMIT_CHOICES = {"csv", "vtk", "activeset"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: str = "example1"
    refine: str = "adaptive"
    theta: float = 0.3
    r: int = 1
    n0: int = 4
    max_dofs: int = None
    max_iters: int = None
    tol: float = 1e-10
    max_outer: int = 500
    method: str = "fixed-point"
    quad_order: int = 5
    out: str = "afem_out"
    emit: set = field(default_factory=lambda: {"csv"})
    timing: bool = True

    def validate(self):
        if self.refine not in ("adaptive", "uniform"):
            raise ConfigError(f"--refine must be adaptive or uniform, got {self.refine!r}")
        unknown = set(self.emit) - EMIT_CHOICES
        if unknown:
            raise ConfigError(f"unknown --emit value(s): {', '.join(sorted(unknown))}")
        try:
            self.adapt_options()
            self.solver_options()
            get_problem(self.problem)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.quad_order < 2:
            raise ConfigError("--quad-order must be at least 2")
        return self

    def adapt_options(self):
        uniform = self.refine == "uniform"
        return AdaptOptions(theta=1.0 if uniform else self.theta, r=self.r, n0=self.n0,
                            max_dofs=self.max_dofs, max_iters=self.max_iters,
                            uniform=uniform, quad_order=self.quad_order)

    def solver_options(self):
        return SolverOptions(tol=self.tol, max_iter=self.max_outer, method=self.method)


_CONVERTERS = {"theta": float, "r": int, "n0": int, "max_dofs": lambda s: int(float(s)),
               "max_iters": int, "tol": float, "max_outer": int, "quad_order": int,
               "emit": lambda s: {e.strip() for e in s.split(",") if e.strip()}}


def load_config(path):
    """Read ``key = value`` pairs from the ``[run]`` section (or a section-less file)."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text if text.lstrip().startswith("[") else "[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    valid = set(RunConfig.__dataclass_fields__)
    for key, value in parser["run"].items() if parser.has_section("run") else ():
        key = key.replace("-", "_")
        if key not in valid:
            raise ConfigError(f"{path}: unknown key {key!r}")
        try:
            out[key] = _CONVERTERS.get(key, str)(value)
        except ValueError as exc:
            raise ConfigError(f"{path}: bad value for {key}: {value!r}") from exc
    return out


def _add_run_flags(p):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--problem", help="example1, example2 or poisson")
    p.add_argument("--refine", choices=["adaptive", "uniform"])
    p.add_argument("--theta", type=float, help="Doerfler parameter in (0, 1]")
    p.add_argument("--r", type=int, help="bisections per marked element")
    p.add_argument("--n0", type=int, help="initial mesh subdivisions per side")
    p.add_argument("--max-dofs", type=lambda s: int(float(s)))
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float, help="outer solver tolerance")
    p.add_argument("--max-outer", type=int, help="outer solver iteration cap per mesh")
    p.add_argument("--method", choices=["fixed-point", "active-set"])
    p.add_argument("--quad-order", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--emit", type=_CONVERTERS["emit"], help="comma list of csv,vtk,activeset")
    p.add_argument("--no-timing", dest="timing", action="store_false", default=None,
                   help="leave the seconds column empty (byte-reproducible CSV)")


def build_parser():
    parser = argparse.ArgumentParser(prog="afem-ocp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="run the adaptive or uniform loop"))
    cmp_ = sub.add_parser("compare", help="align history CSV files by DOF count")
    cmp_.add_argument("csv", nargs="+", help="history files; the last one is the reference")
    cmp_.add_argument("--out", help="write the merged table as CSV")
    act = sub.add_parser("activeset", help="run, then write active-set borders of the final iterate")
    _add_run_flags(act)
    return parser


def make_config(args):
    values = {}
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    for key in RunConfig.__dataclass_fields__:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig(**values).validate()


def _summary(hist):
    rows = []
    rates_eta = [None] + eoc(hist, "eta")
    has_err = hist.records and hist.records[0].err is not None
    rates_err = [None] + eoc(hist, "err") if has_err else [None] * len(hist)
    for rec, re, rr in zip(hist.records, rates_eta, rates_err):
        rows.append({"k": rec.k, "dofs": rec.n_dof, "eta": rec.eta, "eoc_eta": re,
                     "err": rec.err, "eoc_err": rr})
    return bench.format_table(rows, ["k", "dofs", "eta", "eoc_eta", "err", "eoc_err"])


def _run_poisson(cfg, problem):
    rows = bench.poisson_convergence(problem)
    print(bench.format_table(rows, ["n", "n_dof", "err", "eoc_h"]))
    rates = [r["eoc_h"] for r in rows[1:]]
    ok = all(abs(r - 2.0) <= 0.1 for r in rates)
    print(f"[{'PASS' if ok else 'FAIL'}] Poisson L2 EOC 2.0 +- 0.1: "
          + ", ".join(f"{r:.3f}" for r in rates))
    if "csv" in cfg.emit:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "poisson.csv", "w") as fh:
            fh.write("n,n_dof,err\n")
            for r in rows:
                fh.write(f"{r['n']},{r['n_dof']},{r['err']!r}\n")
    return EXIT_OK if ok else EXIT_SOLVER


def run(cfg, activeset=False):
    """Execute one configuration; returns an exit status."""
    problem = get_problem(cfg.problem)
    if isinstance(problem, PoissonProblem):
        return _run_poisson(cfg, problem)
    if cfg.problem == "example1":
        audit = consistency_audit()
        logger.debug("example1 data audit: %s", audit)
        if max(audit.values()) > 1e-8:
            raise DataError(f"example1 data are inconsistent: {audit}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.problem}_{cfg.refine}"

    def snapshot(k, mesh, sol, ind):
        bench.write_snapshot(out / f"{stem}_{k:03d}.vtk", mesh, sol, ind)

    callback = snapshot if "vtk" in cfg.emit else None

    hist = afem_loop(problem, cfg.adapt_options(), cfg.solver_options(), callback=callback)
    if "csv" in cfg.emit:
        hist.write_csv(out / f"{stem}.csv", timing=cfg.timing)
    if hist.records:
        print(_summary(hist))
        if len(hist) >= 2:
            line = f"tail rate vs DOF: eta {tail_eoc(hist, 'eta'):.3f}"
            if hist.records[-1].err is not None:
                line += f", error {tail_eoc(hist, 'err'):.3f}"
            print(line)
    if (activeset or "activeset" in cfg.emit) and hist.solution is not None:
        bench.emit_activeset(out / f"{stem}_activeset.csv", hist.mesh, hist.solution, problem)
    if hist.failed:
        print(f"solver failure: {hist.message}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _compare(args):
    hists = [AdaptiveHistory.read_csv(p, label=Path(p).stem) for p in args.csv]
    rows = bench.compare(hists, [h.label for h in hists])
    cols = ["label", "k", "n_dof", "quantity", "value", "ref_n_dof", "ref_value", "efficiency"]
    print(bench.format_table(rows, cols))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in rows:
                fh.write(",".join(str(r[c]) for c in cols) + "\n")
    return EXIT_OK


def _limit_threads():
    n = os.environ.get("AFEM_OCP_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limits = _limit_threads()
    except ValueError:
        print("AFEM_OCP_THREADS must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with limits:
            if args.command == "compare":
                return _compare(args)
            cfg = make_config(args)
            return run(cfg, activeset=args.command == "activeset")
    except (ConfigError, DataError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed history files in `compare`
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

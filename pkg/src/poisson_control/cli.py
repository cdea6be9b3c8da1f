"""Command-line front end: solve, validate, sweep and simulate.

Every output file starts with the full run specification so that a
result can be reproduced from the file alone. CSV files carry it as
``# key=value`` comment lines above the header row, JSON files under the
``runspec`` key.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import analytic_infinite, observers, oracle, qbd_finite, simulator
from .core import (
    INF,
    JointDist,
    ModelError,
    ModelParams,
    NumericalError,
    Variant,
    validate_params,
)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4
EXIT_VALIDATION = 5

DEFAULT_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class RunSpec:
    subcommand: str
    variant: str = "finite"
    lam: float = 1.0
    mu: float = 1.0
    nu: float = 1.0
    smax: int | None = 2
    qmax: int | None = None
    tol: float = 1e-12
    seed: int = 0
    format: str = "csv"
    out: str | None = None
    probe: str | None = None
    nu_range: str | None = None
    nu_list: str | None = None
    horizon: float | None = None
    batches: int = 30
    replications: int = 1
    workers: int = 1
    simulate: bool = False

    def params(self) -> ModelParams:
        v = Variant.parse(self.variant)
        smax = self.smax if v is Variant.CONTROLLER_FINITE else INF
        return ModelParams(self.lam, self.mu, self.nu, INF if smax is None else smax, v)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ModelError(f"unknown run-spec keys: {sorted(unknown)}")
        return cls(**d)

    def nu_values(self) -> list[float]:
        if self.nu_list:
            return [float(v) for v in self.nu_list.split(",")]
        if self.nu_range:
            return parse_nu_range(self.nu_range)
        raise ModelError("sweep needs --nu-range or --nu-list")

    def sim_horizon(self) -> float:
        if self.horizon is not None:
            return self.horizon
        return max(3e4, 3e4 / self.nu)


def parse_nu_range(text: str) -> list[float]:
    """``a:b:steps`` -> ``steps`` log-spaced values from ``a`` to ``b``."""
    try:
        a, b, n = text.split(":")
        a, b, n = float(a), float(b), int(n)
    except ValueError as exc:
        raise ModelError(f"bad nu range {text!r}; expected a:b:steps") from exc
    if not (a > 0 and b > 0 and n >= 1):
        raise ModelError("nu range needs positive endpoints and steps >= 1")
    return [float(v) for v in np.geomspace(a, b, n)]


# --- config handling -------------------------------------------------------

# flag name (as in the config file) -> RunSpec field and converter
_KEYS = {
    "variant": ("variant", str),
    "lambda": ("lam", float),
    "mu": ("mu", float),
    "nu": ("nu", float),
    "smax": ("smax", int),
    "qmax": ("qmax", int),
    "tol": ("tol", float),
    "seed": ("seed", int),
    "format": ("format", str),
    "out": ("out", str),
    "probe": ("probe", str),
    "nu-range": ("nu_range", str),
    "nu-list": ("nu_list", str),
    "horizon": ("horizon", float),
    "batches": ("batches", int),
    "replications": ("replications", int),
    "workers": ("workers", int),
}


def read_config(path: str) -> dict:
    """Flat ``key=value`` file with the same keys as the command-line flags."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ModelError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.lstrip("-").replace("_", "-")
            if key not in _KEYS:
                raise ModelError(f"{path}:{lineno}: unknown key {key!r}")
            name, conv = _KEYS[key]
            try:
                out[name] = conv(value)
            except ValueError as exc:
                raise ModelError(f"{path}:{lineno}: bad value for {key}") from exc
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisson-control",
                                     description="Queues whose speed is reset at Poisson instants.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; flags override it")
    common.add_argument("--variant", choices=[v.value for v in Variant])
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--mu", type=float)
    common.add_argument("--nu", type=float)
    common.add_argument("--smax", type=int)
    common.add_argument("--qmax", type=int)
    common.add_argument("--tol", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--format", choices=["csv", "json"])
    common.add_argument("--out")
    sub.add_parser("solve", parents=[common], help="analytic solution")
    p = sub.add_parser("validate", parents=[common], help="closed form vs oracle checks")
    p.add_argument("--simulate", action="store_true", default=None,
                   help="also compare against a simulation run")
    p.add_argument("--horizon", type=float)
    p = sub.add_parser("sweep", parents=[common], help="E[Q], E[S] over a range of nu")
    p.add_argument("--nu-range", help="a:b:steps, log-spaced")
    p.add_argument("--nu-list", help="comma-separated values")
    p.add_argument("--workers", type=int)
    p = sub.add_parser("simulate", parents=[common], help="event simulation with batch means")
    p.add_argument("--probe", choices=["conjecture", "fluid"])
    p.add_argument("--horizon", type=float)
    p.add_argument("--batches", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--workers", type=int)
    return parser


def spec_from_args(argv=None) -> RunSpec:
    args = build_parser().parse_args(argv)
    merged = {"subcommand": args.subcommand}
    if args.config:
        merged.update(read_config(args.config))
    for key, value in vars(args).items():
        if key in ("config", "subcommand") or value is None:
            continue
        merged[key] = value
    if args.subcommand == "simulate" and merged.get("probe") == "conjecture" \
            and "variant" not in merged:
        merged["variant"] = Variant.CONTROLLER_INFINITE.value
    return RunSpec.from_dict(merged)


# --- output ----------------------------------------------------------------

@dataclass
class Report:
    columns: tuple
    rows: list

    def add(self, *row):
        self.rows.append(row)


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


def _json_cell(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def render(spec: RunSpec, report: Report) -> str:
    if spec.format == "json":
        doc = {
            "runspec": spec.to_dict(),
            "columns": list(report.columns),
            "rows": [{c: _json_cell(v) for c, v in zip(report.columns, row)} for row in report.rows],
        }
        # repr of a Python float is the shortest string that round-trips (<= 17 digits)
        return json.dumps(doc, indent=1) + "\n"
    lines = [f"# {k}={'' if v is None else v}" for k, v in spec.to_dict().items()]
    lines.append(",".join(report.columns))
    lines.extend(",".join(_csv_cell(v) for v in row) for row in report.rows)
    return "\n".join(lines) + "\n"


def write_output(spec: RunSpec, report: Report) -> None:
    text = render(spec, report)
    if spec.out in (None, "-"):
        sys.stdout.write(text)
        return
    with open(spec.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_report(path: str) -> tuple[dict, list[dict]]:
    """Parse a CSV or JSON report back into (runspec, rows)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        return doc["runspec"], doc["rows"]
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            meta[k] = v
        else:
            body.append(line)
    header = body[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in body[1:] if line]
    return meta, rows


# --- solvers ---------------------------------------------------------------

@dataclass
class Solution:
    joint: JointDist
    mean_q: float
    mean_s: float
    p_empty: float
    pgf: callable


def analytic_solution(spec: RunSpec) -> Solution:
    p = validate_params(spec.params())
    tol = spec.tol
    v = p.variant
    if v is Variant.CONTROLLER_INFINITE:
        sv = analytic_infinite.sigma_solve(p, tol=max(tol, 1e-15) if spec.qmax is None else 1.0,
                                           N=spec.qmax)
        d = analytic_infinite.assemble_joint(p, sv)
        return Solution(d, d.mean_q(), d.mean_s(), d.p_empty(), d.pgf)
    if v is Variant.CONTROLLER_FINITE:
        sol = qbd_finite.solve(p)
        d = sol.to_joint(qmax=spec.qmax, tail_tol=tol)
        return Solution(d, sol.mean_q(), sol.mean_s(), sol.p_empty(),
                        lambda x, y: qbd_finite.qbd_to_pgf(sol, x, y))
    if v is Variant.OBSERVER_MM1:
        f = observers.mm1_form(p)
        d = observers.mm1_obs_joint(p, spec.qmax, spec.qmax, tail_tol=tol)
        m = p.rho / (1 - p.rho)
        return Solution(d, m, m, 1 - p.rho, lambda x, y: observers.mm1_obs_pgf(f, x, y))
    f = observers.mminf_form(p)
    d = observers.mminf_obs_joint(p, spec.qmax, spec.qmax, tail_tol=max(tol, 1e-15))
    return Solution(d, p.rho, p.rho, math.exp(-p.rho), lambda x, y: observers.mminf_obs_pgf(f, x, y))


def cmd_solve(spec: RunSpec) -> Report:
    sol = analytic_solution(spec)
    rep = Report(("quantity", "index1", "index2", "value"), [])
    rep.add("EQ", None, None, sol.mean_q)
    rep.add("ES", None, None, sol.mean_s)
    rep.add("P(Q=0)", None, None, sol.p_empty)
    rep.add("mass_deficit", None, None, sol.joint.mass_deficit)
    for i, v in enumerate(sol.joint.marginal_q()):
        rep.add("marginal_q", i, None, v)
    for j, v in enumerate(sol.joint.marginal_s()):
        rep.add("marginal_s", j, None, v)
    for x in DEFAULT_GRID:
        for y in DEFAULT_GRID:
            rep.add("pgf", x, y, sol.pgf(x, y))
    probs = sol.joint.probs
    for i in range(probs.shape[0]):
        for j in range(probs.shape[1]):
            if probs[i, j] > 0:
                rep.add("pi", i, j, probs[i, j])
    return rep


def _oracle_joint(p: ModelParams, qmax: int | None, start: int) -> JointDist:
    if qmax is not None:
        return oracle.solve(p, qmax)
    q = start
    for _ in range(3):
        try:
            return oracle.solve(p, q)
        except NumericalError:
            q *= 2
    return oracle.solve(p, q)


def _grid_interior(n: int = 7):
    pts = np.linspace(0.1, 0.9, n)
    return [(x, y) for x in pts for y in pts]


def cmd_validate(spec: RunSpec) -> Report:
    p = validate_params(spec.params())
    rep = Report(("check", "deviation", "tolerance", "passed"), [])

    def check(name, dev, tol):
        rep.add(name, float(dev), float(tol), bool(dev < tol))

    v = p.variant
    grid = _grid_interior()
    if v is Variant.CONTROLLER_INFINITE:
        d = analytic_infinite.solve(p)
        o = _oracle_joint(p, spec.qmax, max(40, 2 * d.qmax))
        check("oracle_max_abs_diff", d.max_abs_diff(o), 1e-6)
        m = min(d.qmax, d.jmax)
        check("marginal_equality", np.abs(d.marginal_q()[:m] - d.marginal_s()[:m]).max(), 1e-6)
        gamma = d.marginal_q()
        jm = p.mu * np.arange(d.jmax + 1)
        up = p.lam * gamma[:-1]
        down = d.probs[1:] @ jm
        check("level_crossing_balance", np.abs(up - down).max(), 1e-6)
        check("functional_equation", analytic_infinite.functional_eq_residual(d, p, grid), 1e-6)
        check("mean_exceeds_rho", p.rho - d.mean_q(), 0.0)
        ref_q, ref_s = d.mean_q(), d.mean_s()
    elif v is Variant.CONTROLLER_FINITE:
        sol = qbd_finite.solve(p)
        d = sol.to_joint()
        o = _oracle_joint(p, spec.qmax, max(40, d.qmax))
        check("oracle_max_abs_diff", d.max_abs_diff(o), 1e-8)
        check("r_matrix_residual", qbd_finite.r_residual(p), 1e-10)
        check("global_balance", qbd_finite.global_balance_residual(sol), 1e-10)
        dev = max(abs(qbd_finite.qbd_to_pgf(sol, x, y) - d.pgf(x, y)) for x, y in grid)
        check("pgf_vs_table", dev, 1e-9)
        if p.smax == 1:
            cf = qbd_finite.closed_form_s1(p)
            dev = max(abs(cf.pgf(x, y) - qbd_finite.qbd_to_pgf(sol, x, y)) for x, y in grid)
            check("closed_form_s1", dev, 1e-10)
        ref_q, ref_s = sol.mean_q(), sol.mean_s()
    elif v is Variant.OBSERVER_MM1:
        f = observers.mm1_form(p)
        d = observers.mm1_obs_joint(p)
        o = _oracle_joint(p, spec.qmax, max(40, d.qmax))
        check("oracle_max_abs_diff", d.max_abs_diff(o), 1e-8)
        check("functional_equation", observers.mm1_obs_functional_residual(f, grid), 1e-9)
        ref_q = ref_s = p.rho / (1 - p.rho)
    else:
        f = observers.mminf_form(p)
        d = observers.mminf_obs_joint(p, method="series")
        di = observers.mminf_obs_joint(p, d.qmax, d.jmax, method="integral")
        o = _oracle_joint(p, spec.qmax, max(40, d.qmax))
        check("oracle_max_abs_diff", d.max_abs_diff(o), 1e-8)
        check("series_vs_integral", d.max_abs_diff(di), 1e-10)
        check("functional_equation", observers.mminf_obs_functional_residual(f, grid), 1e-9)
        ref_q = ref_s = p.rho
    if spec.simulate:
        cfg = simulator.SimConfig(p, horizon=spec.sim_horizon(), batches=spec.batches, seed=spec.seed)
        res = simulator.simulate(cfg)
        for name, ref in (("EQ", ref_q), ("ES", ref_s)):
            e = res[name]
            check(f"simulated_{name}_within_ci", abs(e.point - ref), e.half_width)
    return rep


def _sweep_point(p: ModelParams):
    sol = qbd_finite.solve(p)
    d = sol.to_joint(tail_tol=1e-15)
    return sol.mean_q(), sol.mean_s(), abs(sol.mean_q() - d.mean_q()), abs(sol.mean_s() - d.mean_s())


def cmd_sweep(spec: RunSpec) -> Report:
    p0 = spec.params()
    if p0.variant is not Variant.CONTROLLER_FINITE:
        raise ModelError("sweep is defined for the finite controller")
    nus = spec.nu_values()
    ps = [validate_params(p0.replace(nu=nu)) for nu in nus]
    if spec.workers > 1:
        with ThreadPoolExecutor(spec.workers) as pool:
            results = list(pool.map(_sweep_point, ps))
    else:
        results = [_sweep_point(p) for p in ps]
    rep = Report(("nu", "EQ", "ES", "EQ_err", "ES_err"), [])
    for nu, r in zip(nus, results):
        rep.add(nu, *r)
    return rep


def _reference_means(p: ModelParams):
    if not p.is_ergodic():
        return None, None
    spec = RunSpec("solve", variant=p.variant.value, lam=p.lam, mu=p.mu, nu=p.nu,
                   smax=None if p.smax == INF else p.smax)
    try:
        sol = analytic_solution(spec)
    except NumericalError:
        return None, None
    return sol.mean_q, sol.mean_s


def cmd_simulate(spec: RunSpec) -> Report:
    p = spec.params()
    validate_params(p, allow_unstable=spec.probe is None)
    rep = Report(("name", "point", "half_width", "batches", "reference"), [])
    scaled = spec.probe == "conjecture"
    cfg = simulator.SimConfig(p, horizon=spec.sim_horizon(), batches=spec.batches,
                              seed=spec.seed, scaled=scaled)
    if spec.probe == "conjecture":
        cp = simulator.conjecture_probe(cfg)
        for e in (cp.q_axis_fraction, cp.s_axis_fraction):
            rep.add(e.name, e.point, e.half_width, e.batches, 0.5)
        for e in (cp.q_axis_mean, cp.s_axis_mean):
            rep.add(e.name, e.point, e.half_width, e.batches, p.lam)
        for x, y, e, conj in cp.pgf_samples:
            rep.add(f"pgf({x:g};{y:g})", e.point, e.half_width, e.batches, conj)
        return rep
    if spec.probe == "fluid":
        fp = simulator.fluid_probe(cfg)
        fc = qbd_finite.fluid_cycle(p)
        for e, ref in zip(fp.occupancy, fc.sigma):
            rep.add(f"occupancy_{e.name}", e.point, e.half_width, e.batches, ref)
        ref_unstable = float(fc.sigma[: len(fc.s_minus)].sum())
        rep.add("fluid_unstable", fp.fluid_unstable.point, fp.fluid_unstable.half_width,
                fp.fluid_unstable.batches, ref_unstable)
        rep.add("fluid_stable", fp.fluid_stable.point, fp.fluid_stable.half_width,
                fp.fluid_stable.batches, float(fc.sigma[-1]))
        rep.add("normal", fp.normal.point, fp.normal.half_width, fp.normal.batches,
                1.0 - ref_unstable - float(fc.sigma[-1]))
        for j, (mean, hw, count) in sorted(fp.drain_means.items()):
            expected = (p.lam - j * p.mu) / (p.smax * p.mu - p.lam)
            rep.add(f"drain_time_{j}", mean, hw, count, expected)
        return rep
    ref_q, ref_s = _reference_means(p)
    if spec.replications > 1:
        runs = simulator.replicate(cfg, spec.replications, workers=spec.workers)
        for k, r in enumerate(runs):
            for name, ref in (("EQ", ref_q), ("ES", ref_s), ("P(Q=0)", None)):
                e = r[name]
                rep.add(f"{name}[{k}]", e.point, e.half_width, e.batches, ref)
        return rep
    r = simulator.simulate(cfg)
    for name, ref in (("EQ", ref_q), ("ES", ref_s), ("P(Q=0)", None)):
        e = r[name]
        rep.add(name, e.point, e.half_width, e.batches, ref)
    return rep


COMMANDS = {"solve": cmd_solve, "validate": cmd_validate, "sweep": cmd_sweep,
            "simulate": cmd_simulate}


def run(spec: RunSpec) -> int:
    try:
        report = COMMANDS[spec.subcommand](spec)
        write_output(spec, report)
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if spec.subcommand == "validate" and not all(row[3] for row in report.rows):
        failed = [row[0] for row in report.rows if not row[3]]
        print(f"validation failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def main(argv=None) -> int:
    try:
        spec = spec_from_args(argv)
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())

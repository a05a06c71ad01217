"""Command-line entry point: build, oracle, simulate, check, report.

Every run writes a JSON log holding the resolved configuration and the
content hash of the coefficient, so a (coefficient, seed) pair reproduces
the run exactly.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import duhamel as D
from . import estimates as E
from . import oracle as O
from . import process_sim as PS
from .coefficients import Coefficient, CoefficientError, make_coefficient

log = logging.getLogger("nlhk")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
COMMANDS = ("build", "oracle", "simulate", "check", "report")
CHECKS = ("conservativeness", "near_diag_lower", "positivity", "two_sided",
          "finite_range", "lemmas")


class ConfigError(ValueError):
    pass


@dataclass
class RunSpec:
    command: str
    coef: str | None
    t: float | None = None
    grid: tuple | None = None
    out: str = "."
    seed: int = 0
    threads: int = 1
    only: str | None = None
    table: str | None = None
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.coef is not None and not Path(self.coef).is_file():
            raise ConfigError(f"coefficient file {self.coef!r} does not exist")
        if self.table is not None and not Path(self.table).is_file():
            raise ConfigError(f"table file {self.table!r} does not exist")
        if self.t is not None and not self.t > 0:
            raise ConfigError("--t must be positive")
        if self.only is not None and self.only not in CHECKS:
            raise ConfigError(f"--only must be one of {CHECKS}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        out = Path(self.out)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise ConfigError(f"output directory {out} is not writable")


def parse_grid(text):
    """'K,dx,L' with empty fields left at their defaults."""
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError("--grid expects 'K,dx,L'")
    K, dx, L = (p.strip() for p in parts)
    try:
        return (int(K) if K else None, float(dx) if dx else None, float(L) if L else None)
    except ValueError as exc:
        raise ConfigError(f"bad --grid value {text!r}") from exc


def resolve_threads(flag):
    if flag is not None:
        n = flag
    else:
        env = os.environ.get("NLHK_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError as exc:
            raise ConfigError(f"NLHK_THREADS={env!r} is not an integer") from exc
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _load_coef(spec: RunSpec) -> Coefficient:
    if spec.coef is None:
        raise ConfigError(f"{spec.command} needs --coef")
    return make_coefficient(spec.coef)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(E._plain(obj), indent=2, sort_keys=True) + "\n")


def _base_log(spec: RunSpec, c: Coefficient | None):
    return {"run": asdict(spec),
            "coefficient": None if c is None else {"hash": c.content_hash(), "spec": c.spec,
                                                   "d": c.d, "beta": c.beta}}


# ---------------------------------------------------------------------------
# build

def build_table(c: Coefficient, t, grid_override=None, tol=1e-10):
    """Base series build followed by composition doubling. Returns (base, final, grid)."""
    K, dx, L = grid_override or (None, None, None)
    kw = {"K": K} if K else {}
    base, grid = D.build_base(c, t, tol=tol, dx=dx, L=L, **kw)
    final = D.extend_to(base, t, c=c) if t > grid.T * (1 + 1e-12) else base
    return base, final, grid


def cmd_build(spec: RunSpec) -> int:
    c = _load_coef(spec)
    t = spec.t if spec.t is not None else D.choose_base_horizon(c)
    base, table, grid = build_table(c, t, spec.grid)
    out = Path(spec.out)
    table.save(out / "table.nlhk")
    table.to_csv(out / "slices.csv", every=max(1, table.values.shape[1] // 257))
    res1, _ = D.duhamel_residual(base, c, "first")
    res2 = None
    if base.translation_invariant and c.d == 1:
        res2, _ = D.duhamel_residual(base, c, "second")
    sup = table.sup()
    vmin = float(table.values.min())
    logd = _base_log(spec, c)
    logd.update({
        "resolved": {"t": t, "base_grid": {"T": grid.T, "K": grid.K, "dx": grid.dx, "L": grid.L,
                                           "d": grid.d, "gamma": grid.gamma},
                     "a0": base.meta.get("a0")},
        "sup_ratios": base.meta.get("sup_ratios"),
        "residual_first": res1, "residual_second": res2,
        "extensions": table.meta.get("extensions", []),
        "min_value": vmin, "sup": sup,
        "negative_flag": bool(vmin < -E.POSITIVITY_TOL * sup),
    })
    _write_json(out / "build.json", logd)
    _write_tail_csv(table, out / "tail.csv")
    if logd["negative_flag"]:
        log.warning("table has negative values: min/sup = %.3e", vmin / sup)
    print(json.dumps({"table": str(out / "table.nlhk"), "log": str(out / "build.json")}))
    return EXIT_OK


def _write_tail_csv(table: D.KernelTable, path):
    """log|u| against log q at the final time, for log-log tail plots."""
    u, q = table.radial_profile(len(table.times) - 1)
    r = np.abs(u)
    keep = (r > 0) & (q > 0)
    np.savetxt(path, np.column_stack([np.log(r[keep]), np.log(q[keep])]), delimiter=",",
               header="log_r,log_q", comments="")


# ---------------------------------------------------------------------------
# oracle

def cmd_oracle(spec: RunSpec) -> int:
    c = _load_coef(spec)
    if not c.translation_invariant:
        raise ConfigError("the Fourier oracle needs an x-independent coefficient")
    t = spec.t if spec.t is not None else D.choose_base_horizon(c)
    _, dx, L = spec.grid or (None, None, None)
    dx = dx or math.sqrt(t) / 16
    L = L or 8 * math.sqrt(t)
    sym = O.symbol_from_coefficient(c)
    dens = O.density_from_symbol(sym, t, dx, L)
    out = Path(spec.out)
    if c.d == 1:
        np.savetxt(out / "oracle.csv", np.column_stack([dens.offsets, dens.values]),
                   delimiter=",", header="u,q", comments="")
    else:
        mid = dens.values.shape[0] // 2
        np.savetxt(out / "oracle.csv", np.column_stack([dens.offsets, dens.values[mid]]),
                   delimiter=",", header="u1,q(u1,0)", comments="")
    logd = _base_log(spec, c)
    logd.update({"resolved": {"t": t, "dx": dx, "L": L}, "alias_error": dens.alias_error,
                 "min_value": dens.min_value, "spacing": dens.h})
    _write_json(out / "oracle.json", logd)
    print(json.dumps({"csv": str(out / "oracle.csv"), "log": str(out / "oracle.json")}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(spec: RunSpec) -> int:
    c = _load_coef(spec)
    ex = spec.extra
    cfg = PS.SimConfig(n_paths=ex.get("n_paths", 100_000), dt=ex.get("dt", 1e-3),
                       eps_jump=ex.get("eps", 0.05), seed=spec.seed,
                       horizon=spec.t if spec.t is not None else 0.25,
                       threads=spec.threads, keep_jumps=bool(ex.get("jumps_csv")))
    radii = tuple(ex.get("exit_radii") or ())
    x0 = np.zeros(c.d)
    samples = PS.simulate(c, cfg, x0, exit_radii=radii)
    stats = PS.summary(samples, cfg)
    for r in radii:
        stats[f"exit_kappa_r{r:g}"] = PS.fit_exit_kappa(samples, r)
    out = Path(spec.out)
    logd = _base_log(spec, c)
    logd["stats"] = stats
    _write_json(out / "simulate.json", logd)
    paths = {"stats": str(out / "simulate.json")}
    if ex.get("jumps_csv"):
        samples.jumps_csv(out / "jumps.csv")
        paths["jumps"] = str(out / "jumps.csv")
    print(json.dumps(paths))
    return EXIT_OK


# ---------------------------------------------------------------------------
# check

def run_checks(table: D.KernelTable, c: Coefficient, only=None, rebuild=None):
    wanted = CHECKS if only is None else (only,)
    reports = []
    for name in wanted:
        if name == "conservativeness":
            reports.append(E.check_conservativeness(table, c))
        elif name == "near_diag_lower":
            reports.append(E.check_near_diag_lower(table, c))
        elif name == "positivity":
            reports.append(E.check_positivity(table, c, rebuild=rebuild))
        elif name == "two_sided":
            if c.nonneg_flag:
                reports.append(E.check_two_sided(table, c))
        elif name == "finite_range":
            if math.isfinite(c.support_radius) and c.sup_norm > 0 and c.nonneg_flag:
                reports.append(E.check_finite_range(table, c))
        elif name == "lemmas":
            from .coefficients import ModelParams
            reports.extend(E.check_lemma_inequalities(ModelParams(c.d, c.beta)))
    return reports


def cmd_check(spec: RunSpec) -> int:
    c = _load_coef(spec)
    if spec.table is not None:
        table = D.KernelTable.load(spec.table)
    else:
        t = spec.t if spec.t is not None else D.choose_base_horizon(c)
        _, table, _ = build_table(c, t, spec.grid)

    def rebuild(T):
        return build_table(c, T, spec.grid)[1]

    reports = run_checks(table, c, spec.only, rebuild)
    out = Path(spec.out)
    text = E.write_reports(reports, out / "checks.jsonl")
    sys.stdout.write(text)
    logd = _base_log(spec, c)
    logd["verdicts"] = {r.check_id: r.verdict for r in reports}
    _write_json(out / "check.json", logd)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# report

def cmd_report(spec: RunSpec) -> int:
    """Collect the logs found in --out into one summary document."""
    out = Path(spec.out)
    summary = {}
    for name in ("build", "oracle", "simulate", "check"):
        p = out / f"{name}.json"
        if p.is_file():
            summary[name] = json.loads(p.read_text())
    checks = out / "checks.jsonl"
    if checks.is_file():
        summary["checks"] = [json.loads(line) for line in checks.read_text().splitlines() if line]
    if not summary:
        raise ConfigError(f"no run logs found in {out}")
    _write_json(out / "report.json", summary)
    failed = [r["check_id"] for r in summary.get("checks", []) if r["verdict"] != "pass"]
    print(json.dumps({"report": str(out / "report.json"), "failed_checks": failed}))
    return EXIT_CHECK_FAILED if failed else EXIT_OK


HANDLERS = {"build": cmd_build, "oracle": cmd_oracle, "simulate": cmd_simulate,
            "check": cmd_check, "report": cmd_report}


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="nlhk", description="Heat kernels of Laplacian plus "
                                "nonlocal perturbations: construction, oracles and checks.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--coef", help="coefficient JSON document")
    p.add_argument("--t", type=float, help="target time (default: base horizon)")
    p.add_argument("--grid", help="base grid overrides 'K,dx,L'")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap (fallback: NLHK_THREADS)")
    p.add_argument("--only", help=f"run a single check, one of {', '.join(CHECKS)}")
    p.add_argument("--table", help="existing NLHK table for 'check'")
    p.add_argument("--n-paths", type=int, default=100_000)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--eps", type=float, default=0.05, help="small-jump cutoff")
    p.add_argument("--exit-radii", type=float, nargs="*", default=())
    p.add_argument("--jumps-csv", action="store_true", help="export the jump log")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        spec = RunSpec(
            command=args.command, coef=args.coef, t=args.t,
            grid=parse_grid(args.grid) if args.grid else None, out=args.out,
            seed=args.seed, threads=resolve_threads(args.threads), only=args.only,
            table=args.table,
            extra={"n_paths": args.n_paths, "dt": args.dt, "eps": args.eps,
                   "exit_radii": list(args.exit_radii), "jumps_csv": args.jumps_csv})
        spec.validate()
        return HANDLERS[spec.command](spec)
    except (ConfigError, CoefficientError, D.GridMismatch, json.JSONDecodeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG
    except (D.NonContraction, D.ExtentOverflow, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

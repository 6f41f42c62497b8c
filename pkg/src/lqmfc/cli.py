"""Command-line driver.

    lqmfc <subcommand> --config PATH [--out DIR] [--seed U64] [--workers COUNT]

Exit codes: 0 pass, 1 config error, 2 assumption failure, 3 numerical
failure, 4 acceptance failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, preset_path
from .convergence import rate_studies, write_plot_data, write_rate_csv, write_summary_csv
from .feedback import RhoError
from .fields import (
    FieldError,
    lq_phi_oracle,
    make_pde_config,
    residual_U,
    solve_decoupling_field,
    write_field_csv,
    SpaceTimeField,
)
from .model import AssumptionEntry, AssumptionError, AssumptionReport, ModelError, validate_assumptions
from .noise import NoisePlan
from .riccati import RiccatiBlowUp, TimeGridFn, solve_P, solve_Pi, write_riccati_csv
from .sim import (
    EnsembleConfig,
    cost_mf,
    cost_particles,
    gateaux_check,
    simulate_decentralized,
    simulate_particles,
    value_gap,
)

log = logging.getLogger("lqmfc")

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 1, 2, 3, 4


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


class Run:
    """Shared state of one CLI invocation."""

    def __init__(self, cfg: RunConfig, out: Path, workers: int):
        self.cfg = cfg
        self.out = out
        self.workers = int(workers)
        out.mkdir(parents=True, exist_ok=True)
        self._P = None

    @property
    def header(self) -> str:
        return f"# config_digest: {self.cfg.digest}\n# seed: {self.cfg.seed}\n"

    def write_rows(self, name: str, fields, rows) -> Path:
        path = self.out / name
        buf = io.StringIO()
        buf.write(self.header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        path.write_text(buf.getvalue())
        return path

    # solved objects -----------------------------------------------------------
    @property
    def P(self) -> TimeGridFn:
        if self._P is None:
            self._P = solve_P(self.cfg.model, self.cfg.grids["K"])
        return self._P

    def pde_config(self, P=None):
        g = self.cfg.grids
        dom = tuple(g["domain"]) if g["domain"] is not None else None
        return make_pde_config(self.cfg.model, P or self.P, g["nx"], g["nt"], dom, g["cfl_safety"])

    def phi(self, P=None) -> SpaceTimeField:
        P = P or self.P
        return solve_decoupling_field(self.cfg.model, P, self.pde_config(P), self.cfg.model.sigma0**2, name="phi")

    def psi(self, N: int) -> SpaceTimeField:
        """Psi for N, cached on disk under the config digest."""
        m = self.cfg.model
        cache = self.out / "cache"
        cache.mkdir(exist_ok=True)
        path = cache / f"psi_{self.cfg.digest[:16]}_N{N}.npz"
        if path.exists():
            d = np.load(path)
            return SpaceTimeField(d["t"], d["x"], d["values"], float(d["diffusion"]), name=f"psi_N{N}")
        fld = solve_decoupling_field(m, self.P, self.pde_config(), m.sigma**2 / N + m.sigma0**2, name=f"psi_N{N}")
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, t=fld.t, x=fld.x, values=fld.values, diffusion=fld.diffusion_coeff)
        tmp.replace(path)
        return fld

    def plan(self) -> NoisePlan:
        return NoisePlan(self.cfg.seed, self.cfg.n_t, self.cfg.model.T)

    def assumptions(self) -> AssumptionReport:
        a = self.cfg.assumptions
        return validate_assumptions(self.cfg.model, self.P, tuple(a["y_range"]), tuple(a["u_range"]),
                                    a["grid_size"], a["grid_size"], a["eps0"])

    def require_solvable(self) -> None:
        """Refuse to solve when rho is not well defined (R <= 0 or A3 fails)."""
        rep = self.assumptions()
        a3 = rep["A3"]
        if not a3.passed:
            raise AssumptionError(f"curvature assumption fails (margin {a3.margin:.3g} at u,y={a3.witness})")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_validate(run: Run) -> int:
    try:
        rep = run.assumptions()
    except AssumptionError as exc:
        rep = AssumptionReport((AssumptionEntry("R_positive", False, run.cfg.model.R, (run.cfg.model.R,), str(exc)),))
    rows = [(r["assumption"], r["pass"], r["margin"], r["witness"], r["note"]) for r in rep.rows()]
    run.write_rows("assumptions.csv", ["assumption", "pass", "margin", "witness", "note"], rows)
    for e in rep.entries:
        log.info("%-12s %s margin=%.6g %s", e.name, "PASS" if e.passed else "FAIL", e.margin, e.note)
    return EXIT_OK if rep.all_passed else EXIT_ASSUMPTION


def cmd_riccati(run: Run) -> int:
    m = run.cfg.model
    lq = m.lq_coefficients()
    Pi = None
    if lq is not None:
        Ab, Bb, Qb, Rb, Gb = lq
        Pi = solve_Pi(m.A, Ab, m.B, Bb, m.Q, Qb, m.R, Rb, m.G, Gb, m.T, run.cfg.grids["K"])
    write_riccati_csv(run.out / "riccati.csv", run.P, Pi, header=run.header)
    return EXIT_OK


def _ladder(run: Run):
    return sorted(set(run.cfg.experiment["N_ladder"]))


def _residual_samples(run: Run, fld: SpaceTimeField):
    r = run.cfg.residual
    nt = fld.nt
    it = np.unique(np.rint(np.linspace(0, nt, r["t_count"])).astype(int))
    lo, hi = fld.x[0] + r["xhat_margin"], fld.x[-1] - r["xhat_margin"]
    inner = np.flatnonzero((fld.x >= lo) & (fld.x <= hi))
    inner = inner[(inner >= 2) & (inner <= fld.nx - 2)]
    if inner.size == 0:
        raise FieldError("no residual samples inside the domain margin")
    jx = inner[np.unique(np.rint(np.linspace(0, inner.size - 1, r["xhat_count"])).astype(int))]
    return fld.t[it], np.asarray(r["x_samples"], dtype=float), fld.x[jx]


def cmd_fields(run: Run) -> int:
    run.require_solvable()
    m = run.cfg.model
    g = run.cfg.grids
    P = run.P
    phi = run.phi()
    write_field_csv(run.out / "field_phi.csv", phi, run.header, g["csv_t_stride"], g["csv_x_stride"])
    rows = []
    ts, xs, xh = _residual_samples(run, phi)
    terminal = 0.5 * m.g_fn.d1(phi.x)
    res = residual_U(m, P, phi, ts, xs, xh, "mean_field")
    rows.append(("phi", 0, "mean_field", float(np.max(np.abs(res))),
                 float(np.max(np.abs(phi.values[-1] - terminal))), phi.n_extrapolated))
    for N in _ladder(run):
        psi = run.psi(N)
        write_field_csv(run.out / f"field_psi_N{N}.csv", psi, run.header, g["csv_t_stride"], g["csv_x_stride"])
        res = residual_U(m, P, psi, ts, xs, xh, "particle", N)
        rows.append((f"psi_N{N}", N, "particle", float(np.max(np.abs(res))),
                     float(np.max(np.abs(psi.values[-1] - terminal))), psi.n_extrapolated))
    lq = m.lq_coefficients()
    if lq is not None:
        Ab, Bb, Qb, Rb, Gb = lq
        Pi = solve_Pi(m.A, Ab, m.B, Bb, m.Q, Qb, m.R, Rb, m.G, Gb, m.T, g["K"])
        oracle = lq_phi_oracle(P, Pi, phi.x)
        res = residual_U(m, P, oracle, ts, xs, xh, "mean_field")
        err = float(np.max(np.abs(phi.values - oracle.values)[:, (phi.x >= xh[0]) & (phi.x <= xh[-1])]))
        rows.append(("lq_oracle", 0, "mean_field", float(np.max(np.abs(res))), err, 0))
        log.info("LQ oracle residual %.3g, max |phi - oracle| on samples %.3g", float(np.max(np.abs(res))), err)
    run.write_rows("residuals.csv", ["field", "N", "variant", "max_abs_residual", "terminal_or_oracle_error",
                                     "n_extrapolated"], rows)
    for r in rows:
        log.info("%-10s residual %.3g", r[0], r[3])
    return EXIT_OK


def cmd_simulate(run: Run) -> int:
    run.require_solvable()
    m = run.cfg.model
    s = run.cfg.sim
    N = s["N"]
    plan = run.plan()
    phi = run.phi()
    psi = run.psi(N)
    ens = EnsembleConfig(s["n_t"], N, s["M0"], s["M1"])
    J, Jse = cost_mf(m, run.P, phi, ens, plan, run.workers)
    ids = list(range(s["M0"]))
    par = simulate_particles(m, run.P, psi, N, plan, ids)
    dec = simulate_decentralized(m, run.P, phi, N, plan, ids)
    Jp, Jpse = cost_particles(m, par)
    Jd, Jdse = cost_particles(m, dec)
    rows = [
        ("cost_mf", J, Jse, s["M0"], s["M1"], 1, run.cfg.seed),
        ("cost_particles", Jp, Jpse, s["M0"], 1, N, run.cfg.seed),
        ("cost_decentralized", Jd, Jdse, s["M0"], 1, N, run.cfg.seed),
    ]
    run.write_rows("estimates.csv", ["quantity", "value", "stderr", "M0", "M1", "N", "seed"], rows)
    stride = s["traj_t_stride"]
    keep = min(s["traj_paths"], s["M0"])
    for tr in (par, dec):
        ref = tr.xhat if tr.xhat is not None else tr.xbar
        rows = [
            (tr.path_ids[a], i, tr.t[n], tr.x[a, i, n], tr.u[a, i, n], ref[a, n])
            for a in range(keep)
            for i in range(N)
            for n in range(0, tr.t.size, stride)
        ]
        run.write_rows(f"trajectories_{tr.kind}.csv", ["path_id", "particle_id", "t", "x", "u", "xhat_or_xbarN"],
                       rows)
    log.info("J_mf=%.6g+-%.2g  J_particles=%.6g+-%.2g  J_decentralized=%.6g+-%.2g", J, Jse, Jp, Jpse, Jd, Jdse)
    return EXIT_OK


def cmd_optimality(run: Run, scale_P: float | None = None) -> int:
    run.require_solvable()
    m = run.cfg.model
    o = run.cfg.optimality
    P = run.P
    fb_P = None
    if scale_P is not None and scale_P != 1.0:
        fb_P = TimeGridFn(P.t, scale_P * P.values)
        phi = run.phi(fb_P)
    else:
        phi = run.phi()
    ens = EnsembleConfig(run.cfg.n_t, 1, o["M0"], o["M1"])
    res = gateaux_check(m, P, phi, o["directions"], o["eps"], ens, run.plan(), run.workers, feedback_P=fb_P)
    rows = [
        (d, res.derivatives[d], res.derivative_stderr[d], res.J, res.bound, int(abs(res.derivatives[d]) <= res.bound))
        for d in range(o["directions"])
    ]
    run.write_rows("gateaux.csv", ["direction", "dJ_deps", "stderr", "J", "bound", "pass"], rows)
    log.info("J=%.6g bound=%.3g max|dJ/deps|=%.3g", res.J, res.bound, float(np.max(np.abs(res.derivatives))))
    return EXIT_OK if res.passed else EXIT_ACCEPTANCE


def cmd_rates(run: Run) -> int:
    run.require_solvable()
    m = run.cfg.model
    e = run.cfg.experiment
    ladder = _ladder(run)
    phi = run.phi()
    psis = {N: run.psi(N) for N in ladder}
    reps = rate_studies(e["quantities"], m, run.P, phi, psis, ladder, e["M"], run.plan(), run.workers,
                        run.cfg.digest, progress=lambda N: log.info("N=%d done", N))
    ordered = [reps[q] for q in e["quantities"]]
    for r in ordered:
        write_rate_csv(run.out / f"rates_{r.quantity}.csv", r, run.header)
        write_plot_data(run.out / f"rates_{r.quantity}.dat", r, run.header)
        log.info("%-14s slope=%s r2=%s pass=%s %s", r.quantity, r.slope, r.r2, r.passed, "; ".join(r.notes))
    write_summary_csv(run.out / "rates_summary.csv", ordered, run.header)
    decided = [r.passed for r in ordered if r.passed is not None]
    return EXIT_OK if decided and all(decided) else EXIT_ACCEPTANCE


def cmd_value_gap(run: Run) -> int:
    run.require_solvable()
    m = run.cfg.model
    e = run.cfg.experiment
    phi = run.phi()
    rows = []
    for N in _ladder(run):
        ens = EnsembleConfig(run.cfg.n_t, N, e["M"], 1)
        gap, se, fg, fgse = value_gap(m, run.P, phi, run.psi(N), N, ens, run.plan(), run.workers)
        rows.append((N, gap, se, fg, fgse, e["M"], run.cfg.seed))
    run.write_rows("value_gap.csv", ["N", "value_gap", "stderr", "field_gap", "field_gap_stderr", "M", "seed"], rows)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "riccati": cmd_riccati,
    "fields": cmd_fields,
    "simulate": cmd_simulate,
    "optimality": cmd_optimality,
    "rates": cmd_rates,
    "value-gap": cmd_value_gap,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lqmfc", description="LQ mean field control solver and experiments")
    p.add_argument("command", choices=sorted(COMMANDS))
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="JSON run configuration")
    src.add_argument("--preset", help="bundled configuration (trivial, zero_lq, lq, nonconvex, constant_b)")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: config 'output' or ./out)")
    p.add_argument("--seed", type=int, default=None, help="override sim.seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, default=1, help="worker threads for Monte Carlo chunks")
    p.add_argument("--debug-scale-P", type=float, default=None, dest="scale_P",
                   help="multiply P inside the feedback law (optimality contrast runs only)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        path = args.config if args.config is not None else preset_path(args.preset)
        cfg = load_config(path)
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.with_seed(args.seed)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if args.scale_P is not None and args.command != "optimality":
            raise ConfigError("--debug-scale-P is only valid with the optimality subcommand")
        out = args.out or Path(cfg.output or "out")
        run = Run(cfg, out, args.workers)
        if args.command == "optimality":
            return cmd_optimality(run, args.scale_P)
        return COMMANDS[args.command](run)
    except AssumptionError as exc:
        print(f"assumption failure: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except (ModelError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RiccatiBlowUp, FieldError, RhoError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

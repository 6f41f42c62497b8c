"""Convergence-rate studies over a ladder of particle numbers.

For every N one coupled pass simulates, on the same noise, the conditional
mean ``xhat``, the decentralized system ``x*_i`` and the N-particle system
``xbar_i`` and reduces each path to the per-path value of every gap
quantity. A quantity's error at N is the path average of these values.
The common paths are the same for every N, so the ladder is coupled as well.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fields import SpaceTimeField
from .model import MfcModel, ModelError
from .noise import NoisePlan
from .riccati import TimeGridFn
from .sim import ClosedLoop, TrajectorySet, chunked_map, particle_costs, value_gap_paths

__all__ = [
    "QUANTITIES",
    "BANDS",
    "RateReport",
    "fit_loglog",
    "coupled_pass",
    "rate_study",
    "rate_studies",
    "write_rate_csv",
    "write_summary_csv",
    "write_plot_data",
]

QUANTITIES = (
    "XN_VS_XHAT",
    "XBARN_VS_XHAT",
    "FIELD_GAP",
    "CONTROL_GAP",
    "CHAOS",
    "COST_GAP",
    "VALUE_GAP",
    "MOMENT",
)

# acceptance bands for the fitted log2-log2 slope
BANDS = {
    "XN_VS_XHAT": (-1.35, -0.65),
    "XBARN_VS_XHAT": (-1.35, -0.65),
    "FIELD_GAP": (-2.5, -1.5),
    "CONTROL_GAP": (-2.5, -1.5),
    "CHAOS": (-1.35, -0.65),
    "COST_GAP": (-math.inf, -0.4),
    "VALUE_GAP": (-1.5, -0.6),
    "MOMENT": (-0.1, 0.1),
}
MIN_R2 = {"XN_VS_XHAT": 0.9, "XBARN_VS_XHAT": 0.9}
MOMENT_MAX_VARIATION = 0.15
PARTICLES_PER_CHUNK = 2048


def fit_loglog(rows):
    """Least squares of log2(error) on log2(N); returns (slope, intercept, r2).

    Rows with non-positive error are dropped with a warning.
    """
    rows = [(float(n), float(e)) for n, e in rows]
    good = [(n, e) for n, e in rows if e > 0 and n > 0]
    if len(good) < len(rows):
        warnings.warn(f"dropped {len(rows) - len(good)} rows with non-positive error", RuntimeWarning, stacklevel=2)
    if len(good) < 2:
        raise ValueError("need at least 2 rows with positive error to fit a slope")
    lx = np.log2([n for n, _ in good])
    ly = np.log2([e for _, e in good])
    X = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(X, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


@dataclass
class RateReport:
    quantity: str
    rows: list  # (N, error, stderr)
    slope: float | None = None
    intercept: float | None = None
    r2: float | None = None
    degenerate: bool = False
    seed: int | None = None
    digest: str = ""
    notes: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = sorted((int(n), float(e), float(s)) for n, e, s in self.rows)
        if any(e < 0 for _, e, _ in self.rows):
            raise ValueError("errors must be non-negative")
        errs = [e for _, e, _ in self.rows]
        if errs and all(e == 0.0 for e in errs):
            self.degenerate = True
            self.notes.append("degenerate: all errors are zero")
        elif len(self.rows) >= 3:
            self.slope, self.intercept, self.r2 = fit_loglog([(n, e) for n, e, _ in self.rows])
        else:
            self.notes.append("slope undefined: fewer than 3 ladder points")

    @property
    def band(self):
        return BANDS[self.quantity]

    def monotone_flags(self):
        """Adjacent pairs whose error grows by more than 2 combined standard errors."""
        bad = []
        for (n0, e0, s0), (n1, e1, s1) in zip(self.rows, self.rows[1:]):
            if e1 > e0 + 2.0 * math.hypot(s0, s1):
                bad.append((n0, n1))
        return bad

    @property
    def variation(self) -> float:
        errs = np.array([e for _, e, _ in self.rows])
        return float((errs.max() - errs.min()) / errs.mean()) if errs.size and errs.mean() > 0 else 0.0

    @property
    def passed(self) -> bool | None:
        """True/False against the band; None when the quantity is degenerate."""
        if self.degenerate:
            return None
        if self.slope is None:
            return False
        lo, hi = self.band
        ok = lo <= self.slope <= hi
        if self.quantity in MIN_R2:
            ok = ok and self.r2 >= MIN_R2[self.quantity]
        if self.quantity == "COST_GAP":
            ok = ok and not self.monotone_flags()
        if self.quantity == "MOMENT":
            ok = ok and self.variation <= MOMENT_MAX_VARIATION
        return bool(ok)


def _chunks(M: int, N: int):
    size = max(1, PARTICLES_PER_CHUNK // N)
    ids = list(range(M))
    return [ids[s:s + size] for s in range(0, M, size)]


def coupled_pass(model: MfcModel, P: TimeGridFn, phi: SpaceTimeField, psi: SpaceTimeField, N: int, M: int,
                 plan: NoisePlan, workers: int = 1, solver=None) -> dict:
    """Per-path values of every gap quantity at one N; dict of arrays of length M."""
    if not phi.same_grid(psi):
        raise ModelError("Phi and Psi must share a grid")
    kern = ClosedLoop(model, P, plan.n_t, solver)

    def one(c):
        dW0 = plan.common_block(c)
        dW = plan.idio_block(c, N)
        x0 = plan.init_block(model.init, c, N)
        xh, kh = kern.xhat_paths(phi, model.init.mean, dW0)
        xs, us, xsN = kern.decentralized_paths(xh, kh, x0, dW0, dW)
        xb, ub, xbN, _ = kern.particle_paths(psi, x0, dW0, dW)
        gap, fg, kphi, kpsi = value_gap_paths(kern, phi, psi, xbN)
        dec = TrajectorySet("decentralized", phi.name, kern.t, xs, us, xh, xsN, tuple(c), N)
        par = TrajectorySet("particles", psi.name, kern.t, xb, ub, None, xbN, tuple(c), N)
        return {
            "XN_VS_XHAT": np.max((xsN - xh) ** 2, axis=-1),
            "XBARN_VS_XHAT": np.max((xbN - xh) ** 2, axis=-1),
            "FIELD_GAP": fg,
            "CONTROL_GAP": np.max((kphi - kpsi) ** 2, axis=-1),
            "CHAOS": np.max((xs - xb) ** 2, axis=-1).mean(axis=1),
            "COST_GAP": particle_costs(model, dec) - particle_costs(model, par),
            "VALUE_GAP": gap,
            "MOMENT": np.max(xb**2, axis=-1).mean(axis=1),
        }

    parts = chunked_map(one, _chunks(M, N), workers)
    return {q: np.concatenate([p[q] for p in parts]) for q in QUANTITIES}


def _summarise(q: str, v: np.ndarray):
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    mean = float(v.mean())
    if q in ("COST_GAP", "VALUE_GAP"):
        return abs(mean), se
    return mean, se


def rate_studies(quantities, model, P, phi, psi_per_N: dict, N_list, M: int, plan: NoisePlan, workers: int = 1,
                 digest: str = "", solver=None, progress=None) -> dict:
    """All requested quantities from one coupled pass per N."""
    quantities = list(quantities)
    for q in quantities:
        if q not in QUANTITIES:
            raise ModelError(f"unknown quantity {q!r}")
    N_list = sorted(int(n) for n in N_list)
    if not N_list:
        raise ModelError("empty N ladder")
    missing = [n for n in N_list if n not in psi_per_N]
    if missing:
        raise ModelError(f"Psi not solved for N in {missing}")
    rows = {q: [] for q in quantities}
    for N in N_list:
        vals = coupled_pass(model, P, phi, psi_per_N[N], N, M, plan, workers, solver)
        for q in quantities:
            e, s = _summarise(q, vals[q])
            rows[q].append((N, e, s))
        if progress:
            progress(N)
    return {q: RateReport(q, rows[q], seed=plan.seed, digest=digest) for q in quantities}


def rate_study(quantity, model, P, phi, psi_per_N, N_list, M, plan, workers: int = 1, digest: str = "",
               solver=None) -> RateReport:
    return rate_studies([quantity], model, P, phi, psi_per_N, N_list, M, plan, workers, digest, solver)[quantity]


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "nan"
    return "%.17g" % v


def write_rate_csv(path, report: RateReport, header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header)
        fh.write("quantity,N,error,stderr\n")
        for n, e, s in report.rows:
            fh.write(f"{report.quantity},{n},{_fmt(e)},{_fmt(s)}\n")


def write_summary_csv(path, reports, header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header)
        fh.write("quantity,slope,r2,pass_band_lo,pass_band_hi,pass,note\n")
        for r in reports:
            lo, hi = r.band
            flag = "degenerate" if r.passed is None else str(int(r.passed))
            note = "; ".join(r.notes + [f"non-monotone {a}->{b}" for a, b in r.monotone_flags()])
            fh.write(f"{r.quantity},{_fmt(r.slope)},{_fmt(r.r2)},{_fmt(lo)},{_fmt(hi)},{flag},{note}\n")


def write_plot_data(path, report: RateReport, header: str = "") -> None:
    """Two columns: log2 N and log2 error."""
    with open(path, "w", newline="") as fh:
        fh.write(header)
        for n, e, _ in report.rows:
            if e > 0:
                fh.write(f"{_fmt(math.log2(n))} {_fmt(math.log2(e))}\n")

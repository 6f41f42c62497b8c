"""Decoupling fields Phi / Psi on a (t, xhat) grid.

The field solves the backward semilinear equation

    d_t F + d_x F * v + D d_xx F + S = 0,    F(T, x) = g'(x) / 2,

with drift ``v = A x + a(x) + B k + b(k)``, ``k = rho(P(t) x + F)`` and source

    S = P(t) [a(x) + B^2 P(t) x / R + B k + b(k) + a'(x) x] + q'(x)/2 + (A + a'(x)) F.

``D`` is half the diffusion coefficient: ``sigma0^2`` gives Phi and
``sigma^2 / N + sigma0^2`` gives the N-particle field Psi.

Time stepping goes backward: drift, source and k are frozen at the later
slice, advection is first-order upwind and diffusion is implicit. At both
ends of the space grid the second derivative is set to zero, so the field
is continued linearly (the LQ field is exactly affine in x).
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .feedback import RhoSolver
from .model import MfcModel, ModelError
from .riccati import TimeGridFn

__all__ = [
    "CflError",
    "FieldError",
    "PdeConfig",
    "SpaceTimeField",
    "default_domain",
    "make_pde_config",
    "solve_decoupling_field",
    "lq_phi_oracle",
    "residual_U",
    "write_field_csv",
]

log = logging.getLogger(__name__)


class FieldError(ArithmeticError):
    """Non-finite slice or evaluation outside the solved domain."""


class CflError(FieldError):
    """Explicit advection step violates the CFL bound."""


@dataclass(frozen=True)
class PdeConfig:
    """Space-time grid of the field solver.

    ``diffusion`` is the coefficient in front of ``d_xx`` (half the squared
    volatility); it may be left as ``None`` and supplied to the solver.
    """

    x_lo: float
    x_hi: float
    nx: int
    nt: int
    diffusion: float | None = None
    cfl_safety: float = 0.9

    def __post_init__(self):
        if not (math.isfinite(self.x_lo) and math.isfinite(self.x_hi)) or self.x_hi <= self.x_lo:
            raise ModelError(f"need x_lo < x_hi, got [{self.x_lo}, {self.x_hi}]")
        if self.nx < 4:
            raise ModelError("nx must be >= 4")
        if self.nt < 1:
            raise ModelError("nt must be >= 1")
        if not 0.0 < self.cfl_safety <= 1.0:
            raise ModelError("cfl_safety must lie in (0, 1]")
        if self.diffusion is not None and self.diffusion < 0:
            raise ModelError("diffusion must be >= 0")

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.nx

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.nx + 1)

    def check_cfl(self, drift_bound: float, T: float) -> None:
        dt = T / self.nt
        if dt * drift_bound > self.cfl_safety * self.dx:
            raise CflError(
                f"CFL bound violated: dt*|v|/dx = {dt * drift_bound / self.dx:.3g} > {self.cfl_safety}; "
                f"increase nt to at least {math.ceil(T * drift_bound / (self.cfl_safety * self.dx))}"
            )


class SpaceTimeField:
    """Nodal field values on a uniform (t, x) grid.

    ``eval`` is bilinear inside the box and linear in x outside it; points
    beyond the box are counted in ``n_extrapolated``.
    """

    def __init__(self, t, x, values, diffusion_coeff: float, name: str = "field"):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        v = np.asarray(values, dtype=float)
        if v.shape != (t.size, x.size):
            raise ValueError(f"values shape {v.shape} does not match grid ({t.size}, {x.size})")
        if not np.all(np.isfinite(v)):
            raise FieldError("field values must be finite")
        for arr in (t, x, v):
            arr.setflags(write=False)
        self.t, self.x, self.values = t, x, v
        self.diffusion_coeff = float(diffusion_coeff)
        self.name = name
        self.dt = (t[-1] - t[0]) / (t.size - 1)
        self.dx = (x[-1] - x[0]) / (x.size - 1)
        self._lock = threading.Lock()
        self._n_extrapolated = 0

    @property
    def nt(self) -> int:
        return self.t.size - 1

    @property
    def nx(self) -> int:
        return self.x.size - 1

    @property
    def n_extrapolated(self) -> int:
        return self._n_extrapolated

    def _count_outside(self, x):
        n = int(np.count_nonzero((x < self.x[0]) | (x > self.x[-1])))
        if n:
            with self._lock:
                self._n_extrapolated += n

    def _xweights(self, x):
        s = (x - self.x[0]) / self.dx
        j = np.clip(np.floor(s).astype(np.int64), 0, self.nx - 1)
        return j, s - j

    def eval_step(self, n: int, x):
        """Value on time slice ``n`` at arbitrary x (linear in x)."""
        x = np.asarray(x, dtype=float)
        self._count_outside(x)
        j, w = self._xweights(x)
        row = self.values[n]
        return (1.0 - w) * row[j] + w * row[j + 1]

    def eval(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        self._count_outside(x)
        s = (t - self.t[0]) / self.dt
        n = np.clip(np.floor(s).astype(np.int64), 0, self.nt - 1)
        wt = np.clip(s - n, 0.0, 1.0)
        j, w = self._xweights(x)
        v = self.values
        lo = (1.0 - w) * v[n, j] + w * v[n, j + 1]
        hi = (1.0 - w) * v[n + 1, j] + w * v[n + 1, j + 1]
        out = (1.0 - wt) * lo + wt * hi
        return float(out) if out.ndim == 0 else out

    __call__ = eval

    def d_x(self):
        """Central first differences (one-sided at the ends), nodal array."""
        return np.gradient(self.values, self.dx, axis=1)

    def d_xx(self):
        out = np.zeros_like(self.values)
        out[:, 1:-1] = (self.values[:, 2:] - 2.0 * self.values[:, 1:-1] + self.values[:, :-2]) / self.dx**2
        out[:, 0] = out[:, 1]
        out[:, -1] = out[:, -2]
        return out

    def same_grid(self, other: "SpaceTimeField") -> bool:
        return (
            self.t.shape == other.t.shape
            and self.x.shape == other.x.shape
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
        )


# ---------------------------------------------------------------------------
# domain and solver
# ---------------------------------------------------------------------------


def default_domain(model: MfcModel, P: TimeGridFn) -> tuple[float, float]:
    """Box centred at E[xi] that simulated xhat paths leave with tiny probability."""
    solver = RhoSolver(model)
    m = model
    g1 = m.g_fn.sup_bounds()[1]
    a0 = m.a.sup_bounds()[0]
    b0 = m.b.sup_bounds()[0]
    # size of the control at the terminal adjoint mean, as a drift scale
    k_scale = abs(solver.solve(0.5 * g1)) + abs(solver.solve(-0.5 * g1))
    drift = abs(m.A) * (abs(m.init.mean) + 1.0) + a0 + b0 + abs(m.B) * k_scale
    half = 6.0 * m.sigma0 * math.sqrt(m.T) + drift * m.T + 2.0
    return m.init.mean - half, m.init.mean + half


def make_pde_config(model: MfcModel, P: TimeGridFn, nx: int, nt: int | None = None, domain=None,
                    cfl_safety: float = 0.9) -> PdeConfig:
    lo, hi = default_domain(model, P) if domain is None else domain
    return PdeConfig(float(lo), float(hi), int(nx), int(nt if nt is not None else P.K), None, cfl_safety)


def _drift_and_source(model, Pt, x, F, k):
    m = model
    bk = m.b.value(k)
    ax = m.a.value(x)
    a1 = m.a.d1(x)
    v = m.A * x + ax + m.B * k + bk
    s = Pt * (ax + m.B**2 * Pt * x / m.R + m.B * k + bk + a1 * x) + 0.5 * m.q_fn.d1(x) + (m.A + a1) * F
    return v, s


def solve_decoupling_field(model: MfcModel, P: TimeGridFn, cfg: PdeConfig, diffusion_coeff: float | None = None,
                           solver: RhoSolver | None = None, name: str = "phi") -> SpaceTimeField:
    """Backward finite-difference solve; ``diffusion_coeff`` is the squared volatility."""
    model.require_positive_R()
    if diffusion_coeff is None:
        if cfg.diffusion is None:
            raise ModelError("diffusion coefficient not given")
        Dc = cfg.diffusion
        diffusion_coeff = 2.0 * Dc
    else:
        if not diffusion_coeff > 0:
            raise ModelError(f"diffusion coefficient must be positive, got {diffusion_coeff}")
        Dc = 0.5 * diffusion_coeff
    solver = solver or RhoSolver(model)
    T = model.T
    nt, nx = cfg.nt, cfg.nx
    dt = T / nt
    dx = cfg.dx
    x = cfg.x
    t = np.arange(nt + 1) * dt
    t[-1] = T

    vals = np.empty((nt + 1, nx + 1))
    F = 0.5 * model.g_fn.d1(x)
    vals[nt] = F

    # CFL check against the drift of the terminal slice, with headroom
    PT = P.eval(T)
    k = solver.solve(PT * x + F)
    v0, _ = _drift_and_source(model, PT, x, F, k)
    cfg.check_cfl(float(np.max(np.abs(v0))), T)

    # implicit diffusion matrix on nodes 2..nx-2 (nodes 1, nx-1 carry zero curvature)
    m_int = nx - 3
    lam = dt * Dc / dx**2
    ab = np.zeros((3, m_int))
    ab[0, 1:] = -lam
    ab[1, :] = 1.0 + 2.0 * lam
    ab[2, :-1] = -lam

    for n in range(nt - 1, -1, -1):
        Pt = P.eval(t[n + 1])
        k = solver.solve(Pt * x + F, warm=k)
        v, s = _drift_and_source(model, Pt, x, F, k)
        vmax = float(np.max(np.abs(v[1:-1])))
        if dt * vmax > cfg.cfl_safety * dx:
            raise CflError(f"CFL bound violated at t={t[n]:.6g}: dt*|v|/dx = {dt * vmax / dx:.3g}")
        fwd = (F[2:] - F[1:-1]) / dx
        bwd = (F[1:-1] - F[:-2]) / dx
        vi = v[1:-1]
        adv = np.where(vi > 0.0, vi * fwd, vi * bwd)
        rhs = F[1:-1] + dt * (adv + s[1:-1])  # nodes 1..nx-1
        new = np.empty_like(F)
        new[1] = rhs[0]
        new[nx - 1] = rhs[-1]
        b = rhs[1:-1].copy()
        b[0] += lam * new[1]
        b[-1] += lam * new[nx - 1]
        new[2:nx - 1] = solve_banded((1, 1), ab, b)
        new[0] = 2.0 * new[1] - new[2]
        new[nx] = 2.0 * new[nx - 1] - new[nx - 2]
        if not np.all(np.isfinite(new)):
            raise FieldError(f"non-finite field slice at t={t[n]:.6g}")
        vals[n] = new
        F = new
    return SpaceTimeField(t, x, vals, diffusion_coeff, name=name)


def lq_phi_oracle(P: TimeGridFn, Pi: TimeGridFn, x) -> SpaceTimeField:
    """Affine field (Pi(t) - P(t)) x on the time grid of ``P``."""
    if P.K != Pi.K:
        raise ValueError("P and Pi must share a time grid")
    x = np.asarray(x, dtype=float)
    vals = np.outer(Pi.values - P.values, x)
    return SpaceTimeField(P.t, x, vals, diffusion_coeff=0.0, name="lq_oracle")


# ---------------------------------------------------------------------------
# residual of the U equation with U = 2 P(t) x + 2 F(t, xhat)
# ---------------------------------------------------------------------------


def _d_dt_4th(values, dt, axis=0):
    """Fourth-order finite differences along ``axis`` (one-sided at the ends)."""
    f = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    n = f.shape[0]
    if n < 5:
        raise ValueError("need at least 5 time nodes for 4th-order differences")
    out = np.empty_like(f)
    out[2:-2] = (f[:-4] - 8.0 * f[1:-3] + 8.0 * f[3:-1] - f[4:]) / (12.0 * dt)
    out[0] = (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12.0 * dt)
    out[1] = (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]) / (12.0 * dt)
    out[-1] = (25 * f[-1] - 48 * f[-2] + 36 * f[-3] - 16 * f[-4] + 3 * f[-5]) / (12.0 * dt)
    out[-2] = (3 * f[-1] + 10 * f[-2] - 18 * f[-3] + 6 * f[-4] - f[-5]) / (12.0 * dt)
    return np.moveaxis(out, 0, axis)


def _nodal_lookup(grid, pts, what):
    h = (grid[-1] - grid[0]) / (grid.size - 1)
    s = (np.asarray(pts, dtype=float) - grid[0]) / h
    idx = np.rint(s).astype(np.int64)
    if np.any(np.abs(s - idx) > 1e-6) or np.any(idx < 0) or np.any(idx >= grid.size):
        raise FieldError(f"{what} samples must be nodes of the solved grid")
    return idx


def residual_U(model: MfcModel, P: TimeGridFn, fld: SpaceTimeField, t_samples, x_samples, xhat_samples,
               variant: str = "mean_field", N: int | None = None, solver: RhoSolver | None = None):
    """Pointwise residual of the U equation on the product of the samples.

    ``t_samples`` and ``xhat_samples`` must be nodes of the field grid, at
    least two cells inside the space box. In the particle variant the sample
    ``xhat`` plays the part of the empirical mean, so the averages of U_j
    reduce to ``2 P xhat + 2 Psi``. Returns an array of shape
    ``(len(t), len(x), len(xhat))``.
    """
    m = model
    solver = solver or RhoSolver(m)
    if variant == "mean_field":
        D_hat, D_cross, D_xx = m.sigma0**2, m.sigma0**2, m.sigma**2 + m.sigma0**2
    elif variant == "particle":
        if N is None or N < 1:
            raise ModelError("particle variant needs N >= 1")
        D_hat = D_cross = m.sigma**2 / N + m.sigma0**2
        D_xx = m.sigma**2 + m.sigma0**2
    else:
        raise ModelError(f"unknown residual variant {variant!r}")
    if P.K != fld.nt or not np.allclose(P.t, fld.t, rtol=0, atol=1e-12):
        raise FieldError("field and Riccati grids differ")

    it = _nodal_lookup(fld.t, t_samples, "time")
    jx = _nodal_lookup(fld.x, xhat_samples, "xhat")
    if np.any(jx < 2) or np.any(jx > fld.nx - 2):
        raise FieldError("xhat samples must lie at least 2 cells inside the solved domain")
    x = np.asarray(x_samples, dtype=float)

    Pdot = _d_dt_4th(P.values, P.dt)[it][:, None, None]
    Pt = P.values[it][:, None, None]
    Ft = _d_dt_4th(fld.values, fld.dt)[np.ix_(it, jx)][:, None, :]
    F = fld.values[np.ix_(it, jx)][:, None, :]
    Fx = fld.d_x()[np.ix_(it, jx)][:, None, :]
    Fxx = fld.d_xx()[np.ix_(it, jx)][:, None, :]
    xh = fld.x[jx][None, None, :]
    xx = x[None, :, None]

    # U and its derivatives
    U = 2.0 * Pt * xx + 2.0 * F
    U_diag = 2.0 * Pt * xh + 2.0 * F  # U(t, xhat, xhat), also the particle average
    U_t = 2.0 * Pdot * xx + 2.0 * Ft
    U_x = 2.0 * Pt
    U_h = 2.0 * Fx
    U_hh = 2.0 * Fxx
    U_xh = 0.0
    U_xx = 0.0

    k = solver.solve(0.5 * U_diag)
    ctrl = m.B * k + m.b.value(k)
    ah = m.a.value(xh)
    res = (
        U_t
        + U_x * (m.A * xx + ah - 0.5 * m.B**2 / m.R * (U - U_diag) + ctrl)
        + U_h * (m.A * xh + ah + ctrl)
        + 0.5 * D_hat * U_hh
        + D_cross * U_xh
        + 0.5 * D_xx * U_xx
        + 2.0 * m.Q * xx
        + m.q_fn.d1(xh)
        + m.A * U
        + m.a.d1(xh) * U_diag
    )
    return np.broadcast_to(res, (it.size, x.size, jx.size)).copy()


def write_field_csv(path, fld: SpaceTimeField, header: str = "", t_stride: int = 1, x_stride: int = 1) -> None:
    it = np.union1d(np.arange(0, fld.nt + 1, t_stride), [fld.nt])
    jx = np.union1d(np.arange(0, fld.nx + 1, x_stride), [fld.nx])
    ts = fld.t[it]
    xs = fld.x[jx]
    vals = fld.values[np.ix_(it, jx)]
    tt, xx = np.meshgrid(ts, xs, indexing="ij")
    with open(path, "w", newline="") as fh:
        fh.write(header)
        np.savetxt(fh, np.column_stack([tt.ravel(), xx.ravel(), vals.ravel()]), delimiter=",",
                   header="t,xhat,value", comments="", fmt="%.17g")

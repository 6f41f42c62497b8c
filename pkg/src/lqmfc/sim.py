"""Euler-Maruyama simulation of the closed-loop systems and Monte Carlo costs.

Four systems share one time grid ``t_n = n T / n_t`` and one ``NoisePlan``:

* ``xhat``: conditional mean, driven by the common noise only, with mean
  control ``k(t, xhat, Phi(t, xhat))``;
* the mean-field optimal state ``x*`` (conditional terms taken from ``xhat``);
* the N-particle optimal system ``xbar_i`` with field Psi and empirical mean;
* the decentralized system ``x*_i``: N copies of the mean-field feedback whose
  mean-field couplings use the empirical mean ``x^{(N),*}``.

Arrays are laid out as (paths, particles, n_t + 1).
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .feedback import RhoSolver
from .fields import SpaceTimeField
from .model import MfcModel, ModelError
from .noise import NoisePlan
from .riccati import TimeGridFn

__all__ = [
    "EnsembleConfig",
    "TrajectorySet",
    "ClosedLoop",
    "simulate_xhat",
    "simulate_mf",
    "simulate_particles",
    "simulate_decentralized",
    "cost_mf",
    "cost_particles",
    "value_gap",
    "gateaux_check",
    "GateauxResult",
    "vn_gradient_check",
    "trapezoid_weights",
    "chunked_map",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnsembleConfig:
    n_t: int
    N: int = 1
    M0: int = 64
    M1: int = 64

    def __post_init__(self):
        for name in ("n_t", "N", "M0", "M1"):
            if int(getattr(self, name)) < 1:
                raise ModelError(f"{name} must be >= 1")


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """Stored paths of one system.

    ``x`` and ``u`` have shape (paths, particles, n_t + 1). ``xhat`` is the
    conditional-mean path (mean-field and decentralized systems) and ``xbar``
    the empirical particle mean (particle and decentralized systems).
    """

    kind: str
    field_name: str
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    xhat: np.ndarray | None
    xbar: np.ndarray | None
    path_ids: tuple
    N: int

    def feedback_residual(self, model: MfcModel, P: TimeGridFn, fld: SpaceTimeField,
                          solver: RhoSolver | None = None) -> float:
        """Max deviation between stored controls and the generating feedback."""
        kern = ClosedLoop(model, P, self.t.size - 1, solver)
        ref = self.xbar if self.kind == "particles" else self.xhat
        k = kern.k_path(fld, ref)
        u = -kern.BR * kern.P[None, None, :] * (self.x - ref[:, None, :]) + k[:, None, :]
        return float(np.max(np.abs(u - self.u)))

    def rows(self):
        """Long-format rows for the trajectory CSV."""
        ref = self.xbar if self.kind in ("particles", "decentralized") else self.xhat
        n_p, n_i, n_s = self.x.shape
        for a in range(n_p):
            for i in range(n_i):
                for n in range(n_s):
                    yield self.path_ids[a], i, self.t[n], self.x[a, i, n], self.u[a, i, n], ref[a, n]


def trapezoid_weights(n_t: int, dt: float) -> np.ndarray:
    w = np.full(n_t + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def chunked_map(fn, chunks, workers: int = 1):
    """Apply ``fn`` to each chunk, results in chunk order whatever the pool size."""
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


class ClosedLoop:
    """Shared pieces of the feedback laws on a fixed simulation grid."""

    def __init__(self, model: MfcModel, P: TimeGridFn, n_t: int, solver: RhoSolver | None = None):
        model.require_positive_R()
        self.model = model
        self.n_t = int(n_t)
        self.dt = model.T / self.n_t
        self.t = np.arange(self.n_t + 1) * self.dt
        self.t[-1] = model.T
        self.P = np.asarray(P.eval(self.t), dtype=float)
        self.solver = solver or RhoSolver(model)
        self.BR = model.B / model.R
        self.sqw = trapezoid_weights(self.n_t, self.dt)

    def _aligned(self, fld: SpaceTimeField) -> bool:
        return fld.nt == self.n_t and abs(fld.t[-1] - self.model.T) < 1e-12

    def field_at(self, fld: SpaceTimeField, n: int, x):
        if self._aligned(fld):
            return fld.eval_step(n, x)
        return fld.eval(self.t[n], x)

    def field_path(self, fld: SpaceTimeField, x):
        """Field along paths ``x`` of shape (..., n_t + 1)."""
        x = np.asarray(x, dtype=float)
        if self._aligned(fld):
            out = np.empty_like(x)
            for n in range(self.n_t + 1):
                out[..., n] = fld.eval_step(n, x[..., n])
            return out
        return fld.eval(np.broadcast_to(self.t, x.shape), x)

    def k(self, fld: SpaceTimeField, n: int, x):
        return self.solver.solve(self.P[n] * x + self.field_at(fld, n, x))

    def k_path(self, fld: SpaceTimeField, x):
        return self.solver.solve(self.P * x + self.field_path(fld, x))

    # dynamics ----------------------------------------------------------------
    def xhat_paths(self, phi: SpaceTimeField, x0: float, dW0: np.ndarray):
        m = self.model
        n_p = dW0.shape[0]
        xh = np.empty((n_p, self.n_t + 1))
        kh = np.empty((n_p, self.n_t + 1))
        xh[:, 0] = x0
        for n in range(self.n_t):
            kh[:, n] = self.k(phi, n, xh[:, n])
            drift = m.A * xh[:, n] + m.a.value(xh[:, n]) + m.B * kh[:, n] + m.b.value(kh[:, n])
            xh[:, n + 1] = xh[:, n] + drift * self.dt + m.sigma0 * dW0[:, n]
        kh[:, -1] = self.k(phi, self.n_t, xh[:, -1])
        return xh, kh

    def mf_paths(self, xh, kh, x0, dW0, dW):
        """x* with conditional terms from ``xhat``; dW has shape (paths, reps, n_t)."""
        m = self.model
        x = np.empty(dW.shape[:2] + (self.n_t + 1,))
        u = np.empty_like(x)
        x[..., 0] = x0
        for n in range(self.n_t):
            xn = x[..., n]
            u[..., n] = -self.BR * self.P[n] * (xn - xh[:, n, None]) + kh[:, n, None]
            drift = (m.A * xn + m.a.value(xh[:, n])[:, None] + m.B * u[..., n]
                     + m.b.value(kh[:, n])[:, None])
            x[..., n + 1] = xn + drift * self.dt + m.sigma * dW[..., n] + m.sigma0 * dW0[:, n, None]
        u[..., -1] = -self.BR * self.P[-1] * (x[..., -1] - xh[:, -1, None]) + kh[:, -1, None]
        return x, u

    def decentralized_paths(self, xh, kh, x0, dW0, dW):
        m = self.model
        x = np.empty(dW.shape[:2] + (self.n_t + 1,))
        u = np.empty_like(x)
        xbar = np.empty(xh.shape)
        x[..., 0] = x0
        for n in range(self.n_t):
            xn = x[..., n]
            xbar[:, n] = xn.mean(axis=1)
            u[..., n] = -self.BR * self.P[n] * (xn - xh[:, n, None]) + kh[:, n, None]
            ubar = -self.BR * self.P[n] * (xbar[:, n] - xh[:, n]) + kh[:, n]
            drift = m.A * xn + m.a.value(xbar[:, n])[:, None] + m.B * u[..., n] + m.b.value(ubar)[:, None]
            x[..., n + 1] = xn + drift * self.dt + m.sigma * dW[..., n] + m.sigma0 * dW0[:, n, None]
        xbar[:, -1] = x[..., -1].mean(axis=1)
        u[..., -1] = -self.BR * self.P[-1] * (x[..., -1] - xh[:, -1, None]) + kh[:, -1, None]
        return x, u, xbar

    def particle_paths(self, psi, x0, dW0, dW):
        m = self.model
        x = np.empty(dW.shape[:2] + (self.n_t + 1,))
        u = np.empty_like(x)
        xbar = np.empty((dW.shape[0], self.n_t + 1))
        kp = np.empty_like(xbar)
        x[..., 0] = x0
        for n in range(self.n_t):
            xn = x[..., n]
            xbar[:, n] = xn.mean(axis=1)
            kp[:, n] = self.k(psi, n, xbar[:, n])
            u[..., n] = -self.BR * self.P[n] * (xn - xbar[:, n, None]) + kp[:, n, None]
            drift = (m.A * xn + m.a.value(xbar[:, n])[:, None] + m.B * u[..., n]
                     + m.b.value(kp[:, n])[:, None])
            x[..., n + 1] = xn + drift * self.dt + m.sigma * dW[..., n] + m.sigma0 * dW0[:, n, None]
        xbar[:, -1] = x[..., -1].mean(axis=1)
        kp[:, -1] = self.k(psi, self.n_t, xbar[:, -1])
        u[..., -1] = -self.BR * self.P[-1] * (x[..., -1] - xbar[:, -1, None]) + kp[:, -1, None]
        return x, u, xbar, kp

    # costs -------------------------------------------------------------------
    def running_cost(self, x, u, mean_x, mean_u):
        """Per-path cost with explicit conditional terms; x, u of shape (paths, reps, n_t+1)."""
        m = self.model
        run = (m.Q * x**2 + m.R * u**2 + m.q_fn.value(mean_x)[:, None, :] + m.r_fn.value(mean_u)[:, None, :])
        return run @ self.sqw + m.G * x[..., -1] ** 2 + m.g_fn.value(mean_x[:, -1])[:, None]


def _paths(path_ids) -> list[int]:
    if isinstance(path_ids, (int, np.integer)):
        return [int(path_ids)]
    return [int(p) for p in path_ids]


def _check_plan(model: MfcModel, plan: NoisePlan):
    if abs(plan.T - model.T) > 1e-12:
        raise ModelError("noise plan horizon differs from the model horizon")


def simulate_xhat(model, P, phi, plan: NoisePlan, w0_index, solver=None):
    """Conditional-mean paths for the given common indices; returns (xhat, k)."""
    _check_plan(model, plan)
    kern = ClosedLoop(model, P, plan.n_t, solver)
    ids = _paths(w0_index)
    return kern.xhat_paths(phi, model.init.mean, plan.common_block(ids))


def simulate_mf(model, P, phi, plan: NoisePlan, w0_index, n_rep: int = 1, solver=None) -> TrajectorySet:
    """Mean-field optimal states; replicate ``i`` of common path ``m`` uses streams (m, i)."""
    _check_plan(model, plan)
    kern = ClosedLoop(model, P, plan.n_t, solver)
    ids = _paths(w0_index)
    dW0 = plan.common_block(ids)
    xh, kh = kern.xhat_paths(phi, model.init.mean, dW0)
    x0 = plan.init_block(model.init, ids, n_rep)
    x, u = kern.mf_paths(xh, kh, x0, dW0, plan.idio_block(ids, n_rep))
    return TrajectorySet("mf", phi.name, kern.t, x, u, xh, None, tuple(ids), 1)


def simulate_particles(model, P, psi, N: int, plan: NoisePlan, w0_index, solver=None) -> TrajectorySet:
    _check_plan(model, plan)
    if psi.name.startswith("psi_N") and psi.name != f"psi_N{N}":
        raise ModelError(f"field {psi.name} does not match N={N}")
    kern = ClosedLoop(model, P, plan.n_t, solver)
    ids = _paths(w0_index)
    dW0 = plan.common_block(ids)
    x0 = plan.init_block(model.init, ids, N)
    x, u, xbar, _ = kern.particle_paths(psi, x0, dW0, plan.idio_block(ids, N))
    return TrajectorySet("particles", psi.name, kern.t, x, u, None, xbar, tuple(ids), N)


def simulate_decentralized(model, P, phi, N: int, plan: NoisePlan, w0_index, xhat=None,
                           solver=None) -> TrajectorySet:
    _check_plan(model, plan)
    kern = ClosedLoop(model, P, plan.n_t, solver)
    ids = _paths(w0_index)
    dW0 = plan.common_block(ids)
    xh, kh = kern.xhat_paths(phi, model.init.mean, dW0)
    if xhat is not None and not np.array_equal(np.asarray(xhat).reshape(xh.shape), xh):
        raise ModelError("supplied xhat path was not generated from the same common stream")
    x0 = plan.init_block(model.init, ids, N)
    x, u, xbar = kern.decentralized_paths(xh, kh, x0, dW0, plan.idio_block(ids, N))
    return TrajectorySet("decentralized", phi.name, kern.t, x, u, xh, xbar, tuple(ids), N)


# ---------------------------------------------------------------------------
# costs and values
# ---------------------------------------------------------------------------


def _mean_se(v):
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise ModelError("no samples")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


def cost_mf(model, P, phi, cfg: EnsembleConfig, plan: NoisePlan, workers: int = 1, solver=None):
    """Nested Monte Carlo estimate of the mean-field cost; returns (J, stderr)."""
    _check_plan(model, plan)
    kern = ClosedLoop(model, P, plan.n_t, solver)
    chunk = max(1, 4096 // cfg.M1)
    ids = list(range(cfg.M0))
    chunks = [ids[s:s + chunk] for s in range(0, len(ids), chunk)]

    def one(c):
        dW0 = plan.common_block(c)
        xh, kh = kern.xhat_paths(phi, model.init.mean, dW0)
        x0 = plan.init_block(model.init, c, cfg.M1)
        x, u = kern.mf_paths(xh, kh, x0, dW0, plan.idio_block(c, cfg.M1))
        return kern.running_cost(x, u, xh, kh)

    return _mean_se(np.concatenate(chunked_map(one, chunks, workers), axis=0))


def particle_costs(model, traj: TrajectorySet, kern: ClosedLoop | None = None):
    """Per-path average particle cost with empirical means in q, r, g."""
    if traj.x.size == 0:
        raise ModelError("empty trajectory set")
    m = model
    n_t = traj.t.size - 1
    w = trapezoid_weights(n_t, m.T / n_t)
    xbar = traj.x.mean(axis=1)
    ubar = traj.u.mean(axis=1)
    run = m.Q * traj.x**2 + m.R * traj.u**2
    per = run @ w + m.G * traj.x[..., -1] ** 2
    mean_part = (m.q_fn.value(xbar) + m.r_fn.value(ubar)) @ w + m.g_fn.value(xbar[:, -1])
    return per.mean(axis=1) + mean_part


def cost_particles(model, trajectories: TrajectorySet):
    """Average cost over particles and paths; returns (estimate, stderr over paths)."""
    return _mean_se(particle_costs(model, trajectories))


def value_gap_paths(kern: ClosedLoop, phi, psi, xbar):
    """Per-path integrand of the shared-trajectory value gap and sup |Phi - Psi|^2."""
    m = kern.model
    fphi = kern.field_path(phi, xbar)
    fpsi = kern.field_path(psi, xbar)
    kphi = kern.solver.solve(kern.P * xbar + fphi)
    kpsi = kern.solver.solve(kern.P * xbar + fpsi)
    integrand = m.R * (kphi**2 - kpsi**2) + m.r_fn.value(kphi) - m.r_fn.value(kpsi)
    return integrand @ kern.sqw, np.max((fphi - fpsi) ** 2, axis=-1), kphi, kpsi


def value_gap(model, P, phi, psi, N: int, cfg: EnsembleConfig, plan: NoisePlan, workers: int = 1, solver=None):
    """Signed gap V - V^N along particle trajectories.

    Returns ``(gap, stderr, field_gap, field_gap_stderr)`` where the field gap
    is E sup_t |Phi - Psi|^2 along the empirical mean.
    """
    _check_plan(model, plan)
    if not phi.same_grid(psi):
        raise ModelError("Phi and Psi must be solved on the same grid")
    kern = ClosedLoop(model, P, plan.n_t, solver)
    chunk = max(1, 4096 // N)
    ids = list(range(cfg.M0))
    chunks = [ids[s:s + chunk] for s in range(0, len(ids), chunk)]

    def one(c):
        dW0 = plan.common_block(c)
        x0 = plan.init_block(model.init, c, N)
        _, _, xbar, _ = kern.particle_paths(psi, x0, dW0, plan.idio_block(c, N))
        gap, fg, _, _ = value_gap_paths(kern, phi, psi, xbar)
        return gap, fg

    res = chunked_map(one, chunks, workers)
    gap = np.concatenate([r[0] for r in res])
    fg = np.concatenate([r[1] for r in res])
    return (*_mean_se(gap), *_mean_se(fg))


# ---------------------------------------------------------------------------
# optimality checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateauxResult:
    J: float
    J_stderr: float
    derivatives: np.ndarray
    derivative_stderr: np.ndarray
    eps: float
    n_paths: int

    @property
    def bound(self) -> float:
        return 0.02 * (1.0 + abs(self.J))

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.derivatives) <= self.bound))


def perturbation_directions(plan: NoisePlan, count: int, pieces: int = 8) -> np.ndarray:
    """Deterministic piecewise-constant directions with values in [-1, 1]."""
    out = np.empty((count, plan.n_t + 1))
    edges = np.minimum((np.arange(plan.n_t + 1) * pieces) // plan.n_t, pieces - 1)
    for d in range(count):
        levels = plan.generator("perturb", d).uniform(-1.0, 1.0, pieces)
        out[d] = levels[edges]
    return out


def _open_loop_cost(kern: ClosedLoop, u, x0, dW0, dW):
    """Cost of an open-loop control under the dynamics with sub-ensemble means.

    ``u`` has shape (paths, reps, n_t + 1); the conditional expectations are
    replaced by averages over the ``reps`` axis.
    """
    m = kern.model
    x = np.empty_like(u)
    x[..., 0] = x0
    ubar = u.mean(axis=1)
    for n in range(kern.n_t):
        xn = x[..., n]
        xb = xn.mean(axis=1)
        drift = m.A * xn + m.a.value(xb)[:, None] + m.B * u[..., n] + m.b.value(ubar[:, n])[:, None]
        x[..., n + 1] = xn + drift * kern.dt + m.sigma * dW[..., n] + m.sigma0 * dW0[:, n, None]
    xbar = x.mean(axis=1)
    return kern.running_cost(x, u, xbar, ubar)


def gateaux_check(model, P, phi, directions: int, eps: float, cfg: EnsembleConfig, plan: NoisePlan,
                  workers: int = 1, solver=None, feedback_P: TimeGridFn | None = None) -> GateauxResult:
    """Central differences of the cost along deterministic control perturbations.

    The closed-loop control is recorded pathwise and then perturbed as an
    open-loop process; all evaluations reuse the same noise. ``feedback_P``
    replaces P inside the feedback law only (used for contrast runs).
    """
    if not eps > 0:
        raise ModelError("eps must be positive")
    if cfg.M0 * cfg.M1 < 100:
        raise ModelError("gateaux_check needs at least 100 paths")
    _check_plan(model, plan)
    fb = ClosedLoop(model, feedback_P or P, plan.n_t, solver)
    kern = ClosedLoop(model, P, plan.n_t, fb.solver)
    dirs = perturbation_directions(plan, directions)
    chunk = max(1, 8192 // cfg.M1)
    ids = list(range(cfg.M0))
    chunks = [ids[s:s + chunk] for s in range(0, len(ids), chunk)]

    def one(c):
        dW0 = plan.common_block(c)
        dW = plan.idio_block(c, cfg.M1)
        x0 = plan.init_block(model.init, c, cfg.M1)
        xh, kh = fb.xhat_paths(phi, model.init.mean, dW0)
        _, u = fb.mf_paths(xh, kh, x0, dW0, dW)
        base = _open_loop_cost(kern, u, x0, dW0, dW)
        diffs = []
        for d in dirs:
            jp = _open_loop_cost(kern, u + eps * d, x0, dW0, dW)
            jm = _open_loop_cost(kern, u - eps * d, x0, dW0, dW)
            # conditional terms couple the reps of a common path, so the
            # independent unit is the common path
            diffs.append(((jp - jm) / (2.0 * eps)).mean(axis=1))
        return base.mean(axis=1), np.stack(diffs, axis=1)

    res = chunked_map(one, chunks, workers)
    base = np.concatenate([r[0] for r in res])
    der = np.concatenate([r[1] for r in res], axis=0)
    J, Jse = _mean_se(base)
    means = der.mean(axis=0)
    ses = der.std(axis=0, ddof=1) / np.sqrt(der.shape[0]) if der.shape[0] > 1 else np.full(directions, np.nan)
    return GateauxResult(J, Jse, means, ses, eps, cfg.M0 * cfg.M1)


def vn_gradient_check(model, P, psi, N: int, t0: float, X0, i: int, h: float, M: int, plan: NoisePlan,
                      solver=None):
    """Compare a CRN finite difference of V^N(t0, .) in x_i with (2 P x_i + 2 Psi(t0, mean)) / N.

    Returns ``(discrepancy, fd, fd_stderr, predicted)``.
    """
    _check_plan(model, plan)
    X0 = np.asarray(X0, dtype=float).ravel()
    if X0.size != N:
        raise ModelError(f"X0 must have {N} entries")
    if not 0 <= i < N:
        raise ModelError("particle index out of range")
    if not h > 0:
        raise ModelError("h must be positive")
    kern = ClosedLoop(model, P, plan.n_t, solver)
    n0 = int(round(t0 / kern.dt))
    if abs(n0 * kern.dt - t0) > 1e-9 or not 0 <= n0 < kern.n_t:
        raise ModelError("t0 must be a simulation grid time before T")
    ids = list(range(M))
    dW0 = plan.common_block(ids)
    dW = plan.idio_block(ids, N)
    sub = ClosedLoop(model.replace(T=model.T - kern.t[n0]), _shift(kern, n0), kern.n_t - n0, kern.solver)
    psi_s = _shift_field(psi, n0) if psi.nt == kern.n_t else psi

    def value(X):
        x0 = np.broadcast_to(X, (M, N))
        x, u, xbar, kp = sub.particle_paths(psi_s, x0, dW0[:, n0:], dW[..., n0:])
        traj = TrajectorySet("particles", psi.name, sub.t, x, u, None, xbar, tuple(ids), N)
        return particle_costs(sub.model, traj)

    e = np.zeros(N)
    e[i] = h
    diff = (value(X0 + e) - value(X0 - e)) / (2.0 * h)
    fd, se = _mean_se(diff)
    pred = (2.0 * kern.P[n0] * X0[i] + 2.0 * float(kern.field_at(psi, n0, X0.mean()))) / N
    disc = abs(fd - pred)
    if se > abs(fd):
        warnings.warn("finite-difference estimate is dominated by Monte Carlo noise; increase h or M",
                      RuntimeWarning, stacklevel=2)
    return disc, fd, se, pred


def _shift(kern: ClosedLoop, n0: int) -> TimeGridFn:
    # P on the simulation grid, restricted to [t0, T] and re-based to start at 0
    return TimeGridFn(kern.t[n0:] - kern.t[n0], kern.P[n0:])


def _shift_field(fld: SpaceTimeField, n0: int) -> SpaceTimeField:
    return SpaceTimeField(fld.t[n0:] - fld.t[n0], fld.x, fld.values[n0:], fld.diffusion_coeff, fld.name)

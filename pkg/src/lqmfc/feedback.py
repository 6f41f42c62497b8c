"""Implicit feedback map rho and the composite map k(t, x, y) = rho(P(t) x + y).

For a given adjoint mean ``yh`` the optimal mean control is the root of

    F(u; yh) = R u + r'(u)/2 + B yh + b'(u) yh.

With ``R > 0`` and bounded ``r', b'`` the map ``u -> F`` tends to -inf/+inf at
the two ends, and the uniform bound on ``|dF/du|`` makes the root unique.
The solver is a Newton iteration safeguarded by bisection on a bracket that
is grown until it changes sign. Everything is vectorised over ``yh``; every
element follows its own iteration, so the result for a given ``yh`` does not
depend on what else is in the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MfcModel, ModelError

__all__ = [
    "RhoError",
    "RhoSolver",
    "rho",
    "rho_prime",
    "k_map",
    "lq_rho",
    "lq_rho_prime",
]

_BRACKET_LIMIT = 1e6


class RhoError(ArithmeticError):
    """Root of the implicit feedback equation could not be located."""


@dataclass(frozen=True)
class RhoSolver:
    model: MfcModel
    tol: float = 1e-12
    max_iter: int = 100
    eps0: float = 1e-3

    def __post_init__(self):
        if not self.tol > 0:
            raise ModelError("tol must be positive")
        if self.max_iter < 1:
            raise ModelError("max_iter must be >= 1")
        self.model.require_positive_R()

    # F and dF/du -------------------------------------------------------------
    def residual(self, u, yh):
        m = self.model
        return m.R * u + 0.5 * m.r_fn.d1(u) + m.B * yh + m.b.d1(u) * yh

    def slope(self, u, yh):
        m = self.model
        return m.R + 0.5 * m.r_fn.d2(u) + yh * m.b.d2(u)

    # root --------------------------------------------------------------------
    def solve(self, yh, warm=None):
        """Return rho(yh) for scalar or array ``yh``.

        ``warm`` is an optional starting guess of the same shape; it only
        changes the Newton path, not the bracket.
        """
        y = np.asarray(yh, dtype=float)
        scalar = y.ndim == 0
        y = np.atleast_1d(y).ravel()
        if not np.all(np.isfinite(y)):
            raise RhoError("non-finite adjoint value passed to rho")
        m = self.model
        u0 = -m.B * y / m.R
        lo, hi = self._bracket(u0, y)
        if warm is None:
            u = u0.copy()
        else:
            u = np.atleast_1d(np.asarray(warm, dtype=float)).ravel().copy()
            bad = ~((u > lo) & (u < hi))
            u[bad] = u0[bad]
        u = self._newton(u, y, lo, hi)
        if scalar:
            return float(u[0])
        return u.reshape(np.shape(yh))

    def _bracket(self, u0, y):
        m = self.model
        w = np.maximum(1.0, 2.0 * np.abs(m.B * y / m.R))
        lo = u0 - w
        hi = u0 + w
        todo = np.ones(y.size, dtype=bool)
        while True:
            idx = np.flatnonzero(todo)
            if idx.size == 0:
                return lo, hi
            flo = self.residual(lo[idx], y[idx])
            fhi = self.residual(hi[idx], y[idx])
            ok = (flo <= 0.0) & (fhi >= 0.0)
            todo[idx[ok]] = False
            grow = idx[~ok]
            if grow.size == 0:
                return lo, hi
            w[grow] *= 2.0
            lo[grow] = u0[grow] - w[grow]
            hi[grow] = u0[grow] + w[grow]
            if np.any(np.abs(lo[grow]) > _BRACKET_LIMIT) or np.any(np.abs(hi[grow]) > _BRACKET_LIMIT):
                j = grow[np.argmax(w[grow])]
                raise RhoError(
                    f"no sign change of the feedback equation within |u| <= {_BRACKET_LIMIT:g} "
                    f"(yhat={y[j]:.6g}); check R > 0 and the curvature assumption"
                )

    def _newton(self, u, y, lo, hi):
        active = np.arange(y.size)
        for _ in range(self.max_iter):
            uu, yy = u[active], y[active]
            f = self.residual(uu, yy)
            l, h = lo[active], hi[active]
            width = h - l
            done = (np.abs(f) <= self.tol) | (width <= 4.0 * np.spacing(np.maximum(np.abs(l), np.abs(h))))
            # shrink the bracket with the new point
            neg = f < 0.0
            l = np.where(neg, uu, l)
            h = np.where(neg, h, uu)
            df = self.slope(uu, yy)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = uu - f / df
            inside = np.isfinite(step) & (step > l) & (step < h)
            step = np.where(inside, step, 0.5 * (l + h))
            keep = ~done
            lo[active] = np.where(keep, l, lo[active])
            hi[active] = np.where(keep, h, hi[active])
            u[active[keep]] = step[keep]
            active = active[keep]
            if active.size == 0:
                return u
        j = active[0]
        raise RhoError(f"Newton iteration for rho did not converge in {self.max_iter} steps (yhat={y[j]:.6g})")

    def derivative(self, yh, u=None):
        """rho'(yh) by implicit differentiation of F(rho(yh); yh) = 0."""
        if u is None:
            u = self.solve(yh)
        m = self.model
        den = self.slope(u, np.asarray(yh, dtype=float))
        if np.any(np.abs(den) < self.eps0):
            raise RhoError(f"curvature denominator below {self.eps0:g} in rho'")
        out = -(m.B + m.b.d1(u)) / den
        return float(out) if np.ndim(out) == 0 else out


def rho(solver: RhoSolver, yh, warm=None):
    return solver.solve(yh, warm)


def rho_prime(solver: RhoSolver, yh):
    return solver.derivative(yh)


def k_map(solver: RhoSolver, P, t, x, y, warm=None):
    """k(t, x, y) = rho(P(t) x + y); ``P`` is a TimeGridFn or a number."""
    Pt = P.eval(t) if hasattr(P, "eval") else P
    return solver.solve(np.multiply(Pt, x) + y, warm)


def lq_rho(R: float, Rbar: float, B: float, Bbar: float, yh):
    return -(B + Bbar) / (R + Rbar) * np.asarray(yh, dtype=float)


def lq_rho_prime(R: float, Rbar: float, B: float, Bbar: float) -> float:
    return -(B + Bbar) / (R + Rbar)


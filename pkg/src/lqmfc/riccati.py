"""Backward scalar Riccati solvers.

Both P and the LQ aggregate Pi satisfy an ODE of the form

    p' + 2 A p + Q - c p^2 = 0,   p(T) = G,

with ``c = B^2 / R`` (resp. the barred sums). The solver steps backward in
time with classical RK4 on a uniform grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import AssumptionError, MfcModel, ModelError

__all__ = ["RiccatiBlowUp", "TimeGridFn", "solve_P", "solve_Pi", "riccati_backward", "write_riccati_csv"]


class RiccatiBlowUp(ArithmeticError):
    """The backward integration produced a non-finite value."""

    def __init__(self, t: float):
        super().__init__(f"Riccati solution became non-finite at t={t:.6g}")
        self.t = t


@dataclass(frozen=True, eq=False)
class TimeGridFn:
    """Nodal values on a uniform grid ``t_k = k T / K`` with linear interpolation."""

    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.shape != v.shape or t.ndim != 1 or t.size < 2:
            raise ValueError("TimeGridFn needs matching 1-d arrays with >= 2 nodes")
        if not np.all(np.isfinite(v)):
            raise ValueError("TimeGridFn values must be finite")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)

    @property
    def K(self) -> int:
        return self.t.size - 1

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @property
    def dt(self) -> float:
        return self.T / self.K

    def eval(self, t):
        """Linear interpolation; the node values are returned exactly."""
        t = np.asarray(t, dtype=float)
        s = t / self.dt
        k = np.clip(np.floor(s).astype(np.int64), 0, self.K - 1)
        w = s - k
        out = (1.0 - w) * self.values[k] + w * self.values[k + 1]
        # exact node hits, including t = T
        out = np.where(w == 0.0, self.values[k], out)
        out = np.where(w == 1.0, self.values[np.minimum(k + 1, self.K)], out)
        return float(out) if out.ndim == 0 else out

    __call__ = eval


def riccati_backward(A: float, Q: float, c: float, G: float, T: float, K: int) -> TimeGridFn:
    """RK4 for ``p' = c p^2 - 2 A p - Q`` integrated from ``p(T) = G`` down to 0."""
    if K < 10:
        raise ModelError(f"K must be >= 10, got {K}")
    K = int(K)
    h = T / K

    def rhs(p):
        return c * p * p - 2.0 * A * p - Q

    vals = [0.0] * (K + 1)
    p = float(G)
    vals[K] = p
    for k in range(K, 0, -1):
        # stepping with -h
        k1 = rhs(p)
        k2 = rhs(p - 0.5 * h * k1)
        k3 = rhs(p - 0.5 * h * k2)
        k4 = rhs(p - h * k3)
        p = p - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not math.isfinite(p):
            raise RiccatiBlowUp((k - 1) * h)
        vals[k - 1] = p
    t = np.arange(K + 1) * h
    t[-1] = T
    return TimeGridFn(t, np.array(vals))


def solve_P(model: MfcModel, K: int) -> TimeGridFn:
    model.require_positive_R()
    return riccati_backward(model.A, model.Q, model.B**2 / model.R, model.G, model.T, K)


def solve_Pi(A, Abar, B, Bbar, Q, Qbar, R, Rbar, G, Gbar, T, K) -> TimeGridFn:
    if not R + Rbar > 0:
        raise AssumptionError(f"R + Rbar must be positive, got {R + Rbar}")
    if Q + Qbar < 0 or G + Gbar < 0:
        raise AssumptionError("Q + Qbar and G + Gbar must be non-negative")
    return riccati_backward(A + Abar, Q + Qbar, (B + Bbar) ** 2 / (R + Rbar), G + Gbar, T, K)


def write_riccati_csv(path, P: TimeGridFn, Pi: TimeGridFn | None = None, header: str = "") -> None:
    cols = [P.t, P.values]
    names = "t,P"
    if Pi is not None:
        cols.append(Pi.values)
        names += ",Pi"
    with open(path, "w", newline="") as fh:
        fh.write(header)
        np.savetxt(fh, np.column_stack(cols), delimiter=",", header=names, comments="", fmt="%.17g")

"""scikit-learn style wrapper around the solved feedback law.

``fit`` solves P and the decoupling field (Phi, or Psi when ``N`` is set);
``predict`` maps rows ``[t, x, m]`` to the optimal control

    u = -R^{-1} B P(t) (x - m) + k(t, m, F(t, m)),

where ``m`` is the conditional mean (mean field) or the empirical mean
(N particles). ``transform`` returns the adjoint mean ``P(t) m + F(t, m)``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .feedback import RhoSolver
from .fields import make_pde_config, solve_decoupling_field
from .model import MfcModel
from .riccati import solve_P

__all__ = ["MeanFieldFeedback"]


class MeanFieldFeedback(BaseEstimator):
    def __init__(self, model=None, K=1000, nx=400, domain=None, N=None, tol=1e-12):
        self.model = model
        self.K = K
        self.nx = nx
        self.domain = domain
        self.N = N
        self.tol = tol

    def _model(self) -> MfcModel:
        if isinstance(self.model, MfcModel):
            return self.model
        if isinstance(self.model, dict):
            return MfcModel.from_dict(self.model)
        raise ValueError("model must be an MfcModel or a model dict")

    def fit(self, X=None, y=None):
        """Solve the Riccati equation and the field; ``X`` and ``y`` are ignored."""
        m = self._model()
        if self.N is not None and int(self.N) < 1:
            raise ValueError("N must be a positive integer or None")
        self.model_ = m
        self.solver_ = RhoSolver(m, tol=self.tol)
        self.P_ = solve_P(m, int(self.K))
        cfg = make_pde_config(m, self.P_, int(self.nx), int(self.K), self.domain)
        coeff = m.sigma0**2 if self.N is None else m.sigma**2 / int(self.N) + m.sigma0**2
        name = "phi" if self.N is None else f"psi_N{int(self.N)}"
        self.field_ = solve_decoupling_field(m, self.P_, cfg, coeff, self.solver_, name=name)
        self.n_features_in_ = 3
        return self

    def _check(self, X):
        check_is_fitted(self, "field_")
        X = check_array(X, dtype=float, ensure_min_features=3)
        if X.shape[1] != 3:
            raise ValueError(f"expected 3 columns [t, x, mean], got {X.shape[1]}")
        if np.any(X[:, 0] < 0) or np.any(X[:, 0] > self.model_.T):
            raise ValueError("times must lie in [0, T]")
        return X

    def transform(self, X):
        X = self._check(X)
        t, m = X[:, 0], X[:, 2]
        return self.P_.eval(t) * m + self.field_.eval(t, m)

    def predict(self, X):
        X = self._check(X)
        t, x, mean = X[:, 0], X[:, 1], X[:, 2]
        Pt = self.P_.eval(t)
        k = self.solver_.solve(Pt * mean + self.field_.eval(t, mean))
        mm = self.model_
        return -mm.B / mm.R * Pt * (x - mean) + k

"""Problem data for the LQ mean field control problem.

The state of a representative particle follows

    dx = [A x + a(E[x|F0]) + B u + b(E[u|F0])] dt + sigma dW + sigma0 dW0

and pays

    E[ int Q x^2 + q(E[x|F0]) + R u^2 + r(E[u|F0]) dt + G x(T)^2 + g(E[x(T)|F0]) ].

The five couplings ``a, b, q, r, g`` come from a closed catalog of scalar
functions with analytic first and second derivatives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

__all__ = [
    "ModelError",
    "AssumptionError",
    "ScalarC2Fn",
    "catalog_make",
    "fn_from_spec",
    "InitialLaw",
    "MfcModel",
    "AssumptionEntry",
    "AssumptionReport",
    "validate_assumptions",
    "CATALOG_KINDS",
]


class ModelError(ValueError):
    """Invalid problem data (unknown function kind, bad parameters, ...)."""


class AssumptionError(ModelError):
    """Hard precondition of the solvers is violated (R <= 0)."""


CATALOG_KINDS = (
    "zero",
    "constant",
    "affine",
    "quadratic",
    "sin",
    "cos",
    "tanh",
    "neg_logistic",
    "scaled_sum",
)

# kinds whose value or derivatives are unbounded on R
_ORACLE_ONLY = frozenset({"affine", "quadratic"})

# sup |d/dx (2 sech^2 tanh)| is attained at tanh^2 = 1/3
_TANH_D2_SUP = 4.0 / (3.0 * math.sqrt(3.0))
# sup |sigma''| for the logistic sigmoid
_LOGISTIC_D2_SUP = 1.0 / (6.0 * math.sqrt(3.0))

_PARAM_DEFAULTS: dict[str, dict[str, float]] = {
    "zero": {},
    "constant": {"c": 0.0},
    "affine": {"slope": 1.0, "intercept": 0.0},
    "quadratic": {"coef": 1.0},
    "sin": {"amplitude": 1.0, "frequency": 1.0, "phase": 0.0},
    "cos": {"amplitude": 1.0, "frequency": 1.0, "phase": 0.0},
    "tanh": {"amplitude": 1.0, "scale": 1.0},
    "neg_logistic": {"amplitude": 1.0, "scale": 1.0},
}


def _logistic(z):
    # 1/(1+exp(-z)) without overflow warnings for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class ScalarC2Fn:
    """A catalog function R -> R with analytic derivatives.

    Evaluation is vectorised: scalars and numpy arrays are both accepted.
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    # -- evaluation -------------------------------------------------------
    def value(self, x):
        return self._eval(x, 0)

    def d1(self, x):
        return self._eval(x, 1)

    def d2(self, x):
        return self._eval(x, 2)

    __call__ = value

    def _eval(self, x, order: int):
        x = np.asarray(x, dtype=float)
        p = self.params
        kind = self.kind
        if kind == "zero":
            out = np.zeros_like(x)
        elif kind == "constant":
            out = np.full_like(x, p["c"]) if order == 0 else np.zeros_like(x)
        elif kind == "affine":
            if order == 0:
                out = p["slope"] * x + p["intercept"]
            elif order == 1:
                out = np.full_like(x, p["slope"])
            else:
                out = np.zeros_like(x)
        elif kind == "quadratic":
            c = p["coef"]
            out = (c * x * x, 2.0 * c * x, np.full_like(x, 2.0 * c))[order]
        elif kind in ("sin", "cos"):
            amp, w, ph = p["amplitude"], p["frequency"], p["phase"]
            z = w * x + ph
            if kind == "sin":
                out = (np.sin(z), w * np.cos(z), -w * w * np.sin(z))[order]
            else:
                out = (np.cos(z), -w * np.sin(z), -w * w * np.cos(z))[order]
            out = amp * out
        elif kind == "tanh":
            amp, s = p["amplitude"], p["scale"]
            th = np.tanh(s * x)
            sech2 = 1.0 - th * th
            out = amp * (th, s * sech2, -2.0 * s * s * sech2 * th)[order]
        elif kind == "neg_logistic":
            # -amp / (exp(s x) + 1) = -amp * logistic(-s x)
            amp, s = p["amplitude"], p["scale"]
            sig = _logistic(-s * x)
            if order == 0:
                out = -amp * sig
            elif order == 1:
                out = amp * s * sig * (1.0 - sig)
            else:
                out = -amp * s * s * sig * (1.0 - sig) * (1.0 - 2.0 * sig)
        elif kind == "scaled_sum":
            out = np.zeros_like(x)
            for scale, fn in p["terms"]:
                out = out + scale * fn._eval(x, order)
        else:  # pragma: no cover - guarded by catalog_make
            raise ModelError(f"unknown function kind {kind!r}")
        if out.ndim == 0:
            return float(out)
        return out

    # -- catalog metadata --------------------------------------------------
    @property
    def oracle_only(self) -> bool:
        """True for kinds that violate the boundedness assumption."""
        if self.kind == "scaled_sum":
            return any(fn.oracle_only for s, fn in self.params["terms"] if s != 0.0)
        return self.kind in _ORACLE_ONLY

    def sup_bounds(self) -> tuple[float, float, float]:
        """Upper bounds for sup|f|, sup|f'|, sup|f''| (inf when unbounded)."""
        p = self.params
        kind = self.kind
        if kind == "zero":
            return 0.0, 0.0, 0.0
        if kind == "constant":
            return abs(p["c"]), 0.0, 0.0
        if kind == "affine":
            s = abs(p["slope"])
            return (math.inf if s else abs(p["intercept"])), s, 0.0
        if kind == "quadratic":
            c = abs(p["coef"])
            return (math.inf, math.inf, 2 * c) if c else (0.0, 0.0, 0.0)
        if kind in ("sin", "cos"):
            amp, w = abs(p["amplitude"]), p["frequency"]
            return amp, amp * w, amp * w * w
        if kind == "tanh":
            amp, s = abs(p["amplitude"]), p["scale"]
            return amp, amp * s, amp * s * s * _TANH_D2_SUP
        if kind == "neg_logistic":
            amp, s = abs(p["amplitude"]), p["scale"]
            return amp, 0.25 * amp * s, amp * s * s * _LOGISTIC_D2_SUP
        if kind == "scaled_sum":
            tot = [0.0, 0.0, 0.0]
            for scale, fn in p["terms"]:
                if scale == 0.0:
                    continue
                for j, bnd in enumerate(fn.sup_bounds()):
                    tot[j] += abs(scale) * bnd
            return tot[0], tot[1], tot[2]
        raise ModelError(f"unknown function kind {kind!r}")  # pragma: no cover

    def to_spec(self) -> dict:
        if self.kind == "scaled_sum":
            terms = [{"scale": s, "fn": fn.to_spec()} for s, fn in self.params["terms"]]
            return {"kind": "scaled_sum", "params": {"terms": terms}}
        return {"kind": self.kind, "params": dict(self.params)}


def catalog_make(kind: str, params: Mapping[str, Any] | None = None) -> ScalarC2Fn:
    """Build a catalog function, filling defaults and checking parameter ranges.

    ``scaled_sum`` takes ``{"terms": [(scale, ScalarC2Fn), ...]}``; the terms
    may also be given as ``{"scale": s, "fn": {...}}`` mappings.
    """
    if kind not in CATALOG_KINDS:
        raise ModelError(f"unknown function kind {kind!r}; expected one of {CATALOG_KINDS}")
    params = dict(params or {})
    if kind == "scaled_sum":
        raw = params.pop("terms", None)
        if params:
            raise ModelError(f"scaled_sum: unexpected parameters {sorted(params)}")
        if not raw:
            raise ModelError("scaled_sum needs a non-empty 'terms' list")
        terms = []
        for term in raw:
            if isinstance(term, Mapping):
                scale, fn = term.get("scale", 1.0), term["fn"]
            else:
                scale, fn = term
            if not isinstance(fn, ScalarC2Fn):
                fn = fn_from_spec(fn)
            terms.append((_finite(scale, "scaled_sum scale"), fn))
        return ScalarC2Fn("scaled_sum", {"terms": tuple(terms)})

    defaults = _PARAM_DEFAULTS[kind]
    unknown = set(params) - set(defaults)
    if unknown:
        raise ModelError(f"{kind}: unexpected parameters {sorted(unknown)}")
    full = {k: _finite(params.get(k, v), f"{kind}.{k}") for k, v in defaults.items()}
    for key in ("frequency", "scale"):
        if key in full and full[key] <= 0.0:
            raise ModelError(f"{kind}: {key} must be positive, got {full[key]}")
    return ScalarC2Fn(kind, full)


def fn_from_spec(spec: Mapping[str, Any] | str) -> ScalarC2Fn:
    """Parse ``{"kind": ..., "params": {...}}`` (or a bare kind string)."""
    if isinstance(spec, str):
        return catalog_make(spec)
    if not isinstance(spec, Mapping) or "kind" not in spec:
        raise ModelError(f"function spec must be a mapping with a 'kind' key, got {spec!r}")
    extra = set(spec) - {"kind", "params"}
    if extra:
        raise ModelError(f"function spec: unexpected keys {sorted(extra)}")
    return catalog_make(spec["kind"], spec.get("params") or {})


def _finite(v, name: str) -> float:
    try:
        v = float(v)
    except (TypeError, ValueError):
        raise ModelError(f"{name} must be a real number, got {v!r}") from None
    if not math.isfinite(v):
        raise ModelError(f"{name} must be finite, got {v}")
    return v


@dataclass(frozen=True)
class InitialLaw:
    """Law of the i.i.d. initial states.

    ``uniform`` is supported on ``[mean - spread, mean + spread]``;
    ``gaussian`` has standard deviation ``spread``.
    """

    kind: str = "point"
    mean: float = 0.0
    spread: float = 0.0

    def __post_init__(self):
        if self.kind not in ("point", "gaussian", "uniform"):
            raise ModelError(f"unknown initial law {self.kind!r}")
        object.__setattr__(self, "mean", _finite(self.mean, "init.mean"))
        object.__setattr__(self, "spread", _finite(self.spread, "init.spread"))
        if self.spread < 0:
            raise ModelError("init.spread must be >= 0")

    @property
    def variance(self) -> float:
        if self.kind == "point":
            return 0.0
        if self.kind == "gaussian":
            return self.spread**2
        return self.spread**2 / 3.0

    @property
    def second_moment(self) -> float:
        return self.mean**2 + self.variance

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "point":
            return self.mean
        if self.kind == "gaussian":
            return self.mean + self.spread * rng.standard_normal()
        return self.mean + self.spread * (2.0 * rng.random() - 1.0)


@dataclass(frozen=True)
class MfcModel:
    """Full problem data. Immutable; safe to share between threads."""

    A: float
    B: float
    sigma: float
    sigma0: float
    Q: float
    R: float
    G: float
    T: float
    a: ScalarC2Fn = field(default_factory=lambda: catalog_make("zero"))
    b: ScalarC2Fn = field(default_factory=lambda: catalog_make("zero"))
    q_fn: ScalarC2Fn = field(default_factory=lambda: catalog_make("zero"))
    r_fn: ScalarC2Fn = field(default_factory=lambda: catalog_make("zero"))
    g_fn: ScalarC2Fn = field(default_factory=lambda: catalog_make("zero"))
    init: InitialLaw = field(default_factory=InitialLaw)

    def __post_init__(self):
        for name in ("A", "B", "sigma", "sigma0", "Q", "R", "G", "T"):
            object.__setattr__(self, name, _finite(getattr(self, name), name))
        if self.T <= 0:
            raise ModelError(f"horizon T must be positive, got {self.T}")
        if self.sigma < 0:
            raise ModelError(f"sigma must be >= 0, got {self.sigma}")
        if self.sigma0 <= 0:
            raise ModelError(f"sigma0 must be > 0 (non-degenerate common noise), got {self.sigma0}")
        # Q, R, G signs are reported by validate_assumptions, not rejected here,
        # so that a config with R = 0 still yields an assumption report.

    def require_positive_R(self) -> None:
        if not self.R > 0:
            raise AssumptionError(f"implementation requires R > 0 (got R={self.R})")

    @property
    def functions(self) -> dict[str, ScalarC2Fn]:
        return {"a": self.a, "b": self.b, "q": self.q_fn, "r": self.r_fn, "g": self.g_fn}

    def lq_coefficients(self) -> tuple[float, float, float, float, float] | None:
        """Barred coefficients (Abar, Bbar, Qbar, Rbar, Gbar) when every coupling is LQ, else None."""

        def linear(fn):
            if fn.kind == "zero":
                return 0.0
            if fn.kind == "affine" and fn.params["intercept"] == 0.0:
                return fn.params["slope"]
            return None

        def quad(fn):
            if fn.kind == "zero":
                return 0.0
            if fn.kind == "quadratic":
                return fn.params["coef"]
            return None

        out = (linear(self.a), linear(self.b), quad(self.q_fn), quad(self.r_fn), quad(self.g_fn))
        return None if any(v is None for v in out) else out

    def replace(self, **changes) -> "MfcModel":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("A", "B", "sigma", "sigma0", "Q", "R", "G", "T")}
        for name, fn in self.functions.items():
            out[name] = fn.to_spec()
        out["init"] = {"kind": self.init.kind, "mean": self.init.mean, "spread": self.init.spread}
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MfcModel":
        allowed = {"A", "B", "sigma", "sigma0", "Q", "R", "G", "T", "a", "b", "q", "r", "g", "init"}
        unknown = set(d) - allowed
        if unknown:
            raise ModelError(f"model: unknown keys {sorted(unknown)}")
        missing = {"A", "B", "sigma", "sigma0", "Q", "R", "G", "T"} - set(d)
        if missing:
            raise ModelError(f"model: missing keys {sorted(missing)}")
        init = d.get("init", {})
        if not isinstance(init, Mapping):
            raise ModelError("model.init must be a mapping")
        bad = set(init) - {"kind", "mean", "spread"}
        if bad:
            raise ModelError(f"model.init: unknown keys {sorted(bad)}")
        zero = {"kind": "zero"}
        return cls(
            A=d["A"], B=d["B"], sigma=d["sigma"], sigma0=d["sigma0"],
            Q=d["Q"], R=d["R"], G=d["G"], T=d["T"],
            a=fn_from_spec(d.get("a", zero)),
            b=fn_from_spec(d.get("b", zero)),
            q_fn=fn_from_spec(d.get("q", zero)),
            r_fn=fn_from_spec(d.get("r", zero)),
            g_fn=fn_from_spec(d.get("g", zero)),
            init=InitialLaw(**init),
        )


# ---------------------------------------------------------------------------
# assumption checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionEntry:
    name: str
    passed: bool
    margin: float
    witness: tuple = ()
    note: str = ""


@dataclass(frozen=True)
class AssumptionReport:
    entries: tuple[AssumptionEntry, ...]

    @property
    def all_passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def __getitem__(self, name: str) -> AssumptionEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def rows(self) -> list[dict]:
        return [
            {
                "assumption": e.name,
                "pass": int(e.passed),
                "margin": e.margin,
                "witness": " ".join(f"{w:.6g}" for w in e.witness),
                "note": e.note,
            }
            for e in self.entries
        ]


def validate_assumptions(
    model: MfcModel,
    P,
    y_range: tuple[float, float] = (-10.0, 10.0),
    u_range: tuple[float, float] = (-10.0, 10.0),
    u_grid_size: int = 2001,
    y_grid_size: int = 2001,
    eps0: float = 1e-3,
    tol: float = 1e-12,
) -> AssumptionReport:
    """Sampled check of the standing assumptions.

    ``P`` is the solved Riccati function (a ``TimeGridFn``); it is needed for
    the (A4) cross condition. Raises ``AssumptionError`` when ``R <= 0``.
    """
    model.require_positive_R()
    if u_grid_size < 2 or y_grid_size < 2:
        raise ModelError("assumption grids need at least 2 points")
    u = np.linspace(*u_range, u_grid_size)
    y = np.linspace(*y_range, y_grid_size)
    entries = []

    # (A1): signs and boundedness of the couplings
    bad_signs = [n for n in ("Q", "G", "sigma") if getattr(model, n) < 0]
    unbounded = [n for n, fn in model.functions.items() if fn.oracle_only]
    neg = min(model.Q, model.G, model.sigma, model.R)
    note = []
    if bad_signs:
        note.append("negative " + ",".join(bad_signs))
    if unbounded:
        note.append("oracle-only (unbounded) couplings: " + ",".join(unbounded))
    entries.append(
        AssumptionEntry(
            "A1",
            not bad_signs and not unbounded,
            min(neg, model.sigma0),
            (),
            "; ".join(note) or "bounded C2 catalog couplings",
        )
    )

    # (A2): all supported initial laws are square integrable
    entries.append(
        AssumptionEntry("A2", True, model.init.second_moment, (), f"E[xi^2]={model.init.second_moment:.6g}")
    )

    # (A3): |R + r''(u)/2 + y b''(u)| >= eps0
    base = model.R + 0.5 * model.r_fn.d2(u)
    b2 = model.b.d2(u)
    vals = np.abs(base[:, None] + y[None, :] * b2[:, None])
    iu, iy = np.unravel_index(np.argmin(vals), vals.shape)
    m3 = float(vals[iu, iy])
    entries.append(AssumptionEntry("A3", m3 >= eps0, m3, (float(u[iu]), float(y[iy])), f"eps0={eps0:g}"))

    # (A4): both slots of a' and b' range over R independently
    Pv = np.asarray(P.values, dtype=float)
    tv = np.asarray(P.t, dtype=float)
    a1 = model.a.d1(u)
    bb1 = model.B * model.b.d1(u) / model.R
    ia, ib = int(np.argmin(a1)), int(np.argmax(bb1))
    cross = a1[ia] * Pv - bb1[ib] * Pv**2
    it = int(np.argmin(cross))
    m4a = float(cross[it])
    entries.append(
        AssumptionEntry(
            "A4_cross",
            m4a >= -tol,
            m4a,
            (float(tv[it]), float(u[ia]), float(u[ib])),
            "min_t [inf a'(.) P(t) - sup R^-1 B b'(.) P(t)^2]",
        )
    )
    lin = model.B**2 + model.B * model.b.d1(u)
    il = int(np.argmin(lin))
    m4b = float(lin[il])
    entries.append(AssumptionEntry("A4_control", m4b >= -tol, m4b, (float(u[il]),), "B^2 + B b'(u)"))
    if float(Pv.min()) < -tol:
        ip = int(np.argmin(Pv))
        entries.append(AssumptionEntry("A4_P_nonneg", False, float(Pv[ip]), (float(tv[ip]),), "P(t) >= 0"))
    return AssumptionReport(tuple(entries))


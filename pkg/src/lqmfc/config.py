"""JSON run configuration: strict schema, defaults and content digest."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

from .model import MfcModel, ModelError
from .convergence import QUANTITIES

__all__ = ["ConfigError", "RunConfig", "load_config", "preset_path", "PRESETS"]

PRESETS = ("trivial", "zero_lq", "lq", "nonconvex", "constant_b")


class ConfigError(ModelError):
    """Malformed or inconsistent configuration file."""


_SECTIONS = {
    "model": None,  # validated by MfcModel.from_dict
    "grids": {"K": 1000, "nx": 400, "nt": None, "domain": None, "cfl_safety": 0.9,
              "csv_t_stride": 10, "csv_x_stride": 1},
    "sim": {"n_t": None, "N": 16, "M0": 64, "M1": 64, "seed": 1, "init": None, "traj_paths": 2,
            "traj_t_stride": 10},
    "assumptions": {"y_range": [-10.0, 10.0], "u_range": [-10.0, 10.0], "grid_size": 2001, "eps0": 1e-3},
    "experiment": {"quantities": list(QUANTITIES), "N_ladder": [8, 16, 32, 64, 128, 256], "M": 200},
    "optimality": {"directions": 5, "eps": 1e-3, "M0": 1024, "M1": 16},
    "residual": {"t_count": 11, "x_samples": [-2.0, 0.0, 2.0], "xhat_count": 21, "xhat_margin": 2.0},
    "output": None,
}


@dataclass(frozen=True)
class RunConfig:
    model: MfcModel
    grids: dict
    sim: dict
    assumptions: dict
    experiment: dict
    optimality: dict
    residual: dict
    output: str | None
    digest: str
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.sim["seed"])

    @property
    def n_t(self) -> int:
        return int(self.sim["n_t"])

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        sim = dict(self.sim, seed=int(seed))
        return RunConfig(self.model, self.grids, sim, self.assumptions, self.experiment, self.optimality,
                         self.residual, self.output, self.digest, self.raw)


def _merge(name: str, given: Any, defaults: dict) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"section '{name}' must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"section '{name}': unknown keys {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def _positive_int(section: str, d: dict, key: str, minimum: int = 1):
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"{section}.{key} must be an integer >= {minimum}, got {v!r}")


def digest_of(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(canon.encode()).hexdigest()


def parse_config(raw: Any) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if "model" not in raw:
        raise ConfigError("missing 'model' section")
    sec = {name: _merge(name, raw.get(name), d) for name, d in _SECTIONS.items() if d is not None}

    model_d = dict(raw["model"]) if isinstance(raw["model"], dict) else None
    if model_d is None:
        raise ConfigError("section 'model' must be an object")
    if sec["sim"]["init"] is not None:
        if "init" in model_d:
            raise ConfigError("initial law given in both 'model' and 'sim'")
        model_d["init"] = sec["sim"]["init"]
    try:
        model = MfcModel.from_dict(model_d)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"model: {exc}") from None

    g = sec["grids"]
    _positive_int("grids", g, "K", 10)
    _positive_int("grids", g, "nx", 4)
    if g["nt"] is None:
        g["nt"] = g["K"]
    _positive_int("grids", g, "nt", 1)
    if g["nt"] != g["K"]:
        raise ConfigError("grids.nt must equal grids.K (the field and Riccati grids are shared)")
    if g["domain"] is not None:
        dom = g["domain"]
        if not (isinstance(dom, list) and len(dom) == 2 and all(isinstance(v, (int, float)) for v in dom)
                and dom[0] < dom[1]):
            raise ConfigError("grids.domain must be [lo, hi] with lo < hi")
    _positive_int("grids", g, "csv_t_stride")
    _positive_int("grids", g, "csv_x_stride")

    s = sec["sim"]
    if s["n_t"] is None:
        s["n_t"] = g["nt"]
    for key in ("n_t", "N", "M0", "M1", "traj_paths", "traj_t_stride"):
        _positive_int("sim", s, key)
    if isinstance(s["seed"], bool) or not isinstance(s["seed"], int) or not 0 <= s["seed"] < 2**64:
        raise ConfigError("sim.seed must be an unsigned 64-bit integer")

    e = sec["experiment"]
    if not isinstance(e["quantities"], list) or not e["quantities"]:
        raise ConfigError("experiment.quantities must be a non-empty list")
    bad = [q for q in e["quantities"] if q not in QUANTITIES]
    if bad:
        raise ConfigError(f"experiment.quantities: unknown {bad}; choose from {list(QUANTITIES)}")
    if not isinstance(e["N_ladder"], list) or not e["N_ladder"] or not all(
        isinstance(n, int) and not isinstance(n, bool) and n >= 1 for n in e["N_ladder"]
    ):
        raise ConfigError("experiment.N_ladder must be a non-empty list of positive integers")
    _positive_int("experiment", e, "M", 2)

    o = sec["optimality"]
    _positive_int("optimality", o, "directions")
    _positive_int("optimality", o, "M0")
    _positive_int("optimality", o, "M1")
    if not isinstance(o["eps"], (int, float)) or not o["eps"] > 0:
        raise ConfigError("optimality.eps must be positive")

    a = sec["assumptions"]
    _positive_int("assumptions", a, "grid_size", 2)
    for key in ("y_range", "u_range"):
        r = a[key]
        if not (isinstance(r, list) and len(r) == 2 and r[0] < r[1]):
            raise ConfigError(f"assumptions.{key} must be [lo, hi] with lo < hi")

    out = raw.get("output")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output must be a directory path string")
    return RunConfig(model, g, s, a, e, o, sec["residual"], out, digest_of(raw), raw)


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw)


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return Path(str(resources.files("lqmfc") / "configs" / f"{name}.json"))

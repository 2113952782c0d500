"""Configuration documents and named presets.

A document is plain JSON validated against ``model.schema.json``. Validation
errors become :class:`ConfigError` carrying the dotted path of the offending
field (``diffusion.sigma``, ``grid.nx``, ...).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import jsonschema
import numpy as np

from .conjugate import LatticeConjugate, closed_form_generator
from .errors import ConfigError, ModelError
from .model import (GridSpec, control_set_from_dict, diffusion_from_dict, penalty_from_dict)
from .procedure import ControlProblem, PayoffSpec
from .stochvol import market_from_dict, market_grid

SCHEMA_FILE = "model.schema.json"


@lru_cache(maxsize=1)
def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath(SCHEMA_FILE).read_text())


def _path(error) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        inst = error.instance if isinstance(error.instance, dict) else {}
        missing = [k for k in error.validator_value if k not in inst]
        if missing:
            parts.append(missing[0])
    return ".".join(parts) or "<root>"


def _leaves(error):
    """Innermost errors under ``oneOf``/``anyOf`` branches."""
    if not error.context:
        yield error
        return
    for sub in error.context:
        yield from _leaves(sub)


def validate(doc) -> None:
    """Raise :class:`ConfigError` naming the deepest failing field."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object", "<root>")
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = list(validator.iter_errors(doc))
    if not errors:
        return
    leaves = [leaf for e in errors for leaf in _leaves(e)]
    worst = max(leaves, key=lambda e: (len(_path(e).split(".")), e.validator == "required"))
    raise ConfigError(worst.message, _path(worst))


def config_hash(doc) -> str:
    """sha256 of the canonical JSON encoding."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_UNIT_SIGMA = {"dim": 1, "sigma": {"kind": "constant", "value": [[1.0]]}, "sigma_bound": 1.0}

PRESETS = {
    "linear-fk": {
        "name": "linear-fk",
        "diffusion": _UNIT_SIGMA,
        "control_set": {"kind": "point", "dim": 1},
        "penalty": {"kind": "zero"},
        "payoff": {"kind": "power", "exponent": 2},
        "grid": {"center": 0.0, "horizon": 0.25, "nt": 50, "nx": 201, "control_resolution": 20},
        "exact": {"kind": "heat-square"},
    },
    "ball-sublinear": {
        "name": "ball-sublinear",
        "diffusion": _UNIT_SIGMA,
        "control_set": {"kind": "ball", "dim": 1, "radius": 1.0},
        "penalty": {"kind": "zero"},
        "payoff": {"kind": "linear"},
        "grid": {"center": 0.0, "horizon": 0.5, "nt": 50, "nx": 201, "drift_bound": 1.0,
                 "control_resolution": 20},
        "exact": {"kind": "linear-drift", "rate": 1.0},
    },
    "power-penalty": {
        "name": "power-penalty",
        "diffusion": _UNIT_SIGMA,
        "control_set": {"kind": "ball", "dim": 1, "radius": 10.0},
        "penalty": {"kind": "power", "p": 2.0},
        "payoff": {"kind": "linear"},
        "grid": {"center": 0.0, "horizon": 0.5, "nt": 50, "nx": 201, "drift_bound": 1.0,
                 "control_resolution": 20},
        "exact": {"kind": "linear-drift", "rate": 0.5},
    },
    "ball-wave": {
        "name": "ball-wave",
        "diffusion": _UNIT_SIGMA,
        "control_set": {"kind": "ball", "dim": 1, "radius": 1.0},
        "penalty": {"kind": "zero"},
        "payoff": {"kind": "wave", "eps": 0.5},
        "grid": {"center": 0.0, "horizon": 0.5, "nt": 25, "nx": 101, "drift_bound": 1.0,
                 "control_resolution": 20},
        "exact": {"kind": "wave", "K": 1.0, "eps": 0.5},
    },
    "quadratic-softplus": {
        "name": "quadratic-softplus",
        "diffusion": _UNIT_SIGMA,
        "control_set": {"kind": "ball", "dim": 1, "radius": 10.0},
        "penalty": {"kind": "power", "p": 2.0},
        "payoff": {"kind": "softplus"},
        "grid": {"center": 0.0, "horizon": 0.5, "nt": 25, "nx": 101, "drift_bound": 1.0,
                 "control_resolution": 20},
        "solver": {"resolution": 2000},
        "exact": {"kind": "softplus"},
    },
    "stochvol-decoupled": {
        "name": "stochvol-decoupled",
        "market": {"kind": "decoupled", "sigma0": 20.0, "gamma0": 0.5, "rho": 0.0},
        "pricing": {"s0": 100.0, "y0": 0.0, "horizon": 0.5, "nt": 50, "nx": 61,
                    "control_resolution": 10, "strike": 100.0, "cap": 20.0,
                    "strikes": [90.0, 95.0, 100.0, 105.0, 110.0]},
    },
    "stochvol-hull-white": {
        "name": "stochvol-hull-white",
        "market": {"kind": "hull_white", "sigma0": 0.2, "gamma0": 0.5, "rho": -0.3,
                   "kappa": 1.0, "theta": 0.0},
        "pricing": {"s0": 100.0, "y0": 0.0, "horizon": 0.5, "nt": 25, "nx": 41,
                    "control_resolution": 40, "strike": 100.0, "cap": 20.0,
                    "strikes": [90.0, 95.0, 100.0, 105.0, 110.0],
                    "C_sweep": [0.0005, 0.002, 0.01, 1.0], "n_controls": 10, "n_paths": 20000},
    },
}

CLOSED_FORM_PRESETS = ("linear-fk", "ball-sublinear", "power-penalty")
SMOOTH_PRESETS = ("ball-wave", "quadratic-softplus")


def preset(name) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", "preset")
    return copy.deepcopy(PRESETS[name])


def load(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", "<root>") from exc
    validate(doc)
    return doc


# ---------------------------------------------------------------------------
# exact solutions
# ---------------------------------------------------------------------------

def exact_values(spec: dict, grid: GridSpec) -> np.ndarray:
    """Closed-form value on every grid node, shape ``(nt + 1, n_nodes)``.

    ``heat-square``: ``|x|^2 + n sigma^2 tau`` (``sigma`` field, default 1); ``linear-drift``:
    ``x + rate tau``; ``wave``: ``x + K tau + eps e^{-tau/2} sin(x + K tau)``
    (ball of radius K, unit volatility); ``softplus``: ``log(1 + e^{x + tau/2})``
    (quadratic penalty, unit volatility). Here ``tau`` is time to maturity.
    """
    X = grid.nodes
    tau = (grid.t1 - grid.times)[:, None]
    x = X[:, 0][None, :]
    kind = spec["kind"]
    if kind == "heat-square":
        return np.sum(X ** 2, axis=1)[None, :] + grid.dim * spec.get("sigma", 1.0) ** 2 * tau
    if kind == "linear-drift":
        return x + spec.get("rate", 0.0) * tau
    if kind == "wave":
        K, eps = spec.get("K", 1.0), spec.get("eps", 0.5)
        return x + K * tau + eps * np.exp(-tau / 2) * np.sin(x + K * tau)
    if kind == "softplus":
        return np.logaddexp(0.0, x + tau / 2)
    raise ConfigError(f"unknown exact kind {kind!r}", "exact.kind")


# ---------------------------------------------------------------------------
# assembled experiment
# ---------------------------------------------------------------------------

def _build(fieldname, builder, d):
    try:
        return builder(d)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, ModelError) as exc:
        raise ConfigError(str(exc), fieldname) from exc


def grid_from_dict(d) -> GridSpec:
    if "state_lo" in d:
        return GridSpec(d.get("t0", 0.0), d["t1"], d["nt"], d["state_lo"], d["state_hi"],
                        d["nx"], d.get("control_resolution", 10))
    return GridSpec.around(d["center"], d["horizon"], d.get("_sigma_bound", 1.0), d["nt"], d["nx"],
                           t0=d.get("t0", 0.0), n_sd=d.get("n_sd", 6.0),
                           drift_bound=d.get("drift_bound", 0.0),
                           control_resolution=d.get("control_resolution", 10))


@dataclass
class Experiment:
    """Validated document with the model objects built from it."""

    doc: dict
    seed: int = 0
    diffusion: object = None
    control_set: object = None
    penalty: object = None
    payoff: PayoffSpec = None
    grid: GridSpec = None
    market: object = None
    extras: dict = field(default_factory=dict)

    @property
    def name(self):
        return self.doc.get("name", "custom")

    @property
    def is_market(self):
        return self.market is not None

    @property
    def solver(self):
        return self.doc.get("solver", {})

    def problem(self) -> ControlProblem:
        s = self.solver
        return ControlProblem(self.diffusion, self.control_set, self.penalty,
                              transition=s.get("transition", "markov-chain"),
                              boundary=s.get("boundary", "clamp"),
                              resolution=s.get("resolution"), kappa=s.get("kappa"))

    def generator(self):
        """Closed-form conjugate when one exists, else the lattice maximum."""
        if self.solver.get("generator") != "lattice":
            f = closed_form_generator(self.control_set, self.penalty)
            if f is not None:
                return f
        res = self.solver.get("resolution") or self.grid.control_resolution
        return LatticeConjugate(self.control_set, self.penalty, res)

    def exact(self, grid=None):
        if "exact" not in self.doc:
            return None
        return exact_values(self.doc["exact"], grid or self.grid)

    def refined(self, levels):
        """Same experiment with the grid refined ``levels`` times (2x per level)."""
        if levels == 0:
            return self
        out = copy.copy(self)
        out.grid = self.grid.refine(levels)
        return out


def build(doc, seed=None) -> Experiment:
    """Validate ``doc`` and build its model objects."""
    validate(doc)
    seed = int(doc.get("seed", 0) if seed is None else seed)
    exp = Experiment(doc=doc, seed=seed)
    if "market" in doc:
        exp.market = _build("market", market_from_dict, doc["market"])
        pr = doc["pricing"]
        exp.grid = _build("pricing", lambda p: market_grid(
            exp.market, p["s0"], p["y0"], p["horizon"], p["nt"], p["nx"],
            n_sd=p.get("n_sd", 6.0), control_resolution=p.get("control_resolution", 10)), pr)
        exp.payoff = PayoffSpec.call(pr["strike"], cap=pr["cap"], coord=0)
        return exp
    exp.diffusion = _build("diffusion", diffusion_from_dict, doc["diffusion"])
    exp.control_set = _build("control_set", control_set_from_dict, doc["control_set"])
    exp.penalty = _build("penalty", penalty_from_dict, doc["penalty"])
    exp.payoff = _build("payoff", PayoffSpec.from_dict, doc["payoff"])
    gdoc = dict(doc["grid"], _sigma_bound=exp.diffusion.sigma_bound)
    exp.grid = _build("grid", grid_from_dict, gdoc)
    if exp.grid.dim != exp.diffusion.dim:
        raise ConfigError("grid dimension differs from diffusion.dim", "grid.nx")
    return exp


__all__ = ["validate", "load", "build", "preset", "PRESETS", "CLOSED_FORM_PRESETS",
           "SMOOTH_PRESETS", "Experiment", "exact_values", "config_hash", "load_schema",
           "grid_from_dict"]

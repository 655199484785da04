"""Run configuration documents and the bundled scenarios.

A document is a JSON object::

    {"schema_version": 1,
     "model": {...},                      # see LatticeConfig.from_dict
     "claim": {"expression": "..."},      # see claims.py
     "solver": {"mode": "euler", "tol": 1e-12, "max_iter": 200},
     "experiment": {"alpha": 1.0, "x": 0.0, "alphas": [...]}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .errors import ConfigError
from .lattice import SCHEMA_VERSION, LatticeConfig, build_lattice, load_document

TOP_KEYS = {"schema_version", "description", "model", "claim", "solver", "experiment"}
SOLVER_KEYS = {"mode", "tol", "max_iter"}
EXPERIMENT_KEYS = {"alpha", "x", "alphas", "route"}


@dataclass(frozen=True)
class RunConfig:
    model: LatticeConfig
    claim: str
    mode: str = "euler"
    tol: float = 1e-12
    max_iter: int = 200
    alpha: float = 1.0
    x: float = 0.0
    alphas: tuple = ()
    route: str = "two-run"
    description: str = ""

    def build(self):
        return build_lattice(self.model)


def _number(block, key, prefix, cast=float, default=None):
    if key not in block:
        return default
    try:
        return cast(block[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}.{key}: {exc}", key=f"{prefix}.{key}") from exc


def parse_document(doc: dict) -> RunConfig:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc.get('schema_version')!r}; expected {SCHEMA_VERSION}",
                          key="schema_version")
    for key in doc:
        if key not in TOP_KEYS:
            raise ConfigError(f"unknown key {key!r}", key=key)
    if "model" not in doc:
        raise ConfigError("missing required key 'model'", key="model")
    model = LatticeConfig.from_dict(doc["model"])
    claim = doc.get("claim", {"expression": "0"})
    if not isinstance(claim, dict) or not isinstance(claim.get("expression"), str):
        raise ConfigError("claim.expression must be a string", key="claim.expression")
    solver = doc.get("solver", {})
    experiment = doc.get("experiment", {})
    for block, keys, name in ((solver, SOLVER_KEYS, "solver"), (experiment, EXPERIMENT_KEYS, "experiment")):
        if not isinstance(block, dict):
            raise ConfigError(f"{name} must be an object", key=name)
        for key in block:
            if key not in keys:
                raise ConfigError(f"unknown key '{name}.{key}'", key=f"{name}.{key}")
    mode = solver.get("mode", "euler")
    if mode not in ("euler", "dt-consistent"):
        raise ConfigError(f"solver.mode must be 'euler' or 'dt-consistent', got {mode!r}", key="solver.mode")
    alphas = experiment.get("alphas", [])
    if not isinstance(alphas, list):
        raise ConfigError("experiment.alphas must be a list", key="experiment.alphas")
    alpha = _number(experiment, "alpha", "experiment", default=1.0)
    if alpha <= 0:
        raise ConfigError("experiment.alpha must be positive", key="experiment.alpha")
    return RunConfig(
        model=model,
        claim=claim["expression"],
        mode=mode,
        tol=_number(solver, "tol", "solver", default=1e-12),
        max_iter=_number(solver, "max_iter", "solver", int, 200),
        alpha=alpha,
        x=_number(experiment, "x", "experiment", default=0.0),
        alphas=tuple(float(a) for a in alphas),
        route=experiment.get("route", "two-run"),
        description=doc.get("description", ""),
    )


def load_run_config(path) -> RunConfig:
    return parse_document(load_document(path))


def scenario_names() -> list:
    files = resources.files("jumpbsde") / "scenarios"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def scenario_document(name: str) -> dict:
    path = resources.files("jumpbsde") / "scenarios" / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"no bundled scenario named {name!r}")
    return json.loads(path.read_text())


def load_scenario(name: str) -> RunConfig:
    return parse_document(scenario_document(name))

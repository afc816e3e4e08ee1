"""Scenario configuration: schemas, loading and line-anchored validation.

Configs are YAML (JSON is accepted as the same schema). Every model
forbids unknown keys, and validation errors carry the source line of the
offending key when it can be located.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

SCHEMA_VERSION = 1
SCENARIOS = ("malthus", "planar", "coupling", "branching", "ifire", "gene", "cvscan")

PosFloat = Annotated[float, Field(gt=0)]
NonNegFloat = Annotated[float, Field(ge=0)]
PosInt = Annotated[int, Field(gt=0)]


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_generator(q):
    n = len(q)
    if n == 0 or any(len(row) != n for row in q):
        raise ValueError("generator must be a non-empty square matrix")
    for i, row in enumerate(q):
        for j, v in enumerate(row):
            if i != j and v < 0:
                raise ValueError(f"off-diagonal rate q[{i}][{j}] must be non-negative")
    return q


# ---------------------------------------------------------------------------
# scenario parameters


class MalthusParams(Strict):
    Q: list[list[float]]
    a: list[float]
    x0: PosFloat = 1.0
    p_grid: list[float] = Field(default_factory=lambda: [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0])
    fk_p: list[float] = Field(default_factory=lambda: [0.5, 1.0])
    fk_time: PosFloat = 1.0
    record_dt: PosFloat = 0.05

    _q = field_validator("Q")(_check_generator)

    @model_validator(mode="after")
    def _shapes(self):
        if len(self.a) != len(self.Q):
            raise ValueError("a must have one growth rate per environment state")
        return self


class PlanarParams(Strict):
    m0: list[list[float]] = Field(default_factory=lambda: [[-1.0, 4.0], [-0.25, -1.0]])
    m1: list[list[float]] = Field(default_factory=lambda: [[-1.0, -0.25], [4.0, -1.0]])
    rates: list[PosFloat] = Field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0, 50.0])
    critical: bool = False
    bracket: tuple[PosFloat, PosFloat] = (0.01, 50.0)
    tol: PosFloat = 0.5

    @model_validator(mode="after")
    def _shapes(self):
        if not (len(self.m0) == len(self.m1) == 2 and all(len(r) == 2 for r in self.m0 + self.m1)):
            raise ValueError("m0 and m1 must be 2x2 matrices")
        if not self.bracket[0] < self.bracket[1]:
            raise ValueError("bracket must satisfy lo < hi")
        return self


class CouplingParams(Strict):
    matrices: list[list[list[float]]]
    rate: PosFloat = 1.0
    x0: list[float]
    x0b: list[float]
    grid_dt: PosFloat = 0.05

    @model_validator(mode="after")
    def _shapes(self):
        d = len(self.x0)
        if len(self.x0b) != d or any(len(m) != d or any(len(r) != d for r in m) for m in self.matrices):
            raise ValueError("matrices and both initial states must share one dimension")
        if len(self.matrices) < 1:
            raise ValueError("at least one matrix is required")
        return self


class DivisionConfig(Strict):
    kind: Literal["constant", "proportional"] = "constant"
    rate: NonNegFloat = 1.0
    analytic: bool = True


class BranchingParams(Strict):
    growth_rate: float = 0.1
    division: DivisionConfig = Field(default_factory=DivisionConfig)
    offspring: dict[int, NonNegFloat] = Field(default_factory=lambda: {2: 1.0})
    x0: PosFloat = 1.0
    many_to_one: bool = True
    cap: PosInt = 1_000_000

    @field_validator("offspring")
    @classmethod
    def _law(cls, v):
        if abs(sum(v.values()) - 1.0) > 1e-9:
            raise ValueError("offspring probabilities must sum to 1")
        if v.get(1, 0.0) > 0:
            raise ValueError("p_1 must be 0")
        if any(k < 0 for k in v):
            raise ValueError("offspring counts must be non-negative")
        return v


class ResetLaw(Strict):
    kind: Literal["uniform", "point"]
    lo: float | None = None
    hi: float | None = None
    value: float | None = None

    @model_validator(mode="after")
    def _fields(self):
        if self.kind == "uniform" and (self.lo is None or self.hi is None or not self.lo < self.hi):
            raise ValueError("uniform reset law needs lo < hi")
        if self.kind == "point" and self.value is None:
            raise ValueError("point reset law needs a value")
        return self


class IFParams(Strict):
    Q: list[list[float]] = Field(default_factory=lambda: [[-1.0, 1.0], [1.0, -1.0]])
    alpha: list[PosFloat] = Field(default_factory=lambda: [0.5, 1.0])
    m: float = 0.0
    c: float = 1.0
    resets: list[ResetLaw] = Field(default_factory=lambda: [ResetLaw(kind="uniform", lo=0.0, hi=0.5)] * 2)
    initial: float = 0.25
    epsilons: list[PosFloat] = Field(default_factory=lambda: [1.0, 0.1, 0.01, 0.001])
    n_prehit: PosInt = 100
    trajectory_horizon: PosFloat = 5.0

    _q = field_validator("Q")(_check_generator)

    @model_validator(mode="after")
    def _shapes(self):
        n = len(self.Q)
        if len(self.alpha) != n or len(self.resets) != n:
            raise ValueError("alpha and resets need one entry per environment state")
        if not self.m < self.c:
            raise ValueError("need m < c")
        if not self.m < self.initial < self.c:
            raise ValueError("initial potential must lie in (m, c)")
        for r in self.resets:
            lo, hi = (r.lo, r.hi) if r.kind == "uniform" else (r.value, r.value)
            if lo < self.m or hi > self.c or (r.kind == "point" and not self.m < r.value < self.c):
                raise ValueError("reset laws must be supported in (m, c)")
        if any(b >= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("epsilons must be strictly decreasing")
        return self


class GeneConfig(Strict):
    lambda1: PosFloat
    sigma1: PosFloat
    lambda2: PosFloat
    tauR: NonNegFloat
    tauD: PosFloat
    V0: PosFloat = 1.0

    @model_validator(mode="after")
    def _order(self):
        if not self.tauR < self.tauD:
            raise ValueError("constraint violated: tauR < tauD")
        return self


class SimulationConfig(Strict):
    n_cycles: PosInt = 1
    burn_in: Annotated[int, Field(ge=0)] = 50


class GeneParamsConfig(Strict):
    params: GeneConfig
    n_phases: PosInt = 20
    simulate: SimulationConfig | None = None


class Sweep(Strict):
    parameter: Literal["lambda1", "lambda2", "sigma1"] = "lambda1"
    lo: PosFloat
    hi: PosFloat
    n: Annotated[int, Field(ge=2)] = 20

    @model_validator(mode="after")
    def _order(self):
        if not self.lo < self.hi:
            raise ValueError("sweep needs lo < hi")
        return self


class CVScanParams(Strict):
    base: GeneConfig
    sweep: Sweep | None = None
    grid: list[GeneConfig] | None = None

    @model_validator(mode="after")
    def _one(self):
        if (self.sweep is None) == (self.grid is None):
            raise ValueError("give exactly one of sweep or grid")
        return self


PARAMS = {
    "malthus": MalthusParams,
    "planar": PlanarParams,
    "coupling": CouplingParams,
    "branching": BranchingParams,
    "ifire": IFParams,
    "gene": GeneParamsConfig,
    "cvscan": CVScanParams,
}


class ScenarioConfig(Strict):
    scenario: Literal["malthus", "planar", "coupling", "branching", "ifire", "gene", "cvscan"]
    version: Literal[1] = 1
    seed: Annotated[int, Field(ge=0, lt=2**64)] = 0
    replicas: PosInt | None = None
    horizon: PosFloat | None = None
    params: Union[MalthusParams, PlanarParams, CouplingParams, BranchingParams, IFParams,
                  GeneParamsConfig, CVScanParams]

    @model_validator(mode="before")
    @classmethod
    def _dispatch(cls, data):
        if isinstance(data, dict) and data.get("scenario") in PARAMS:
            params = data.get("params", {})
            if isinstance(params, dict):
                data = dict(data)
                data["params"] = PARAMS[data["scenario"]].model_validate(params)
        return data


# ---------------------------------------------------------------------------
# loading


class ConfigError(ValueError):
    """Validation failure carrying one entry per problem."""

    def __init__(self, path: str, errors: list[dict]):
        self.path = path
        self.errors = errors
        lines = [f"{path}:{e['line']}: {e['loc']}: {e['msg']}" if e.get("line")
                 else f"{path}: {e['loc']}: {e['msg']}" for e in errors]
        super().__init__("\n".join(lines))


def _node_line(root, loc) -> int | None:
    """1-based source line of the key at ``loc`` in a composed YAML tree."""
    node, line = root, None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if str(k.value) == str(part):
                    node, line = v, k.start_mark.line + 1
                    break
            else:
                return line if line else node.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            break
    return line


def _errors_from(exc: ValidationError, root, prefix=()) -> list[dict]:
    out = []
    for e in exc.errors():
        loc = tuple(prefix) + tuple(p for p in e["loc"] if not (isinstance(p, str) and p.endswith("Params")
                                                                and p[:1].isupper()))
        msg = e["msg"]
        if e["type"] == "extra_forbidden":
            msg = f"unknown key {loc[-1]!r}"
        line = _node_line(root, loc) if root is not None else None
        out.append({"loc": ".".join(str(p) for p in loc) or "<root>", "msg": msg, "line": line,
                    "type": e["type"]})
    return out


def load_raw(path: str | Path) -> tuple[dict, object]:
    text = Path(path).read_text()
    try:
        if str(path).endswith(".json"):
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
        root = yaml.compose(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(str(path), [{"loc": "<file>", "msg": f"parse error: {exc}", "line": None,
                                       "type": "parse"}]) from exc
    if not isinstance(data, dict):
        raise ConfigError(str(path), [{"loc": "<root>", "msg": "config must be a mapping", "line": 1,
                                       "type": "type"}])
    return data, root


class _Header(Strict):
    scenario: Literal["malthus", "planar", "coupling", "branching", "ifire", "gene", "cvscan"]
    version: Literal[1] = 1
    seed: Annotated[int, Field(ge=0, lt=2**64)] = 0
    replicas: PosInt | None = None
    horizon: PosFloat | None = None
    params: dict


def validate_config(path: str | Path) -> ScenarioConfig:
    """Parse and validate a config file, raising ``ConfigError`` with every problem."""
    data, root = load_raw(path)
    errors = []
    try:
        _Header.model_validate(data)
    except ValidationError as exc:
        errors += _errors_from(exc, root)
    scen = data.get("scenario")
    if scen in PARAMS and isinstance(data.get("params"), dict):
        try:
            PARAMS[scen].model_validate(data["params"])
        except ValidationError as exc:
            errors += _errors_from(exc, root, ("params",))
    if errors:
        raise ConfigError(str(path), errors)
    return ScenarioConfig.model_validate(data)

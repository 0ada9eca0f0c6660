"""Experiment configuration: JSON schema, validation and expression fields."""

from __future__ import annotations

import ast
import json
import math
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

__all__ = [
    "ConfigError",
    "ExperimentSpec",
    "NoiseModel",
    "compile_expr",
    "list_presets",
    "load_config",
    "parse_config",
]

_FUNCS = {
    "exp": np.exp, "sin": np.sin, "cos": np.cos, "tan": np.tan, "sqrt": np.sqrt,
    "log": np.log, "abs": np.abs, "tanh": np.tanh, "where": np.where,
    "minimum": np.minimum, "maximum": np.maximum,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Compare,
    ast.Lt, ast.LtE, ast.Gt, ast.GtE, ast.IfExp,
)


class ConfigError(ValueError):
    pass


def compile_expr(src: Union[str, float, int], variables: tuple[str, ...]):
    """Compile an arithmetic expression in ``variables`` to a vectorized callable.

    Only arithmetic, comparisons and the functions in ``_FUNCS`` are allowed.
    """
    if isinstance(src, (int, float)):
        value = float(src)
        return lambda *args: np.full(np.shape(args[0]), value) if args else value
    tree = ast.parse(str(src), mode="eval")
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigError(f"disallowed syntax {type(node).__name__} in expression {src!r}")
        if isinstance(node, ast.Name) and node.id not in _FUNCS and node.id not in _CONSTS \
                and node.id not in variables:
            raise ConfigError(f"unknown name {node.id!r} in expression {src!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise ConfigError(f"unsupported call in expression {src!r}")
    code = compile(tree, "<expr>", "eval")
    env = {"__builtins__": {}, **_FUNCS, **_CONSTS}

    def f(*args):
        out = eval(code, env, dict(zip(variables, args)))
        return np.broadcast_to(np.asarray(out, dtype=float), np.shape(args[0])).copy()

    return f


def space_field(src, dim: int):
    """Expression in x (and y) as a callable of points with shape (..., dim)."""
    names = ("x",) if dim == 1 else ("x", "y")
    f = compile_expr(src, names)
    return lambda pts: f(*(pts[..., i] for i in range(dim)))


def time_series(src):
    return compile_expr(src, ("t",))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Coefficients(_Strict):
    rho: Union[float, str] = 1.0
    a: Union[float, str] = 1.0
    b: Union[float, str, list[Union[float, str]]] = 0.0
    q: Union[float, str] = 0.0


class Source(_Strict):
    location: list[float]
    intensity: Union[float, str]


class Discretization(_Strict):
    n_cells: int = Field(ge=2)
    n_steps: int = Field(ge=1)


class Region(_Strict):
    interval: Optional[tuple[float, float]] = None
    box: Optional[tuple[tuple[float, float], tuple[float, float]]] = None
    disk_center: Optional[tuple[float, float]] = None
    disk_radius: Optional[float] = None

    @model_validator(mode="after")
    def _one_kind(self):
        kinds = [self.interval is not None, self.box is not None, self.disk_center is not None]
        if sum(kinds) != 1:
            raise ValueError("region needs exactly one of interval, box, disk_center")
        if self.disk_center is not None and not (self.disk_radius and self.disk_radius > 0):
            raise ValueError("disk region needs a positive disk_radius")
        return self

    def contains(self, p) -> bool:
        if self.interval is not None:
            return self.interval[0] < p[0] < self.interval[1]
        if self.box is not None:
            (x0, x1), (y0, y1) = self.box
            return x0 < p[0] < x1 and y0 < p[1] < y1
        cx, cy = self.disk_center
        return (p[0] - cx) ** 2 + (p[1] - cy) ** 2 < self.disk_radius ** 2

    def describe(self) -> str:
        if self.interval is not None:
            return f"({self.interval[0]:g}, {self.interval[1]:g})"
        if self.box is not None:
            (x0, x1), (y0, y1) = self.box
            return f"({x0:g}, {x1:g})x({y0:g}, {y1:g})"
        return f"disk(({self.disk_center[0]:g}, {self.disk_center[1]:g}), {self.disk_radius:g})"


class Observation(_Strict):
    region: list[Region] = Field(min_length=1)
    eps_fraction: float = Field(default=0.75, gt=0, le=1)

    def contains(self, p) -> bool:
        return any(r.contains(p) for r in self.region)

    def describe(self) -> str:
        return " U ".join(r.describe() for r in self.region)


class NoiseModel(_Strict):
    kind: Literal["gaussian", "uniform"] = "gaussian"
    delta: float = Field(default=0.02, ge=0)
    seed: int = 0


class LMSettings(_Strict):
    beta_x0: Optional[float] = Field(default=None, gt=0)
    beta_lambda0: Optional[float] = Field(default=None, gt=0)
    beta_u0: Optional[float] = Field(default=None, gt=0)
    gamma_x: float = Field(default=0.7, gt=0, lt=1)
    gamma_lambda: float = Field(default=0.8, gt=0, lt=1)
    K_max: int = Field(default=20, ge=1)
    fd_step: float = Field(default=1e-4, gt=0)
    discrepancy_stop: bool = True


class InitialGuess(_Strict):
    locations: list[list[float]]
    intensities: list[Union[float, str]]
    u0: Optional[Union[float, str]] = None


class Counterexample(_Strict):
    x0: float
    lambda0: float
    x1: float
    x_omega: float
    n_steps: int = Field(default=200, ge=2)


class ConvergenceStudy(_Strict):
    n_steps: list[int] = Field(default=[1000, 2000], min_length=2)


class ExperimentSpec(_Strict):
    name: str
    mode: Literal["invert", "counterexample", "convergence"] = "invert"
    dimension: Literal[1, 2] = 1
    length: float = Field(default=1.0, gt=0)
    T: float = Field(default=1.0, gt=0)
    alpha: float = 0.5
    coefficients: Coefficients = Coefficients()
    sources: list[Source] = []
    u0: Union[float, str] = 0.0
    fine: Discretization = Discretization(n_cells=500, n_steps=1000)
    coarse: Discretization = Discretization(n_cells=100, n_steps=200)
    observation: Optional[Observation] = None
    noise: NoiseModel = NoiseModel()
    lm: LMSettings = LMSettings()
    initial: Optional[InitialGuess] = None
    recover_u0: bool = False
    counterexample: Optional[Counterexample] = None
    convergence: Optional[ConvergenceStudy] = None

    @field_validator("alpha")
    @classmethod
    def _alpha_range(cls, v: float) -> float:
        if not 0 < v <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {v}")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        d = self.dimension
        for i, s in enumerate(self.sources):
            if len(s.location) != d:
                raise ValueError(f"sources[{i}].location must have {d} coordinate(s)")
        if self.mode == "invert":
            if self.observation is None or self.initial is None or not self.sources:
                raise ValueError("invert mode needs sources, observation and initial")
            if len(self.initial.locations) != len(self.sources) or \
                    len(self.initial.intensities) != len(self.sources):
                raise ValueError("initial guess must have one location and intensity per source")
            for i, loc in enumerate(self.initial.locations):
                if len(loc) != d:
                    raise ValueError(f"initial.locations[{i}] must have {d} coordinate(s)")
            if self.recover_u0 and self.initial.u0 is None:
                raise ValueError("recover_u0 needs initial.u0")
            if not (self.fine.n_cells > self.coarse.n_cells or self.fine.n_steps > self.coarse.n_steps):
                raise ValueError("fine grid must be strictly finer than the coarse grid")
            if self.fine.n_steps % self.coarse.n_steps:
                raise ValueError("coarse time steps must nest in the fine time grid")
            if self.fine.n_cells % self.coarse.n_cells:
                raise ValueError("coarse mesh must nest in the fine mesh")
        if self.mode == "counterexample" and self.counterexample is None:
            raise ValueError("counterexample mode needs a counterexample section")
        return self

    def with_overrides(self, alpha=None, delta=None, eps_fraction=None, seed=None) -> "ExperimentSpec":
        data = self.model_dump()
        if alpha is not None:
            data["alpha"] = alpha
        if delta is not None:
            data["noise"]["delta"] = delta
        if seed is not None:
            data["noise"]["seed"] = seed
        if eps_fraction is not None:
            if data.get("observation") is None:
                raise ConfigError(f"preset {self.name!r} has no observation window to override")
            data["observation"]["eps_fraction"] = eps_fraction
        return parse_config(data)


def parse_config(data: dict) -> ExperimentSpec:
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"  {loc}: {err['msg']}")
        raise ConfigError("invalid experiment config:\n" + "\n".join(lines)) from None


def list_presets() -> list[str]:
    root = resources.files("subdiff") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(path) -> ExperimentSpec:
    """Load a JSON config from ``path``, or a packaged preset by name."""
    p = Path(path)
    if p.is_file():
        text = p.read_text(encoding="utf-8")
        origin = str(p)
    else:
        name = p.name[:-5] if p.name.endswith(".json") else p.name
        res = resources.files("subdiff") / "presets" / f"{name}.json"
        if not res.is_file():
            raise ConfigError(f"no config file or preset named {str(path)!r}; presets: {', '.join(list_presets())}")
        text = res.read_text(encoding="utf-8")
        origin = f"preset {name}"
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{origin}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_config(data)

"""Run configuration: schema, parsing, dotted overrides and the content hash."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dynamics import FlowParams, ForcingSpec
from .errors import ConfigError
from .field import Grid
from .integrate import DtPolicy, InitSpec, RunSetup
from .noise import Modulation, NoiseSpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


class GridCfg(_Strict):
    n: int
    ell: float = 2 * math.pi

    @field_validator("n")
    @classmethod
    def _even(cls, v):
        if v < 4 or v % 2:
            raise ValueError("must be an even integer >= 4")
        return v

    @field_validator("ell")
    @classmethod
    def _pos(cls, v):
        if v <= 0:
            raise ValueError("must be positive")
        return v


class FlowCfg(_Strict):
    nu: float
    nu_bar: float
    r: float

    @field_validator("nu")
    @classmethod
    def _nu(cls, v):
        if v <= 0:
            raise ValueError("viscosity must be positive")
        return v

    @field_validator("nu_bar")
    @classmethod
    def _nu_bar(cls, v):
        if v < 0:
            raise ValueError("must be nonnegative")
        return v

    @field_validator("r")
    @classmethod
    def _r(cls, v):
        if v < 2:
            raise ValueError("power-law exponent must be >= 2")
        return v


class ModeEntry(_Strict):
    kappa: List[int] = Field(min_length=3, max_length=3)
    amplitude: List[float] = Field(min_length=3, max_length=3)
    phase: Literal["sin", "cos"] = "sin"


class ForcingCfg(_Strict):
    type: Literal["modes", "file"]
    entries: List[ModeEntry] = []
    path: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.type == "file" and not self.path:
            raise ValueError("file forcing needs a path")
        if self.type == "modes" and self.path:
            raise ValueError("mode forcing takes entries, not a path")
        return self


class ModulationCfg(_Strict):
    kind: Literal["constant", "cosine"] = "constant"
    value: float = 1.0
    depth: float = 0.0
    period: float = 1.0


class NoiseCfg(_Strict):
    mode: Literal["off", "additive", "multiplicative"]
    sigma0: float = 0.0
    alpha: float = 0.0
    kmax: int = 1
    modulation: ModulationCfg = ModulationCfg()

    @field_validator("mode", mode="before")
    @classmethod
    def _yaml_off(cls, v):
        # YAML 1.1 reads a bare ``off`` as boolean false
        return "off" if v is False else v

    @field_validator("sigma0", "alpha")
    @classmethod
    def _nonneg(cls, v):
        if v < 0:
            raise ValueError("must be nonnegative")
        return v


class TimeCfg(_Strict):
    dt_policy: Literal["fixed", "cfl"] = "fixed"
    dt_max: float
    c_adv: float = 0.5
    c_visc: float = 0.25
    T: float
    burn_in: float = 0.0

    @model_validator(mode="after")
    def _ranges(self):
        if self.dt_max <= 0:
            raise ValueError("dt_max must be positive")
        if self.T < 0 or self.burn_in < 0:
            raise ValueError("T and burn_in must be nonnegative")
        return self


class InitCfg(_Strict):
    type: Literal["zero", "mode", "random"] = "zero"
    modes: List[ModeEntry] = []
    energy: float = 0.0
    kmax: int = 2


class OutputCfg(_Strict):
    cadence: int = Field(default=1, ge=1)
    checkpoint_every: Optional[int] = Field(default=None, ge=1)
    root: Optional[str] = None


class EnsembleCfg(_Strict):
    M: int = Field(default=1, ge=1)
    parallel_width: int = Field(default=1, ge=1)


class RunConfig(_Strict):
    grid: GridCfg
    flow: FlowCfg
    forcing: ForcingCfg
    noise: NoiseCfg
    time: TimeCfg
    init: InitCfg = InitCfg()
    output: OutputCfg = OutputCfg()
    ensemble: EnsembleCfg = EnsembleCfg()
    seed: int = Field(default=0, ge=0)


def _key(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def validate_config(data) -> RunConfig:
    """Validate a plain mapping; the first problem is raised as :class:`ConfigError`."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = err["loc"]
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        raise ConfigError(_key(loc), msg) from None
    _cross_checks(cfg)
    try:
        build_setup(cfg)
    except ValueError as exc:
        raise ConfigError("<root>", str(exc)) from None
    return cfg


def _cross_checks(cfg: RunConfig):
    cut = cfg.grid.n // 3
    if cfg.noise.mode != "off" and not 1 <= cfg.noise.kmax <= cut:
        raise ConfigError("noise.kmax", f"must lie in [1, {cut}] (two-thirds cutoff)")
    if cfg.init.type == "random" and not 1 <= cfg.init.kmax <= cut:
        raise ConfigError("init.kmax", f"must lie in [1, {cut}] (two-thirds cutoff)")
    if cfg.init.energy < 0:
        raise ConfigError("init.energy", "must be nonnegative")
    m = cfg.noise.modulation
    if m.kind == "constant" and not 0 <= m.value <= 1:
        raise ConfigError("noise.modulation.value", "must lie in [0, 1]")
    if m.kind == "cosine" and not (0 <= m.depth <= 1 and m.period > 0):
        raise ConfigError("noise.modulation", "cosine modulation needs depth in [0, 1] and period > 0")
    for name, entries in (("forcing.entries", cfg.forcing.entries), ("init.modes", cfg.init.modes)):
        for i, e in enumerate(entries):
            if any(abs(k) > cut for k in e.kappa) or not any(e.kappa):
                raise ConfigError(f"{name}.{i}.kappa", f"must be nonzero with |kappa_i| <= {cut}")


def load_mapping(path) -> dict:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"unparseable configuration: {exc}") from None
    return {} if data is None else data


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(key or "<root>", f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot override inside a non-mapping value")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def parse_config(path, overrides=()) -> RunConfig:
    """Read a YAML or JSON file (missing file raises ``FileNotFoundError``)."""
    return validate_config(apply_overrides(load_mapping(path), overrides))


def config_echo(cfg: RunConfig) -> str:
    """Fully expanded configuration as JSON; parses back to an equal config."""
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    """Hash of everything that changes trajectories; output, seed and parallel width excluded."""
    d = cfg.model_dump(mode="json", exclude={"output": True, "seed": True, "ensemble": {"parallel_width"}})
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _modes(entries):
    return tuple((e.kappa, e.amplitude, e.phase) for e in entries)


def build_setup(cfg: RunConfig) -> RunSetup:
    grid = Grid(cfg.grid.n, cfg.grid.ell)
    if cfg.forcing.type == "file":
        forcing = ForcingSpec(path=cfg.forcing.path)
    else:
        forcing = ForcingSpec(modes=_modes(cfg.forcing.entries))
    params = FlowParams(cfg.flow.nu, cfg.flow.nu_bar, cfg.flow.r, forcing)
    nc = cfg.noise
    if nc.mode == "off":
        noise = NoiseSpec.off(grid)
    else:
        m = nc.modulation
        noise = NoiseSpec.power_law(grid, nc.sigma0, nc.alpha, nc.kmax, nc.mode,
                                    Modulation(m.kind, m.value, m.depth, m.period))
    tc = cfg.time
    policy = DtPolicy(tc.dt_policy, tc.dt_max, tc.c_adv, tc.c_visc)
    ic = cfg.init
    init = InitSpec(ic.type, _modes(ic.modes), ic.energy, ic.kmax)
    return RunSetup(grid, params, noise, policy, tc.T, tc.burn_in, init)

"""Run configuration: one JSON document validated against the shipped schema and
mapped onto the model, corridor, controller and scenario dataclasses."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import jsonschema

from .controllers import MpcConfig, RuleBasedConfig
from .eco import EcoSettings
from .harness import ConfigError, ScenarioConfig
from .powertrain import (
    BatteryParams,
    CatalystParams,
    EngineMapParams,
    EngineThermalParams,
    ModelParams,
    RoadLoadParams,
)
from .traffic import CorridorConfig, CorridorError, Intersection


def load_schema() -> dict:
    return json.loads(resources.files("iptm").joinpath("config.schema.json").read_text())


@dataclass(frozen=True)
class TrafficSettings:
    n_background: int = 300
    n_ego: int = 20
    bin_dt: float = 10.0
    bin_horizon: float = 900.0


@dataclass(frozen=True)
class RunConfig:
    params: ModelParams = field(default_factory=ModelParams)
    corridor: CorridorConfig = field(default_factory=CorridorConfig.default)
    traffic: TrafficSettings = field(default_factory=TrafficSettings)
    eco: EcoSettings = field(default_factory=EcoSettings)
    rule: RuleBasedConfig = field(default_factory=RuleBasedConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    ego: int = 0

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else replace(self, scenario=replace(self.scenario, seed=seed))

    def to_dict(self) -> dict:
        """Plain JSON document that loads back to an equal config."""
        p = self.params
        cor = asdict(self.corridor)
        cor.update(asdict(self.traffic), eco=asdict(self.eco))
        sc = asdict(self.scenario)
        for k in ("driving", "controller", "preview"):
            sc.pop(k)
        sc["ego"] = self.ego
        mpc = asdict(self.mpc)
        for k in ("h_r", "dt1", "dt2"):
            mpc.pop(k)
        doc = {
            "battery": asdict(p.battery),
            "engine_thermal": asdict(p.thermal),
            "catalyst": asdict(p.catalyst),
            "engine": asdict(p.engine),
            "road_load": asdict(p.road),
            "corridor": cor,
            "controller": {"rule_based": asdict(self.rule), "mpc": mpc},
            "scenario": sc,
        }
        if doc["battery"]["u_oc_table"] is None:
            doc["battery"].pop("u_oc_table")
        return json.loads(json.dumps(doc))


def _tuples(x):
    if isinstance(x, list):
        return tuple(_tuples(v) for v in x)
    return x


def _build(cls, section: dict, **extra):
    known = {f.name for f in fields(cls)}
    kw = {k: _tuples(v) for k, v in section.items() if k in known}
    kw.update(extra)
    return cls(**kw)


def parse_config(doc: dict) -> RunConfig:
    """Validate ``doc`` and build a :class:`RunConfig`; every failure is a ConfigError."""
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    try:
        params = ModelParams(
            battery=_build(BatteryParams, doc.get("battery", {})),
            thermal=_build(EngineThermalParams, doc.get("engine_thermal", {})),
            catalyst=_build(CatalystParams, doc.get("catalyst", {})),
            engine=_build(EngineMapParams, doc.get("engine", {})),
            road=_build(RoadLoadParams, doc.get("road_load", {})),
        )
        cor = dict(doc.get("corridor", {}))
        base = CorridorConfig.default()
        inters = cor.pop("intersections", None)
        inters = (
            tuple(_build(Intersection, i) for i in inters) if inters is not None else base.intersections
        )
        corridor = _build(CorridorConfig, cor, intersections=inters)
        traffic = _build(TrafficSettings, cor)
        eco = _build(EcoSettings, cor.get("eco", {}))
        ctl = doc.get("controller", {})
        rule = _build(RuleBasedConfig, ctl.get("rule_based", {}))
        sc = dict(doc.get("scenario", {}))
        scenario = ScenarioConfig.for_case(
            sc.pop("scenario", "I"), sc.pop("case", "A"), **{k: v for k, v in sc.items() if k != "ego"}
        )
        mpc = _build(MpcConfig, ctl.get("mpc", {}), h_r=scenario.h_r, dt1=scenario.dt1, dt2=scenario.dt2)
    except (ValueError, TypeError, CorridorError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return RunConfig(params, corridor, traffic, eco, rule, mpc, scenario, int(sc.get("ego", 0)))


def load_config(path: str | Path | None) -> RunConfig:
    """Read a JSON config file; ``None`` gives the defaults."""
    if path is None:
        return parse_config({})
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(doc)

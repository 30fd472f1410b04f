"""JSON scenario files: schema validation, defaults and assembly into a run."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import jsonschema

from .circuit import DEFAULT_R_OFF, DEFAULT_R_ON, Element, Netlist, TopologyCache
from .errors import ScenarioError
from .hybrid import HybridSystem, concat_blocks
from .integrator import SimulationRun
from .models import (BatteryParams, MotorParams, PvParams, battery_block, motor_block,
                     pv_block)
from .sources import (Event, EventSchedule, SourceSet, SourceWaveform, merge_events,
                      pwm_schedule, step_events)
from .taylor import StepController

SCHEMA_VERSION = 1
SOLVER_DEFAULTS = {"name": "taylor", "rel_tol": 1e-6, "abs_tol": 1e-9, "q_min": 2,
                   "q_max": 5, "safety": 0.8, "h_min": 1e-15, "h_max": None,
                   "feedback_check": True, "metric_abs_tol": None}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NAME = {"type": "string", "minLength": 1}
_DUTY = {"type": "number", "minimum": 0, "maximum": 1}

SCHEMA = {
    "type": "object",
    "required": ["version", "netlist", "t_span", "output_period"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "sources": {
            "type": "object",
            "additionalProperties": {
                "type": "object", "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["dc", "sine", "step"]},
                    "value": _NUM, "amplitude": _NUM, "frequency": _POS, "phase": _NUM,
                    "offset": _NUM, "before": _NUM, "after": _NUM, "at": _NUM,
                    "harmonics": {"type": "array", "items": {
                        "type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}},
                },
                "additionalProperties": False,
            },
        },
        "netlist": {
            "type": "array",
            "items": {
                "type": "object", "required": ["kind", "name"],
                "properties": {
                    "kind": {"enum": ["resistor", "capacitor", "inductor", "vsource",
                                      "isource", "switch", "port", "sensor"]},
                    "name": _NAME,
                    "nodes": {"type": "array", "items": _NAME, "minItems": 2, "maxItems": 2},
                    "value": _POS, "initial": _NUM, "source": _NAME,
                    "mode": {"enum": ["voltage", "current"]},
                    "output": _NAME, "input": _NAME, "target": _NAME, "gain": _NUM,
                    "r_on": _POS, "r_off": _POS,
                },
                "additionalProperties": False,
            },
        },
        "blocks": {
            "type": "array",
            "items": {
                "type": "object", "required": ["model", "name"],
                "properties": {
                    "model": {"enum": ["pv", "battery", "motor"]},
                    "name": _NAME,
                    "params": {"type": "object"},
                    "constants": {"type": "object", "additionalProperties": _NUM},
                    "initial": {"type": "object", "additionalProperties": _NUM},
                    "output": {"enum": ["terminal", "source"]},
                },
                "additionalProperties": False,
            },
        },
        "pwm": {
            "type": "object", "required": ["carrier_freq", "legs"],
            "properties": {
                "carrier_freq": _POS,
                "legs": {"type": "array", "items": {
                    "type": "object", "required": ["upper", "lower", "duty"],
                    "properties": {
                        "upper": _NAME, "lower": _NAME,
                        "duty": {
                            "type": "object", "required": ["kind"],
                            "properties": {
                                "kind": {"enum": ["const", "sine"]},
                                "value": _DUTY, "offset": _DUTY,
                                "amplitude": {"type": "number", "minimum": 0, "maximum": 0.5},
                                "frequency": _POS, "phase": _NUM,
                            },
                            "additionalProperties": False,
                        },
                    },
                    "additionalProperties": False,
                }},
            },
            "additionalProperties": False,
        },
        "gates": {"type": "array", "items": {
            "type": "object", "required": ["time"],
            "properties": {"time": _NUM,
                           "close": {"type": "array", "items": _NAME},
                           "open": {"type": "array", "items": _NAME}},
            "additionalProperties": False,
        }},
        "initial_closed": {"type": "array", "items": _NAME},
        "solver": {
            "type": "object",
            "properties": {
                "name": {"enum": ["taylor", "dp45", "bs23"]},
                "rel_tol": {"type": "number", "minimum": 0},
                "abs_tol": {"type": "number", "minimum": 0},
                "q_min": {"type": "integer", "minimum": 2},
                "q_max": {"type": "integer", "minimum": 2},
                "safety": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "h_min": _POS, "h_max": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "feedback_check": {"type": "boolean"},
                "metric_abs_tol": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "t_span": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        "output_period": _POS,
        "signals": {"type": "array", "items": _NAME},
    },
}

_MODELS = {
    "pv": (PvParams, ("S", "T"), ("I_m",)),
    "battery": (BatteryParams, (), ("c", "i_star")),
    "motor": (MotorParams, (), ("i_sd", "i_sq", "psi_rd", "psi_rq", "w2")),
}


def _path(err) -> str:
    parts = ["$"]
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "".join(parts)


@dataclass
class Scenario:
    """A validated scenario with its assembled system and schedule."""

    name: str
    data: dict
    netlist: Netlist
    sources: SourceSet
    system: HybridSystem
    schedule: EventSchedule
    solver: dict
    t_span: tuple
    output_period: float
    signals: tuple
    initial_mask: int = 0
    warnings: list = field(default_factory=list)

    @property
    def n_switches(self):
        return len(self.netlist.switches)

    def controller(self, **overrides) -> StepController:
        s = {**self.solver, **overrides}
        return StepController(rel_tol=s["rel_tol"], abs_tol=s["abs_tol"], q_min=s["q_min"],
                              q_max=s["q_max"], safety=s["safety"], h_min=s["h_min"],
                              h_max=math.inf if s["h_max"] is None else s["h_max"],
                              feedback_check=s["feedback_check"])

    @property
    def metric_abs_tol(self) -> float:
        m = self.solver["metric_abs_tol"]
        return self.solver["abs_tol"] if m is None else m

    def run(self, t_end: float | None = None, **overrides) -> SimulationRun:
        t0, t1 = self.t_span
        if t_end is not None:
            t1 = float(t_end)
        return SimulationRun(self.system, self.schedule, self.controller(**overrides),
                             (t0, t1), self.output_period, tuple(self.signals),
                             self.initial_mask)

    def dump(self) -> dict:
        """Canonical form with every default filled in."""
        out = copy.deepcopy(self.data)
        out["solver"] = dict(self.solver)
        out.setdefault("sources", {})
        out.setdefault("blocks", [])
        out["signals"] = list(self.signals)
        for el in out["netlist"]:
            if el["kind"] == "switch":
                el.setdefault("r_on", DEFAULT_R_ON)
                el.setdefault("r_off", DEFAULT_R_OFF)
        return out


def _duty_fn(duty):
    if duty["kind"] == "const":
        d = float(duty.get("value", 0.5))
        return lambda t: d
    off = float(duty.get("offset", 0.5))
    amp = float(duty.get("amplitude", 0.0))
    w = 2.0 * math.pi * float(duty.get("frequency", 50.0))
    ph = float(duty.get("phase", 0.0))
    return lambda t: off + amp * math.sin(w * t + ph)


def _build_blocks(data):
    blocks = []
    for k, b in enumerate(data.get("blocks", [])):
        where = f"$.blocks[{k}]"
        cls, const_names, state_names = _MODELS[b["model"]]
        try:
            params = cls(**b.get("params", {}))
        except TypeError as exc:
            raise ScenarioError(f"bad parameter: {exc}", f"{where}.params") from None
        except ValueError as exc:
            raise ScenarioError(str(exc), f"{where}.params") from None
        consts = b.get("constants", {})
        for c in consts:
            if c not in const_names:
                raise ScenarioError(f"unknown constant {c!r}", f"{where}.constants")
        init = b.get("initial", {})
        for s in init:
            if s not in state_names:
                raise ScenarioError(f"unknown state {s!r}", f"{where}.initial")
        if b["model"] == "pv":
            blk = pv_block(params, S=consts.get("S", params.S_0),
                           T=consts.get("T", params.T_ref), name=b["name"],
                           I_m0=init.get("I_m"), output=b.get("output", "terminal"))
        elif b["model"] == "battery":
            blk = battery_block(params, init.get("c", 0.0), init.get("i_star", 0.0), b["name"])
        else:
            x0 = tuple(init.get(s, 0.0) for s in state_names)
            blk = motor_block(params, b["name"], x0)
        blocks.append(blk)
    return blocks


def build_scenario(data: dict, origin: str = "<scenario>") -> Scenario:
    """Validate a scenario dictionary and assemble the simulation objects."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ScenarioError(f"{origin}: {e.message}", _path(e))
    data = copy.deepcopy(data)
    solver = {**SOLVER_DEFAULTS, **data.get("solver", {})}
    if solver["q_min"] > solver["q_max"]:
        raise ScenarioError("q_min exceeds q_max", "$.solver.q_min")
    t0, t1 = map(float, data["t_span"])
    if not t1 > t0:
        raise ScenarioError("t_span must be increasing", "$.t_span")

    sources = SourceSet.from_dict({
        name: SourceWaveform(**{k: (tuple(map(tuple, v)) if k == "harmonics" else v)
                                for k, v in entry.items()})
        for name, entry in data.get("sources", {}).items()})

    blocks = _build_blocks(data)
    block = concat_blocks(blocks) if blocks else None
    out_names = [] if block is None else list(block.output_names)
    in_names = [] if block is None else list(block.input_names)

    elements = []
    for k, el in enumerate(data["netlist"]):
        where = f"$.netlist[{k}]"
        kw = {"kind": el["kind"], "name": el["name"], "nodes": tuple(el.get("nodes", ())),
              "value": float(el.get("value", 0.0)), "initial": float(el.get("initial", 0.0)),
              "mode": el.get("mode", ""), "target": el.get("target", ""),
              "gain": float(el.get("gain", 1.0)),
              "r_on": float(el.get("r_on", DEFAULT_R_ON)),
              "r_off": float(el.get("r_off", DEFAULT_R_OFF))}
        kind = el["kind"]
        if kind in ("resistor", "capacitor", "inductor") and "value" not in el:
            raise ScenarioError(f"{kind} needs a value", f"{where}.value")
        if kind in ("vsource", "isource"):
            if el.get("source") not in sources.names:
                raise ScenarioError(f"unknown source {el.get('source')!r}", f"{where}.source")
            kw["ref"] = el["source"]
        elif kind == "port":
            if el.get("output") not in out_names:
                raise ScenarioError(f"dangling port binding {el.get('output')!r}",
                                    f"{where}.output")
            if el.get("mode") not in ("voltage", "current"):
                raise ScenarioError("port needs mode voltage or current", f"{where}.mode")
            kw["ref"] = out_names.index(el["output"])
        elif kind == "sensor":
            if el.get("input") not in in_names:
                raise ScenarioError(f"dangling sensor binding {el.get('input')!r}",
                                    f"{where}.input")
            if el.get("mode") not in ("voltage", "current"):
                raise ScenarioError("sensor needs mode voltage or current", f"{where}.mode")
            if el["mode"] == "current" and not el.get("target"):
                raise ScenarioError("current sensor needs a target", f"{where}.target")
            kw["ref"] = in_names.index(el["input"])
        if kind != "sensor" or el.get("mode") == "voltage":
            if len(kw["nodes"]) != 2:
                raise ScenarioError("element needs two nodes", f"{where}.nodes")
        elements.append(Element(**kw))

    netlist = Netlist(elements, sources.names, len(out_names), len(in_names))
    try:
        netlist.validate()
    except Exception as exc:
        raise ScenarioError(str(exc), "$.netlist") from None
    sw_names = [e.name for e in netlist.switches]

    def bit(name, where):
        if name not in sw_names:
            raise ScenarioError(f"unknown switch {name!r}", where)
        return sw_names.index(name)

    initial_mask = 0
    for k, name in enumerate(data.get("initial_closed", [])):
        initial_mask |= 1 << bit(name, f"$.initial_closed[{k}]")

    span = (t0, t1)
    parts = [step_events(sources, span)]
    warn = []
    if "pwm" in data:
        pwm = data["pwm"]
        mods = {}
        for k, leg in enumerate(pwm["legs"]):
            where = f"$.pwm.legs[{k}]"
            d = leg["duty"]
            if d["kind"] == "sine":
                lo = d.get("offset", 0.5) - d.get("amplitude", 0.0)
                hi = d.get("offset", 0.5) + d.get("amplitude", 0.0)
                if lo < 0 or hi > 1:
                    raise ScenarioError("duty leaves [0, 1]", f"{where}.duty")
            mods[(bit(leg["upper"], f"{where}.upper"), bit(leg["lower"], f"{where}.lower"))] = \
                _duty_fn(d)
        sched = pwm_schedule(pwm["carrier_freq"], mods, span)
        warn.extend(sched.warnings)
        initial_mask = sched.initial_mask(t0, initial_mask)
        parts.append(sched.restricted(t0, t1))
    gate_events = []
    for k, g in enumerate(data.get("gates", [])):
        where = f"$.gates[{k}]"
        if not t0 < g["time"] < t1:
            raise ScenarioError("gate time outside the open span", f"{where}.time")
        s_mask = sum(1 << bit(n, f"{where}.close") for n in set(g.get("close", [])))
        c_mask = sum(1 << bit(n, f"{where}.open") for n in set(g.get("open", [])))
        if s_mask & c_mask:
            raise ScenarioError("switch both closed and opened", where)
        gate_events.append(Event(float(g["time"]), s_mask, c_mask))
    schedule = merge_events([e for p in parts for e in p.events] + gate_events, warn)

    cache = TopologyCache(netlist)
    try:
        cache(initial_mask)
    except Exception as exc:
        raise ScenarioError(str(exc), "$.netlist") from None
    system = HybridSystem(len(netlist.states), len(sources), block, cache, sources,
                          netlist.state_names, netlist.initial_state)

    signals = tuple(data.get("signals", ())) or system.state_names
    known = set(system.state_names) | set(system.block.input_names) | \
        set(system.block.output_names) | set(sources.names)
    for k, s in enumerate(signals):
        if s not in known:
            raise ScenarioError(f"unknown signal {s!r}", f"$.signals[{k}]")
    return Scenario(data.get("name", origin), data, netlist, sources, system, schedule,
                    solver, (t0, t1), float(data["output_period"]), signals, initial_mask,
                    warn)


def load_scenario(path) -> Scenario:
    """Read and validate a JSON scenario file."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}", str(path)) from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})", str(path)) from None
    return build_scenario(data, str(path))


def shipped_scenarios():
    return sorted(p.name[:-5] for p in resources.files("flexsim.scenarios").iterdir()
                  if p.name.endswith(".json"))


def shipped_path(name: str):
    """Filesystem path of a scenario bundled with the package."""
    p = resources.files("flexsim.scenarios") / f"{name}.json"
    if not p.is_file():
        raise ScenarioError(f"no shipped scenario named {name!r}", name)
    return str(p)


def load_shipped(name: str) -> Scenario:
    return load_scenario(shipped_path(name))

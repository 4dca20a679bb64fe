"""Scenario files: what services run where, what they say, for how long.

A scenario is a JSON document that pairs with a topology file.  It lists
the services to start (each with its advertised streams and requested
topics), optional per-layer config overrides, optional latency probes,
and an optional placement sweep that re-runs the scenario with one
service moved across a list of candidate nodes.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence


class ScenarioError(ValueError):
    """Raised for malformed scenario documents."""


PAYLOAD_KINDS = ("random", "compressible", "zeros")


@dataclass(frozen=True)
class StreamSpec:
    """One advertised stream: topic plus the rate/size it will publish at."""

    topic: str
    rate_hz: float
    size: int
    payload: str = "random"

    def __post_init__(self) -> None:
        if not self.topic:
            raise ScenarioError("stream topic must be non-empty")
        if self.rate_hz < 0:
            raise ScenarioError(f"stream {self.topic!r}: rate_hz must be >= 0")
        if self.size < 0:
            raise ScenarioError(f"stream {self.topic!r}: size must be >= 0")
        if self.payload not in PAYLOAD_KINDS:
            raise ScenarioError(
                f"stream {self.topic!r}: payload must be one of {PAYLOAD_KINDS}"
            )


@dataclass(frozen=True)
class ServiceSpec:
    """One service instance: where it runs and what it advertises/requests."""

    name: str
    node: str
    advertises: tuple[StreamSpec, ...] = ()
    requests: tuple[str, ...] = ()
    start_s: float = 0.0
    stop_s: float | None = None
    external: bool = False

    def __post_init__(self) -> None:
        if not self.name:
            raise ScenarioError("service name must be non-empty")
        if not self.node:
            raise ScenarioError(f"service {self.name!r}: node must be non-empty")
        if self.start_s < 0:
            raise ScenarioError(f"service {self.name!r}: start_s must be >= 0")
        if self.stop_s is not None and self.stop_s <= self.start_s:
            raise ScenarioError(f"service {self.name!r}: stop_s must be > start_s")


@dataclass(frozen=True)
class ProbesSpec:
    """Round-trip latency probing between the listed nodes."""

    nodes: tuple[str, ...] = ()
    ping_period_s: float = 1.0
    ping_timeout_s: float = 5.0

    def __post_init__(self) -> None:
        if self.ping_period_s <= 0:
            raise ScenarioError("probes: ping_period_s must be > 0")
        if self.ping_timeout_s <= 0:
            raise ScenarioError("probes: ping_timeout_s must be > 0")


@dataclass(frozen=True)
class SweepSpec:
    """Placement sweep: re-run the scenario with `service` on each node."""

    service: str
    nodes: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.service:
            raise ScenarioError("sweep: service must be non-empty")
        if not self.nodes:
            raise ScenarioError("sweep: nodes must be non-empty")


@dataclass(frozen=True)
class Scenario:
    name: str
    duration_s: float
    services: tuple[ServiceSpec, ...]
    seed: int = 0
    config: dict = field(default_factory=dict)
    probes: ProbesSpec | None = None
    sweep: SweepSpec | None = None
    # optional embedded topology document (same shape as a topology
    # file, links section included); a topology file supplied alongside
    # the scenario takes precedence
    topology: dict | None = None

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise ScenarioError("duration_s must be > 0")
        names = [s.name for s in self.services]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ScenarioError(f"duplicate service names: {sorted(dupes)}")
        if self.sweep is not None and self.sweep.service not in names:
            raise ScenarioError(
                f"sweep service {self.sweep.service!r} is not defined"
            )

    def service(self, name: str) -> ServiceSpec:
        for spec in self.services:
            if spec.name == name:
                return spec
        raise KeyError(name)


_STREAM_KEYS = {"topic", "rate_hz", "size", "payload"}
_SERVICE_KEYS = {
    "name", "node", "advertises", "requests", "start_s", "stop_s", "external",
}
_PROBES_KEYS = {"nodes", "ping_period_s", "ping_timeout_s"}
_SWEEP_KEYS = {"service", "nodes"}
_SCENARIO_KEYS = {
    "name", "duration_s", "seed", "config", "services", "probes", "sweep",
    "topology",
}


def _reject_unknown(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")


def _parse_stream(obj: object) -> StreamSpec:
    if not isinstance(obj, dict):
        raise ScenarioError(f"stream must be an object, got {type(obj).__name__}")
    _reject_unknown(obj, _STREAM_KEYS, "stream")
    try:
        return StreamSpec(
            topic=str(obj["topic"]),
            rate_hz=float(obj.get("rate_hz", 0.0)),
            size=int(obj.get("size", 0)),
            payload=str(obj.get("payload", "random")),
        )
    except KeyError as exc:
        raise ScenarioError(f"stream missing key {exc}") from None


def _parse_service(obj: object) -> ServiceSpec:
    if not isinstance(obj, dict):
        raise ScenarioError(f"service must be an object, got {type(obj).__name__}")
    _reject_unknown(obj, _SERVICE_KEYS, "service")
    try:
        name = str(obj["name"])
        node = str(obj["node"])
    except KeyError as exc:
        raise ScenarioError(f"service missing key {exc}") from None
    advertises = tuple(_parse_stream(s) for s in obj.get("advertises", []))
    requests = obj.get("requests", [])
    if not isinstance(requests, list):
        raise ScenarioError(f"service {name!r}: requests must be a list")
    stop_s = obj.get("stop_s")
    return ServiceSpec(
        name=name,
        node=node,
        advertises=advertises,
        requests=tuple(str(t) for t in requests),
        start_s=float(obj.get("start_s", 0.0)),
        stop_s=None if stop_s is None else float(stop_s),
        external=bool(obj.get("external", False)),
    )


def parse_scenario(obj: object) -> Scenario:
    """Validate a decoded scenario document and build the model."""
    if not isinstance(obj, dict):
        raise ScenarioError("scenario document must be a JSON object")
    _reject_unknown(obj, _SCENARIO_KEYS, "scenario")
    services = obj.get("services", [])
    if not isinstance(services, list) or not services:
        raise ScenarioError("scenario must define a non-empty services list")
    probes = None
    if "probes" in obj and obj["probes"] is not None:
        pobj = obj["probes"]
        if not isinstance(pobj, dict):
            raise ScenarioError("probes must be an object")
        _reject_unknown(pobj, _PROBES_KEYS, "probes")
        probes = ProbesSpec(
            nodes=tuple(str(n) for n in pobj.get("nodes", [])),
            ping_period_s=float(pobj.get("ping_period_s", 1.0)),
            ping_timeout_s=float(pobj.get("ping_timeout_s", 5.0)),
        )
    sweep = None
    if "sweep" in obj and obj["sweep"] is not None:
        sobj = obj["sweep"]
        if not isinstance(sobj, dict):
            raise ScenarioError("sweep must be an object")
        _reject_unknown(sobj, _SWEEP_KEYS, "sweep")
        try:
            sweep = SweepSpec(
                service=str(sobj["service"]),
                nodes=tuple(str(n) for n in sobj["nodes"]),
            )
        except KeyError as exc:
            raise ScenarioError(f"sweep missing key {exc}") from None
    config = obj.get("config", {})
    if not isinstance(config, dict):
        raise ScenarioError("config must be an object")
    topology = obj.get("topology")
    if topology is not None and not isinstance(topology, dict):
        raise ScenarioError("topology must be an object")
    try:
        name = str(obj["name"])
        duration = float(obj["duration_s"])
    except KeyError as exc:
        raise ScenarioError(f"scenario missing key {exc}") from None
    return Scenario(
        name=name,
        duration_s=duration,
        seed=int(obj.get("seed", 0)),
        config=config,
        services=tuple(_parse_service(s) for s in services),
        probes=probes,
        sweep=sweep,
        topology=topology,
    )


def builtin_scenarios() -> list[str]:
    """Names of the scenario files bundled with the package."""
    names = []
    for entry in resources.files(__package__).joinpath("scenarios").iterdir():
        if entry.name.endswith(".json"):
            names.append(entry.name[: -len(".json")])
    return sorted(names)


def load_scenario(ref: str | Path) -> Scenario:
    """Load a scenario from a file path, or by bundled name."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text()
    else:
        bundle = resources.files(__package__).joinpath(
            "scenarios", f"{ref}.json"
        )
        if not bundle.is_file():
            raise ScenarioError(
                f"no scenario file {ref!r} and no bundled scenario of that name "
                f"(bundled: {', '.join(builtin_scenarios())})"
            )
        text = bundle.read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario {ref}: invalid JSON: {exc}") from None
    return parse_scenario(obj)


def make_payload(kind: str, size: int, rng: random.Random) -> bytes:
    """Generate one message payload of the given texture."""
    if size <= 0:
        return b""
    if kind == "zeros":
        return bytes(size)
    if kind == "compressible":
        unit = rng.randbytes(32)
        return (unit * (size // len(unit) + 1))[:size]
    if kind == "random":
        return rng.randbytes(size)
    raise ScenarioError(f"unknown payload kind {kind!r}")

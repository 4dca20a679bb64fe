"""Layered deployment model: layers, nodes, broker scopes, message types.

A deployment is an ordered stack of layers (edge first, most central
last). Every layer gets one intra-layer scope and one inter-layer scope;
every node gets an intra-node scope; a layer may additionally expose an
external-protocol scope for non-native clients. Scopes are the units a
broker endpoint binds to and the vertices bridges connect.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

RESERVED_PREFIX = "__"

# control topics (reserved namespace, never bridged by declaration)
FLOW_ADVERTISE = "__flow/advertise"
FLOW_REQUEST = "__flow/request"
FLOW_WITHDRAW = "__flow/withdraw"
CONFIG_REQUEST = "__config/req"
CONFIG_REPLY = "__config/rep"
CONFIG_NOTICE = "__config/notice"

ADVERTISE = "advertise"
REQUEST = "request"
DIRECTIONS = (ADVERTISE, REQUEST)


class TopologyError(ValueError):
    """Raised for malformed topology specs or unknown layer/node lookups."""


class ScopeKind(str, Enum):
    INTRA_NODE = "intra_node"
    INTRA_LAYER = "intra_layer"
    INTER_LAYER = "inter_layer"
    EXTERNAL = "external_protocol"


@dataclass(frozen=True, order=True)
class LayerId:
    """A named layer with its depth in the stack (0 = outermost edge)."""

    depth: int
    name: str


@dataclass(frozen=True, order=True)
class NodeId:
    layer: str
    name: str

    @property
    def key(self) -> str:
        return f"{self.name}@{self.layer}"


@dataclass(frozen=True, order=True)
class BrokerScope:
    """Identity of one broker endpoint: kind plus owning layer or node."""

    kind: ScopeKind
    layer: str
    node: str | None = None

    def __post_init__(self) -> None:
        if self.kind is ScopeKind.INTRA_NODE:
            if self.node is None:
                raise TopologyError("intra_node scope requires a node")
        elif self.node is not None:
            raise TopologyError(f"{self.kind.value} scope must not name a node")

    @property
    def key(self) -> str:
        if self.node is not None:
            return f"{self.kind.value}:{self.node}@{self.layer}"
        return f"{self.kind.value}:{self.layer}"

    def __str__(self) -> str:
        return self.key


@dataclass(frozen=True)
class MessageEnvelope:
    """One published message as carried between scopes.

    ``sequence`` is per (origin_node, topic) and assigned at publish
    time; together they identify the message for deduplication.
    ``sent_at`` is virtual time in ns. When ``compressed`` is set,
    ``payload`` holds codec output and ``uncompressed_len`` the original
    size; otherwise ``uncompressed_len`` equals ``payload_len``.
    """

    topic: str
    payload: bytes
    origin_node: NodeId
    origin_layer: str
    sequence: int
    sent_at: int
    payload_len: int = -1
    compressed: bool = False
    uncompressed_len: int = -1

    def __post_init__(self) -> None:
        if not self.topic:
            raise ValueError("empty topic")
        if self.sequence < 1:
            raise ValueError("sequence starts at 1")
        if self.payload_len < 0:
            object.__setattr__(self, "payload_len", len(self.payload))
        elif self.payload_len != len(self.payload):
            raise ValueError("payload_len does not match payload")
        if self.uncompressed_len < 0:
            if self.compressed:
                raise ValueError("compressed envelope requires uncompressed_len")
            object.__setattr__(self, "uncompressed_len", self.payload_len)
        if self.compressed and self.uncompressed_len < self.payload_len:
            raise ValueError("compressed payload larger than original")
        if not self.compressed and self.uncompressed_len != self.payload_len:
            raise ValueError("uncompressed envelope with mismatched uncompressed_len")

    @property
    def stream_key(self) -> tuple[NodeId, str]:
        return (self.origin_node, self.topic)


def serialize_envelope(env: MessageEnvelope) -> bytes:
    """Wire format: one JSON header line, then the raw payload bytes."""
    header = {
        "topic": env.topic,
        "origin_node": [env.origin_node.layer, env.origin_node.name],
        "origin_layer": env.origin_layer,
        "sequence": env.sequence,
        "sent_at": env.sent_at,
        "payload_len": env.payload_len,
        "compressed": env.compressed,
        "uncompressed_len": env.uncompressed_len,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n" + env.payload


def parse_envelope(data: bytes) -> MessageEnvelope:
    head, _, payload = data.partition(b"\n")
    h = json.loads(head)
    if len(payload) != h["payload_len"]:
        raise ValueError("payload truncated")
    return MessageEnvelope(
        topic=h["topic"],
        payload=payload,
        origin_node=NodeId(h["origin_node"][0], h["origin_node"][1]),
        origin_layer=h["origin_layer"],
        sequence=h["sequence"],
        sent_at=h["sent_at"],
        payload_len=h["payload_len"],
        compressed=h["compressed"],
        uncompressed_len=h["uncompressed_len"],
    )


@dataclass(frozen=True)
class FlowDeclaration:
    """An advertise or request for one topic, as flooded between layers.

    ``visited_layers`` lists every layer that has already forwarded the
    declaration; the origin layer stamps itself in before the first
    forward, and receivers only forward to layers not yet listed.
    """

    direction: str
    topic: str
    origin_node: NodeId
    origin_layer: str
    declared_rate: float = 0.0
    declared_max_size: int = 0
    visited_layers: frozenset[str] = field(default=frozenset())

    def __post_init__(self) -> None:
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if not self.topic:
            raise ValueError("empty topic")
        if self.declared_rate < 0 or self.declared_max_size < 0:
            raise ValueError("declared rate/size must be >= 0")
        if not self.visited_layers:
            object.__setattr__(self, "visited_layers", frozenset({self.origin_layer}))
        elif self.origin_layer not in self.visited_layers:
            raise ValueError("origin layer missing from visited_layers")

    def visit(self, layer: str) -> "FlowDeclaration":
        return replace(self, visited_layers=self.visited_layers | {layer})

    def to_obj(self) -> dict[str, Any]:
        return {
            "direction": self.direction,
            "topic": self.topic,
            "origin_node": [self.origin_node.layer, self.origin_node.name],
            "origin_layer": self.origin_layer,
            "declared_rate": self.declared_rate,
            "declared_max_size": self.declared_max_size,
            "visited_layers": sorted(self.visited_layers),
        }

    @classmethod
    def from_obj(cls, obj: dict[str, Any]) -> "FlowDeclaration":
        return cls(
            direction=obj["direction"],
            topic=obj["topic"],
            origin_node=NodeId(obj["origin_node"][0], obj["origin_node"][1]),
            origin_layer=obj["origin_layer"],
            declared_rate=obj["declared_rate"],
            declared_max_size=obj["declared_max_size"],
            visited_layers=frozenset(obj["visited_layers"]),
        )


class SequenceCounter:
    """Per-node monotonic sequence numbers, one stream per topic."""

    def __init__(self) -> None:
        self._last: dict[str, int] = {}
        self._lock = threading.Lock()

    def next(self, topic: str) -> int:
        with self._lock:
            seq = self._last.get(topic, 0) + 1
            self._last[topic] = seq
            return seq

    def last(self, topic: str) -> int:
        with self._lock:
            return self._last.get(topic, 0)


class Topology:
    """Validated deployment: ordered layers, their nodes, and all scopes."""

    def __init__(self, layers: Iterable[tuple[str, list[str]]], external: Iterable[str] = ()):
        self.layers: tuple[LayerId, ...] = tuple(
            LayerId(i, name) for i, (name, _) in enumerate(layers)
        )
        names = [l.name for l in self.layers]
        if not names:
            raise TopologyError("at least one layer required")
        if len(set(names)) != len(names):
            raise TopologyError("duplicate layer name")
        self._layer_by_name = {l.name: l for l in self.layers}
        self.external_layers = frozenset(external)
        for name in self.external_layers:
            if name not in self._layer_by_name:
                raise TopologyError(f"external_protocol on unknown layer {name!r}")

        self._nodes_by_layer: dict[str, tuple[NodeId, ...]] = {}
        self._node_by_name: dict[str, NodeId] = {}
        for layer_name, node_names in layers:
            if not node_names:
                raise TopologyError(f"layer {layer_name!r} has no nodes")
            nodes = []
            for n in node_names:
                if n in self._node_by_name:
                    raise TopologyError(f"duplicate node name {n!r}")
                node = NodeId(layer_name, n)
                self._node_by_name[n] = node
                nodes.append(node)
            self._nodes_by_layer[layer_name] = tuple(nodes)

        scopes: dict[str, BrokerScope] = {}
        for layer in self.layers:
            for s in (
                BrokerScope(ScopeKind.INTRA_LAYER, layer.name),
                BrokerScope(ScopeKind.INTER_LAYER, layer.name),
            ):
                scopes[s.key] = s
            if layer.name in self.external_layers:
                s = BrokerScope(ScopeKind.EXTERNAL, layer.name)
                scopes[s.key] = s
            for node in self._nodes_by_layer[layer.name]:
                s = BrokerScope(ScopeKind.INTRA_NODE, layer.name, node.name)
                scopes[s.key] = s
        self.scopes: dict[str, BrokerScope] = scopes

    # -- lookups -------------------------------------------------------

    def layer(self, name: str) -> LayerId:
        try:
            return self._layer_by_name[name]
        except KeyError:
            raise TopologyError(f"unknown layer {name!r}") from None

    def node(self, name: str) -> NodeId:
        try:
            return self._node_by_name[name]
        except KeyError:
            raise TopologyError(f"unknown node {name!r}") from None

    def nodes_in(self, layer: str) -> tuple[NodeId, ...]:
        self.layer(layer)
        return self._nodes_by_layer[layer]

    @property
    def nodes(self) -> tuple[NodeId, ...]:
        return tuple(self._node_by_name[n] for n in sorted(self._node_by_name))

    @property
    def most_central_layer(self) -> LayerId:
        return self.layers[-1]

    def scopes_for_layer(self, layer: str) -> tuple[BrokerScope, ...]:
        self.layer(layer)
        return tuple(s for s in self.scopes.values() if s.layer == layer)

    def intra_node_scope(self, node: str) -> BrokerScope:
        n = self.node(node)
        return self.scopes[f"{ScopeKind.INTRA_NODE.value}:{n.name}@{n.layer}"]

    def intra_layer_scope(self, layer: str) -> BrokerScope:
        self.layer(layer)
        return self.scopes[f"{ScopeKind.INTRA_LAYER.value}:{layer}"]

    def inter_layer_scope(self, layer: str) -> BrokerScope:
        self.layer(layer)
        return self.scopes[f"{ScopeKind.INTER_LAYER.value}:{layer}"]

    def external_scope(self, layer: str) -> BrokerScope:
        self.layer(layer)
        key = f"{ScopeKind.EXTERNAL.value}:{layer}"
        if key not in self.scopes:
            raise TopologyError(f"layer {layer!r} has no external_protocol scope")
        return self.scopes[key]

    def default_scope_for(self, node: str) -> BrokerScope:
        """Where a node's services attach: intra_node on the outermost
        (edge) layer, intra_layer on every deeper layer."""
        n = self.node(node)
        if self.layer(n.layer).depth == 0:
            return self.intra_node_scope(node)
        return self.intra_layer_scope(n.layer)

    def system_node(self, layer: str) -> NodeId:
        """First declared node of a layer; hosts layer-level system agents."""
        return self.nodes_in(layer)[0]

    def layer_pairs(self) -> list[tuple[str, str]]:
        """All unordered layer pairs, nearest-neighbor first."""
        names = [l.name for l in self.layers]
        pairs = []
        for span in range(1, len(names)):
            for i in range(len(names) - span):
                pairs.append((names[i], names[i + span]))
        return pairs

    # -- spec round-trip -----------------------------------------------

    def to_spec(self) -> dict[str, Any]:
        return {
            "layers": [
                {
                    "name": l.name,
                    "nodes": [n.name for n in self._nodes_by_layer[l.name]],
                    **({"external_protocol": True} if l.name in self.external_layers else {}),
                }
                for l in self.layers
            ]
        }


def build_topology(spec: dict[str, Any]) -> Topology:
    """Build and validate a Topology from its dict spec.

    Expected shape::

        {"layers": [{"name": "edge", "nodes": ["robot-1"],
                     "external_protocol": true}, ...]}

    Layers are ordered outermost (edge) first. Unknown keys inside a
    layer entry are rejected; a ``links`` key at the top level is
    allowed and ignored here (the network consumes it).
    """
    if not isinstance(spec, dict) or "layers" not in spec:
        raise TopologyError("topology spec must be a dict with a 'layers' list")
    known_top = {"layers", "links"}
    extra = set(spec) - known_top
    if extra:
        raise TopologyError(f"unknown topology keys: {sorted(extra)}")
    layers: list[tuple[str, list[str]]] = []
    external: list[str] = []
    for entry in spec["layers"]:
        if not isinstance(entry, dict):
            raise TopologyError("each layer entry must be a dict")
        unknown = set(entry) - {"name", "nodes", "external_protocol"}
        if unknown:
            raise TopologyError(f"unknown layer keys: {sorted(unknown)}")
        try:
            name = entry["name"]
            nodes = list(entry["nodes"])
        except KeyError as e:
            raise TopologyError(f"layer entry missing {e.args[0]!r}") from None
        layers.append((name, nodes))
        if entry.get("external_protocol", False):
            external.append(name)
    return Topology(layers, external)


def load_topology(path: str) -> tuple[Topology, dict[str, Any]]:
    """Read a topology JSON file; returns (topology, links section)."""
    with open(path, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    topo = build_topology(spec)
    links = spec.get("links", {})
    return topo, links

"""Flow engine: declaration flooding and dynamic bridge management.

One engine runs per layer, attached to every broker scope of that
layer. Services announce advertise/request declarations on their local
scope; the engine stores them, floods them once onto the inter-layer
bus (loop-guarded by the declaration's visited_layers set), and keeps
the bridge set reconciled with the table:

    for every topic, one bridge per (advertiser scope, requester scope)
    pair with distinct scopes; remote declarations count under the
    layer's inter_layer scope.

A bridge is a subscription on the source scope that republishes fresh
envelopes on the destination scope. Freshness comes from a dedupe
window shared by all bridges into the same destination scope (keyed by
origin node and topic), which also marks envelopes observed at the
source scope; that closes both echo loops (A->B followed by B->A) and
multi-path double delivery (two bridges into one scope).

Bridges into the inter_layer scope pass the hierarchical rate limiter
of their traffic client (the source node, or the layer for layer-wide
scopes) and compress payloads at or above the configured threshold; the
matching decompression happens on bridges leaving the inter_layer
scope, so local subscribers always see original bytes.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Any, Callable, Iterable, Optional

from . import codec
from .broker import SUB_BRIDGE, SUB_CONTROL, SubscriberHandle
from .monitor import HeartbeatRegistry, MetricsRegistry
from .ratelimit import HierarchicalLimiter, RateLimitConfig
from .simnet import SECOND, Network
from .topology import (
    ADVERTISE,
    CONFIG_NOTICE,
    FLOW_ADVERTISE,
    FLOW_REQUEST,
    FLOW_WITHDRAW,
    REQUEST,
    BrokerScope,
    FlowDeclaration,
    MessageEnvelope,
    NodeId,
    ScopeKind,
    SequenceCounter,
    Topology,
)
from .tracing import Trace

CONTROL_TOPIC = {ADVERTISE: FLOW_ADVERTISE, REQUEST: FLOW_REQUEST}


class DedupeWindow:
    """Per-destination-scope duplicate filter.

    Tracks, per (origin node, topic) stream, the highest sequence seen
    plus a bounded ring of recently seen sequences. A sequence is fresh
    when it was never recorded and is not older than the ring span;
    anything ambiguous counts as a duplicate, keeping delivery
    at-most-once.
    """

    __slots__ = ("capacity", "_streams")

    def __init__(self, capacity: int = 1024):
        self.capacity = capacity
        self._streams: dict[tuple[str, str], tuple[list, OrderedDict]] = {}

    def _stream(self, origin: str, topic: str) -> tuple[list, OrderedDict]:
        key = (origin, topic)
        st = self._streams.get(key)
        if st is None:
            st = ([0], OrderedDict())  # [highest], recent-seen ring
            self._streams[key] = st
        return st

    def record(self, origin: str, topic: str, seq: int) -> None:
        highest, recent = self._stream(origin, topic)
        if seq > highest[0]:
            highest[0] = seq
        if seq not in recent:
            recent[seq] = None
            while len(recent) > self.capacity:
                recent.popitem(last=False)

    def test_and_record(self, origin: str, topic: str, seq: int) -> bool:
        """True (and records it) when this sequence was not seen before."""
        highest, recent = self._stream(origin, topic)
        if seq in recent:
            return False
        if seq <= highest[0] - self.capacity:
            return False  # too old to judge; drop rather than risk a dup
        self.record(origin, topic, seq)
        return True


@dataclass
class TableEntry:
    """Merged declarations for one (direction, topic, origin, scope)."""

    origin_node: NodeId
    origin_layer: str
    declared_rate: float = 0.0
    declared_max_size: int = 0
    contributors: set[str] = field(default_factory=set)


TableKey = tuple[str, str, str, str]  # (direction, topic, origin key, scope key)


class FlowTable:
    def __init__(self) -> None:
        self.entries: dict[TableKey, TableEntry] = {}

    def store(self, direction: str, scope_key: str, decl: FlowDeclaration, service: str) -> bool:
        """Merge a declaration in; True when the table state changed."""
        key = (direction, decl.topic, decl.origin_node.key, scope_key)
        ent = self.entries.get(key)
        if ent is None:
            self.entries[key] = TableEntry(
                decl.origin_node, decl.origin_layer,
                decl.declared_rate, decl.declared_max_size, {service},
            )
            return True
        changed = False
        if decl.declared_rate > ent.declared_rate:
            ent.declared_rate = decl.declared_rate
            changed = True
        if decl.declared_max_size > ent.declared_max_size:
            ent.declared_max_size = decl.declared_max_size
            changed = True
        if service not in ent.contributors:
            ent.contributors.add(service)
            changed = True
        return changed

    def remove_contributor(self, direction: str, topic: str, origin_key: str, service: str) -> bool:
        """Drop one contributor everywhere it matches; True if an entry died."""
        died = False
        for key in [k for k in self.entries
                    if k[0] == direction and k[1] == topic and k[2] == origin_key]:
            ent = self.entries[key]
            ent.contributors.discard(service)
            if not ent.contributors:
                del self.entries[key]
                died = True
        return died

    def lookup(self, topic: str) -> dict[TableKey, TableEntry]:
        return {k: v for k, v in self.entries.items() if k[1] == topic}

    def topics(self) -> list[str]:
        return sorted({k[1] for k in self.entries})

    def contributions(self, service: str) -> list[tuple[TableKey, TableEntry]]:
        return [(k, e) for k, e in self.entries.items() if service in e.contributors]

    def scopes(self, direction: str, topic: str) -> set[str]:
        return {k[3] for k in self.entries if k[0] == direction and k[1] == topic}

    def advertisers_at(self, topic: str, scope_key: str) -> list[TableEntry]:
        return [e for k, e in self.entries.items()
                if k[0] == ADVERTISE and k[1] == topic and k[3] == scope_key]


BridgeKey = tuple[str, str, str]  # (topic, source scope key, dest scope key)


def compute_required_bridges(table: FlowTable, scopes: Iterable[BrokerScope]) -> set[BridgeKey]:
    """Pure bridge-set computation from one engine's table.

    Every (advertiser scope, requester scope) pair of a topic yields one
    bridge when the scopes differ; a pair within one scope needs none
    (scope-local delivery is direct).
    """
    known = {s.key for s in scopes}
    required: set[BridgeKey] = set()
    for topic in {k[1] for k in table.entries}:
        advs = table.scopes(ADVERTISE, topic) & known
        reqs = table.scopes(REQUEST, topic) & known
        for a in advs:
            for r in reqs:
                if a != r:
                    required.add((topic, a, r))
    return required


@dataclass
class BridgeSpec:
    """One installed bridge."""

    topic: str
    source: BrokerScope
    dest: BrokerScope
    dedupe_window: DedupeWindow
    client: str | None  # limiter client when dest is inter_layer
    handle: SubscriberHandle | None = None
    created_at: int = 0

    @property
    def key(self) -> BridgeKey:
        return (self.topic, self.source.key, self.dest.key)


class FlowEngineError(Exception):
    pass


class FlowEngine:
    """Declaration store, flooder, and bridge manager for one layer."""

    def __init__(
        self,
        layer: str,
        topology: Topology,
        network: Network,
        heartbeats: HeartbeatRegistry,
        seq: SequenceCounter,
        limit_cfg: RateLimitConfig | None = None,
        config_source: Optional[Callable[[], dict]] = None,
        registry: MetricsRegistry | None = None,
        trace: Trace | None = None,
        watchdog_period_ns: int = SECOND,
        heartbeat_ttl_ns: int = 3 * SECOND,
    ):
        self.layer = topology.layer(layer).name
        self.topology = topology
        self.network = network
        self.clock = network.clock
        self.heartbeats = heartbeats
        self.seq = seq
        self.registry = registry if registry is not None else network.metrics
        self.trace = trace if trace is not None else network.trace
        self.limit_cfg = limit_cfg or RateLimitConfig()
        self.config_source = config_source
        self.watchdog_period_ns = watchdog_period_ns
        self.heartbeat_ttl_ns = heartbeat_ttl_ns

        self.scopes: list[BrokerScope] = list(topology.scopes_for_layer(self.layer))
        self.scope_by_key = {s.key: s for s in self.scopes}
        self.inter_scope = topology.inter_layer_scope(self.layer)
        self.system_node = topology.system_node(self.layer)
        self.service_name = f"__flow-engine/{self.layer}"
        self._all_layers = frozenset(l.name for l in topology.layers)

        self.table = FlowTable()
        self.bridges: dict[BridgeKey, BridgeSpec] = {}
        self.windows: dict[str, DedupeWindow] = {s.key: DedupeWindow() for s in self.scopes}
        self.limiters: dict[str, HierarchicalLimiter] = {}
        self.running = False
        self._subs: list[SubscriberHandle] = []

    # -- lifecycle -------------------------------------------------------

    def start(self) -> None:
        if self.running:
            return
        self.running = True
        for scope in self.scopes:
            ep = self.network.endpoint(scope)
            # own forwards reflected off the bus are filtered at the source
            flt = None
            if scope.kind is ScopeKind.INTER_LAYER:
                flt = lambda env: env.origin_layer != self.layer
            for topic in (FLOW_ADVERTISE, FLOW_REQUEST, FLOW_WITHDRAW):
                self._subs.append(ep.subscribe(
                    topic, partial(self._on_control, scope), kind=SUB_CONTROL,
                    filter=flt, owner=self.service_name,
                ))
        intra = self.network.endpoint(self.topology.intra_layer_scope(self.layer))
        self._subs.append(intra.subscribe(
            CONFIG_NOTICE, self._on_config_notice, kind=SUB_CONTROL, owner=self.service_name,
        ))
        self.heartbeats.refresh(self.service_name, self.system_node.name, self.heartbeat_ttl_ns)
        self.clock.call_in(self.watchdog_period_ns, self._watchdog_scan)

    def stop(self) -> None:
        if not self.running:
            return
        self.running = False
        for h in self._subs:
            self.network.endpoint(h.scope).unsubscribe(h)
        self._subs.clear()
        for bridge in list(self.bridges.values()):
            self._remove_bridge(bridge)
        self.heartbeats.remove(self.service_name, self.system_node.name)

    # -- declaration intake ------------------------------------------------

    def announce(self, decl: FlowDeclaration, service: str = "anonymous",
                 scope: BrokerScope | None = None) -> list[BridgeSpec]:
        """Admit a local declaration; returns bridges created by it."""
        if scope is None:
            scope = self.topology.default_scope_for(decl.origin_node.name)
        if scope.key not in self.scope_by_key:
            raise FlowEngineError(f"scope {scope.key} is not on layer {self.layer}")
        return self._admit(decl, service, scope)

    def withdraw(self, decl: FlowDeclaration, service: str = "anonymous") -> list[BridgeKey]:
        """Remove a local declaration; returns bridge keys torn down."""
        return self._retract(decl, service)

    def _admit(self, decl: FlowDeclaration, service: str, scope: BrokerScope) -> list[BridgeSpec]:
        self.table.store(decl.direction, scope.key, decl, service)
        self._flood(CONTROL_TOPIC[decl.direction], decl, service)
        created, _ = self._reconcile()
        return created

    def _retract(self, decl: FlowDeclaration, service: str) -> list[BridgeKey]:
        self.table.remove_contributor(decl.direction, decl.topic, decl.origin_node.key, service)
        self._flood(FLOW_WITHDRAW, decl, service)
        _, removed = self._reconcile()
        return removed

    def _flood(self, control_topic: str, decl: FlowDeclaration, service: str) -> None:
        """Forward once onto the bus when any layer has not seen it yet."""
        unvisited = self._all_layers - decl.visited_layers - {self.layer}
        if not unvisited:
            return
        # the bus reaches every layer in one hop, so stamp them all
        out = decl
        for name in sorted(self._all_layers):
            if name not in out.visited_layers:
                out = out.visit(name)
        body = {"decl": out.to_obj(), "service": service, "sender_layer": self.layer}
        self._publish_control(control_topic, body)

    def _publish_control(self, topic: str, body: dict[str, Any]) -> None:
        env = MessageEnvelope(
            topic=topic,
            payload=json.dumps(body, sort_keys=True).encode(),
            origin_node=self.system_node,
            origin_layer=self.layer,
            sequence=self.seq.next(topic),
            sent_at=self.clock.now,
        )
        self.network.endpoint(self.inter_scope).publish(env)

    def _on_control(self, scope: BrokerScope, env: MessageEnvelope) -> None:
        body = json.loads(env.payload)
        if scope.kind is ScopeKind.INTER_LAYER and body.get("sender_layer") == self.layer:
            return
        decl = FlowDeclaration.from_obj(body["decl"])
        service = body.get("service", "anonymous")
        if env.topic == FLOW_WITHDRAW:
            self.table.remove_contributor(decl.direction, decl.topic,
                                          decl.origin_node.key, service)
            self._flood(FLOW_WITHDRAW, decl, service)
            self._reconcile()
        else:
            self._admit(decl, service, scope)

    # -- reconciliation ----------------------------------------------------

    def _client_key(self, scope: BrokerScope) -> str:
        if scope.kind is ScopeKind.INTRA_NODE:
            return f"node:{scope.node}"
        return f"layer:{scope.layer}"

    def _reconcile(self) -> tuple[list[BridgeSpec], list[BridgeKey]]:
        required = compute_required_bridges(self.table, self.scopes)
        current = set(self.bridges)
        created: list[BridgeSpec] = []
        removed: list[BridgeKey] = []
        for key in sorted(current - required):
            removed.append(key)
            self._remove_bridge(self.bridges[key])
        for key in sorted(required - current):
            created.append(self._install_bridge(key))
        if created or removed:
            self.registry.observe("flow.bridges", {"layer": self.layer}, len(self.bridges))
        self._sync_limiters()
        return created, removed

    def _install_bridge(self, key: BridgeKey) -> BridgeSpec:
        topic, src_key, dst_key = key
        source = self.scope_by_key[src_key]
        dest = self.scope_by_key[dst_key]
        client = self._client_key(source) if dest.kind is ScopeKind.INTER_LAYER else None
        bridge = BridgeSpec(
            topic=topic, source=source, dest=dest,
            dedupe_window=self.windows[dst_key], client=client,
            created_at=self.clock.now,
        )
        bridge.handle = self.network.endpoint(source).subscribe(
            topic, partial(self._on_bridge_message, bridge), kind=SUB_BRIDGE,
            owner=f"{self.service_name}:{src_key}->{dst_key}",
        )
        self.bridges[key] = bridge
        self.trace.record("bridge_installed", self.clock.now, layer=self.layer,
                          topic=topic, source=src_key, dest=dst_key)
        return bridge

    def _remove_bridge(self, bridge: BridgeSpec) -> None:
        if bridge.handle is not None:
            self.network.endpoint(bridge.source).unsubscribe(bridge.handle)
        self.bridges.pop(bridge.key, None)
        self.trace.record("bridge_removed", self.clock.now, layer=self.layer,
                          topic=bridge.topic, source=bridge.source.key, dest=bridge.dest.key)

    def _sync_limiters(self) -> None:
        """Align each traffic client's registrations with its inter bridges."""
        desired: dict[str, dict[str, tuple[float, int]]] = {}
        for key in sorted(self.bridges):
            bridge = self.bridges[key]
            if bridge.client is None:
                continue
            regs = desired.setdefault(bridge.client, {})
            entries = self.table.advertisers_at(bridge.topic, bridge.source.key)
            rate = sum(e.declared_rate for e in entries)
            size = max((e.declared_max_size for e in entries), default=0)
            if bridge.topic in regs:
                r0, s0 = regs[bridge.topic]
                regs[bridge.topic] = (r0 + rate, max(s0, size))
            else:
                regs[bridge.topic] = (rate, size)
        for client in sorted(set(self.limiters) - set(desired)):
            del self.limiters[client]
        for client in sorted(desired):
            limiter = self.limiters.get(client)
            if limiter is None:
                limiter = HierarchicalLimiter(self.limit_cfg, self.clock, client, self.registry)
                self.limiters[client] = limiter
            limiter.sync_publishers(desired[client])

    # -- data path -----------------------------------------------------------

    def _on_bridge_message(self, bridge: BridgeSpec, env: MessageEnvelope) -> None:
        origin = env.origin_node.key
        self.windows[bridge.source.key].record(origin, env.topic, env.sequence)
        if not bridge.dedupe_window.test_and_record(origin, env.topic, env.sequence):
            self.registry.inc("flow.drop.dedupe", {"topic": env.topic})
            return
        if bridge.client is not None:
            limiter = self.limiters.get(bridge.client)
            if limiter is None:  # bridge raced ahead of limiter sync
                limiter = HierarchicalLimiter(self.limit_cfg, self.clock, bridge.client, self.registry)
                self.limiters[bridge.client] = limiter
            limiter.observe_size(env.topic, env.uncompressed_len)
            if not limiter.try_acquire(env.topic):
                self.registry.inc("flow.drop.limiter", {"topic": env.topic})
                return
            env = self._maybe_compress(env)
        elif env.compressed:
            env = self._decompress(env)
        self.network.endpoint(bridge.dest).publish(env)
        self.registry.inc("flow.delivered", {"topic": env.topic})
        self.registry.inc(
            "flow.forwarded",
            {"topic": env.topic, "source": bridge.source.key, "dest": bridge.dest.key},
        )

    def _maybe_compress(self, env: MessageEnvelope) -> MessageEnvelope:
        cfg = self.limit_cfg
        if env.compressed or cfg.compression_level == 0:
            return env
        if env.payload_len < cfg.large_threshold:
            return env
        blob, orig = codec.compress(env.payload, cfg.compression_level)
        if len(blob) >= orig:
            return env  # incompressible; ship original bytes
        return replace(env, payload=blob, payload_len=len(blob),
                       compressed=True, uncompressed_len=orig)

    def _decompress(self, env: MessageEnvelope) -> MessageEnvelope:
        data = codec.decompress(env.payload)
        if len(data) != env.uncompressed_len:
            raise FlowEngineError(
                f"decompressed length {len(data)} != declared {env.uncompressed_len}")
        return replace(env, payload=data, payload_len=len(data),
                       compressed=False, uncompressed_len=len(data))

    # -- config and watchdog ---------------------------------------------------

    def _on_config_notice(self, env: MessageEnvelope) -> None:
        body = json.loads(env.payload)
        if body.get("scope") != "layer" or body.get("subject") != self.layer:
            return
        if not any(p == "rate_limit" or p.startswith("rate_limit.")
                   for p in body.get("changed_paths", ())):
            return
        if self.config_source is None:
            return
        cfg = RateLimitConfig.from_obj(self.config_source().get("rate_limit", {}))
        if cfg == self.limit_cfg:
            return
        self.limit_cfg = cfg
        for client in sorted(self.limiters):
            self.limiters[client].reconfigure(cfg)
        self.trace.record("limit_reconfig", self.clock.now, layer=self.layer,
                          limit_mbps=cfg.limit_mbps)

    def _watchdog_scan(self) -> None:
        if not self.running:
            return
        self.heartbeats.refresh(self.service_name, self.system_node.name, self.heartbeat_ttl_ns)
        for service, node in self.heartbeats.expire():
            self._withdraw_dead(service, node)
        self.clock.call_in(self.watchdog_period_ns, self._watchdog_scan)

    def _withdraw_dead(self, service: str, node: str) -> None:
        """Synthesize withdrawals for everything a dead service declared."""
        local_keys = set(self.scope_by_key) - {self.inter_scope.key}
        doomed = [
            (key, ent) for key, ent in self.table.contributions(service)
            if key[3] in local_keys and ent.origin_node.name == node
        ]
        for (direction, topic, _origin, _scope), ent in doomed:
            decl = FlowDeclaration(
                direction=direction, topic=topic, origin_node=ent.origin_node,
                origin_layer=ent.origin_layer, declared_rate=ent.declared_rate,
                declared_max_size=ent.declared_max_size,
            )
            self.trace.record("watchdog_withdraw", self.clock.now, layer=self.layer,
                              service=service, topic=topic, direction=direction)
            self._retract(decl, service)

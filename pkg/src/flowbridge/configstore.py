"""Distributed configuration: main store, per-layer workers, notices.

The main store lives on the most central layer and owns versioned
documents keyed by (scope, subject): layer, node, or service configs.
Each layer runs a worker that pulls the relevant documents over the
inter-layer bus on a fixed period and serves reads locally; reads fall
back to built-in defaults (revision 0) until a stored document arrives.
After applying a newer revision the worker publishes one
ConfigChangeNotice on its layer's intra-layer scope listing the changed
key paths, which is what drives live reconfiguration (for example the
flow engine re-running its rate-limit allocation).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Callable, Iterable

from .broker import SUB_CONTROL
from .monitor import MetricsRegistry
from .ratelimit import RateLimitConfig
from .simnet import Network
from .topology import (
    CONFIG_NOTICE,
    CONFIG_REPLY,
    CONFIG_REQUEST,
    MessageEnvelope,
    SequenceCounter,
    Topology,
)
from .tracing import Trace

log = logging.getLogger(__name__)

SCOPES = ("layer", "node", "service")


def default_layer_config() -> dict[str, Any]:
    return {
        "rate_limit": RateLimitConfig().to_obj(),
        "flow": {
            "reannounce_s": 10.0,
            "heartbeat_s": 1.0,
            "heartbeat_ttl_s": 3.0,
            "watchdog_s": 1.0,
        },
        "config": {"sync_period_s": 5.0},
        "monitor": {"ping_period_s": 1.0, "ping_timeout_s": 5.0},
    }


def merge_config(base: dict, override: dict) -> dict:
    """Recursive dict merge; override wins on leaves."""
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = v
    return out


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ConfigDocument:
    scope: str
    subject: str
    revision: int
    body: dict

    def to_obj(self) -> dict:
        return {"scope": self.scope, "subject": self.subject,
                "revision": self.revision, "body": self.body}

    @classmethod
    def from_obj(cls, obj: dict) -> "ConfigDocument":
        return cls(obj["scope"], obj["subject"], obj["revision"], obj["body"])


@dataclass(frozen=True)
class ConfigChangeNotice:
    scope: str
    subject: str
    revision: int
    changed_paths: tuple[str, ...]

    def to_obj(self) -> dict:
        return {"scope": self.scope, "subject": self.subject,
                "revision": self.revision, "changed_paths": list(self.changed_paths)}


def canonical(body: dict) -> str:
    """Canonical JSON text; also validates serializability."""
    try:
        return json.dumps(body, sort_keys=True, separators=(",", ":"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config body not JSON-serializable: {exc}") from None


def diff_paths(old: dict, new: dict, prefix: str = "") -> list[str]:
    """Dotted paths whose leaf values differ between two bodies."""
    paths: list[str] = []
    keys = set(old) | set(new)
    for key in sorted(keys):
        path = f"{prefix}{key}"
        a, b = old.get(key), new.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            paths.extend(diff_paths(a, b, path + "."))
        elif key not in old or key not in new or a != b:
            paths.append(path)
    return paths


class MainConfigStore:
    """Authoritative document set with monotonic per-document revisions."""

    def __init__(self, topology: Topology, layer_defaults: dict[str, dict] | None = None,
                 path: str | None = None):
        self.topology = topology
        base = default_layer_config()
        self._layer_defaults = {
            l.name: merge_config(base, (layer_defaults or {}).get(l.name, {}))
            for l in topology.layers
        }
        unknown = set(layer_defaults or {}) - {l.name for l in topology.layers}
        if unknown:
            raise ConfigError(f"defaults for unknown layers: {sorted(unknown)}")
        self.docs: dict[tuple[str, str], ConfigDocument] = {}
        self.path = path
        if path and os.path.exists(path):
            self._load(path)

    def default_body(self, scope: str, subject: str) -> dict:
        if scope == "layer":
            return json.loads(canonical(self._layer_defaults[subject]))
        return {}

    def _validate_subject(self, scope: str, subject: str) -> None:
        if scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}, got {scope!r}")
        if scope == "layer":
            self.topology.layer(subject)
        elif scope == "node":
            self.topology.node(subject)
        elif not subject:
            raise ConfigError("empty service subject")

    def put(self, scope: str, subject: str, body: dict) -> ConfigDocument:
        """Store a new revision; a byte-identical body is a no-op."""
        self._validate_subject(scope, subject)
        text = canonical(body)
        current = self.docs.get((scope, subject))
        if current is not None and canonical(current.body) == text:
            return current
        revision = (current.revision if current else 0) + 1
        doc = ConfigDocument(scope, subject, revision, json.loads(text))
        self.docs[(scope, subject)] = doc
        log.info("config put %s/%s rev %d", scope, subject, revision)
        if self.path:
            self.save(self.path)
        return doc

    def get(self, scope: str, subject: str) -> ConfigDocument:
        self._validate_subject(scope, subject)
        doc = self.docs.get((scope, subject))
        if doc is not None:
            return doc
        return ConfigDocument(scope, subject, 0, self.default_body(scope, subject))

    def snapshot_for_layer(self, layer: str) -> list[ConfigDocument]:
        """Stored documents relevant to one layer: its own, its nodes',
        and every service document."""
        self.topology.layer(layer)
        node_names = {n.name for n in self.topology.nodes_in(layer)}
        out = []
        for (scope, subject), doc in sorted(self.docs.items()):
            if scope == "layer" and subject != layer:
                continue
            if scope == "node" and subject not in node_names:
                continue
            out.append(doc)
        return out

    def save(self, path: str) -> None:
        data = [d.to_obj() for _, d in sorted(self.docs.items())]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"documents": data}, fh, sort_keys=True, indent=1)

    def _load(self, path: str) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        for obj in data.get("documents", ()):
            doc = ConfigDocument.from_obj(obj)
            self.docs[(doc.scope, doc.subject)] = doc


class MainConfigService:
    """Messaging front-end for the main store, living on the home layer."""

    def __init__(self, store: MainConfigStore, network: Network, seq: SequenceCounter,
                 registry: MetricsRegistry | None = None):
        self.store = store
        self.network = network
        self.clock = network.clock
        self.seq = seq
        self.registry = registry if registry is not None else network.metrics
        self.home_layer = store.topology.most_central_layer.name
        self.node = store.topology.system_node(self.home_layer)
        self._endpoint = network.endpoint(store.topology.inter_layer_scope(self.home_layer))
        self._sub = None

    def start(self) -> None:
        if self._sub is None:
            self._sub = self._endpoint.subscribe(
                CONFIG_REQUEST, self._on_request, kind=SUB_CONTROL, owner="__config-main")

    def stop(self) -> None:
        if self._sub is not None:
            self._endpoint.unsubscribe(self._sub)
            self._sub = None

    def put(self, scope: str, subject: str, body: dict) -> ConfigDocument:
        return self.store.put(scope, subject, body)

    def _on_request(self, env: MessageEnvelope) -> None:
        req = json.loads(env.payload)
        if req.get("op") != "pull":
            return
        docs = self.store.snapshot_for_layer(req["layer"])
        reply = {"corr": req["corr"], "docs": [d.to_obj() for d in docs]}
        out = MessageEnvelope(
            topic=CONFIG_REPLY,
            payload=json.dumps(reply, sort_keys=True).encode(),
            origin_node=self.node,
            origin_layer=self.home_layer,
            sequence=self.seq.next(CONFIG_REPLY),
            sent_at=self.clock.now,
        )
        self._endpoint.publish(out)
        self.registry.inc("config.pulls", {"layer": req["layer"]})


class ConfigWorker:
    """Per-layer replica: periodic pull, local reads, change notices."""

    def __init__(
        self,
        layer: str,
        topology: Topology,
        network: Network,
        seq: SequenceCounter,
        sync_period_ns: int,
        layer_defaults: dict[str, dict] | None = None,
        registry: MetricsRegistry | None = None,
        trace: Trace | None = None,
    ):
        self.layer = topology.layer(layer).name
        self.topology = topology
        self.network = network
        self.clock = network.clock
        self.seq = seq
        self.sync_period_ns = sync_period_ns
        self.registry = registry if registry is not None else network.metrics
        self.trace = trace if trace is not None else network.trace
        base = default_layer_config()
        self._layer_defaults = {
            l.name: merge_config(base, (layer_defaults or {}).get(l.name, {}))
            for l in topology.layers
        }
        self.node = topology.system_node(self.layer)
        self.replica: dict[tuple[str, str], ConfigDocument] = {}
        self.notices_sent = 0
        self.running = False
        self._subs: list = []
        self._pending: dict[str, int] = {}  # corr -> sent_at
        self._corr = 0
        self._inter = network.endpoint(topology.inter_layer_scope(self.layer))
        self._intra = network.endpoint(topology.intra_layer_scope(self.layer))

    # -- reads -----------------------------------------------------------

    def default_body(self, scope: str, subject: str) -> dict:
        if scope == "layer":
            defaults = self._layer_defaults.get(subject)
            if defaults is None:
                raise ConfigError(f"unknown layer {subject!r}")
            return json.loads(canonical(defaults))
        return {}

    def get_config(self, scope: str, subject: str) -> ConfigDocument:
        doc = self.replica.get((scope, subject))
        if doc is not None:
            return doc
        return ConfigDocument(scope, subject, 0, self.default_body(scope, subject))

    # -- sync loop ---------------------------------------------------------

    def start(self) -> None:
        if self.running:
            return
        self.running = True
        self._subs.append(self._inter.subscribe(
            CONFIG_REPLY, self._on_reply, kind=SUB_CONTROL, owner=f"__config-worker/{self.layer}"))
        self._sync_tick()

    def stop(self) -> None:
        self.running = False
        for h in self._subs:
            self.network.endpoint(h.scope).unsubscribe(h)
        self._subs.clear()

    def _sync_tick(self) -> None:
        if not self.running:
            return
        self.sync_now()
        self.clock.call_in(self.sync_period_ns, self._sync_tick)

    def sync_now(self) -> str:
        """Issue one pull request; returns its correlation id."""
        self._corr += 1
        corr = f"{self.layer}:{self._corr}"
        self._pending[corr] = self.clock.now
        body = {"op": "pull", "layer": self.layer, "corr": corr}
        env = MessageEnvelope(
            topic=CONFIG_REQUEST,
            payload=json.dumps(body, sort_keys=True).encode(),
            origin_node=self.node,
            origin_layer=self.layer,
            sequence=self.seq.next(CONFIG_REQUEST),
            sent_at=self.clock.now,
        )
        self._inter.publish(env)
        return corr

    def _on_reply(self, env: MessageEnvelope) -> None:
        body = json.loads(env.payload)
        if self._pending.pop(body.get("corr", ""), None) is None:
            return  # someone else's pull
        docs = [ConfigDocument.from_obj(o) for o in body.get("docs", ())]
        self.apply_snapshot(docs)

    def apply_snapshot(self, docs: Iterable[ConfigDocument]) -> int:
        """Apply newer revisions; emits one notice per changed document."""
        applied = 0
        for doc in docs:
            key = (doc.scope, doc.subject)
            have = self.replica.get(key)
            if have is not None and have.revision >= doc.revision:
                continue
            old_body = have.body if have is not None else self.default_body(doc.scope, doc.subject)
            changed = diff_paths(old_body, doc.body)
            self.replica[key] = doc
            applied += 1
            self._notify(ConfigChangeNotice(doc.scope, doc.subject, doc.revision, tuple(changed)))
        if applied:
            self.registry.inc("config.applied", {"layer": self.layer}, applied)
        return applied

    def _notify(self, notice: ConfigChangeNotice) -> None:
        env = MessageEnvelope(
            topic=CONFIG_NOTICE,
            payload=json.dumps(notice.to_obj(), sort_keys=True).encode(),
            origin_node=self.node,
            origin_layer=self.layer,
            sequence=self.seq.next(CONFIG_NOTICE),
            sent_at=self.clock.now,
        )
        self._intra.publish(env)
        self.notices_sent += 1
        self.registry.inc("config.notices", {"layer": self.layer})
        self.trace.record("config_notice", self.clock.now, layer=self.layer,
                          scope=notice.scope, subject=notice.subject,
                          revision=notice.revision, changed=list(notice.changed_paths))

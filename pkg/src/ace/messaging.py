"""Resource-level message service.

One broker per cluster. Clients talk only to their local broker; edge and
cloud brokers are joined by long-lasting topic bridges. A message published
in an EC reaches the CC broker only if one of that EC's ``up``/``both``
rules matches its topic, and a message at the CC broker (published there or
bridged up from another EC) is forwarded to every other EC whose
``down``/``both`` rules match. Nothing is ever sent back to the EC it came
from, so bridging cannot loop.

Delivery semantics are deliberately thin: no retained messages, no QoS
levels, no replay. A bridged message hitting a partitioned WAN is dropped.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterator, Optional

from .infrastructure import HierarchicalId, InfrastructureRecord
from .simnet import Partitioned, SimLink, Simulator

MAX_PAYLOAD = 16 * 1024 * 1024

LONG_LASTING = "long-lasting"
ADHOC_ONEOFF = "adhoc-oneoff"
ADHOC_REPETITIVE = "adhoc-repetitive"


class MessagingError(Exception):
    pass


class UnregisteredClient(MessagingError):
    pass


class MalformedTopic(MessagingError):
    pass


class MalformedPattern(MessagingError):
    pass


class PayloadTooLarge(MessagingError):
    pass


def check_topic(topic: str) -> None:
    if not isinstance(topic, str) or not topic:
        raise MalformedTopic(repr(topic))
    for seg in topic.split("/"):
        if not seg or "+" in seg or "#" in seg:
            raise MalformedTopic(topic)


def check_pattern(pattern: str) -> None:
    if not isinstance(pattern, str) or not pattern:
        raise MalformedPattern(repr(pattern))
    segs = pattern.split("/")
    for i, seg in enumerate(segs):
        if not seg:
            raise MalformedPattern(pattern)
        if seg == "#":
            if i != len(segs) - 1:
                raise MalformedPattern(pattern)
        elif seg == "+":
            continue
        elif "+" in seg or "#" in seg:
            raise MalformedPattern(pattern)


def topic_matches(pattern: str, topic: str) -> bool:
    """``+`` matches one segment, a trailing ``#`` any suffix including none."""
    p = pattern.split("/")
    t = topic.split("/")
    for i, seg in enumerate(p):
        if seg == "#":
            return True
        if i >= len(t):
            return False
        if seg != "+" and seg != t[i]:
            return False
    return len(p) == len(t)


def deliver_matching(topic: str, patterns) -> list:
    """Items of ``patterns`` (strings or objects with ``.pattern``) matching ``topic``."""
    check_topic(topic)
    out = []
    for item in patterns:
        pat = item if isinstance(item, str) else item.pattern
        if topic_matches(pat, topic):
            out.append(item)
    return out


@lru_cache(maxsize=4096)
def topic_plane(topic: str) -> str:
    """Classify a topic: platform control, app control, or app data."""
    parts = topic.split("/", 3)
    if parts[0] == "ace":
        return "platform"
    if parts[0] == "app" and len(parts) > 2:
        return "control" if parts[2] in ("ctl", "telemetry") else "data"
    return "other"


class Message:
    __slots__ = ("topic", "payload", "payload_size", "msg_id", "origin", "publish_time", "sender", "_doc")

    def __init__(self, topic: str, payload: Any, payload_size: int, msg_id: str,
                 origin: str, publish_time: int, sender: str):
        self.topic = topic
        self.payload = payload
        self.payload_size = payload_size
        self.msg_id = msg_id
        self.origin = origin
        self.publish_time = publish_time
        self.sender = sender
        self._doc = None

    def json(self) -> Any:
        """Decoded payload, parsed once and shared by every subscriber."""
        p = self.payload
        if not isinstance(p, (bytes, str)):
            return p
        if self._doc is None:
            self._doc = json.loads(p)
        return self._doc

    def __repr__(self) -> str:
        return f"Message({self.msg_id} {self.topic} {self.payload_size}B from {self.sender})"


@dataclass
class Subscription:
    client: str
    scope: str
    pattern: str
    handler: Callable[[Message], None]
    active: bool = True


@dataclass(frozen=True)
class BridgeRule:
    ec: str
    patterns: tuple[str, ...]
    direction: str

    def ups(self) -> bool:
        return self.direction in ("up", "both")

    def downs(self) -> bool:
        return self.direction in ("down", "both")


class Client:
    """Handle returned by ``register_client``."""

    def __init__(self, service: "MessageService", client_id: str, location: HierarchicalId):
        self.service = service
        self.id = client_id
        self.location = location
        self.cluster = str(location.cluster_id)

    def publish(self, topic: str, payload: Any, size: Optional[int] = None) -> str:
        return self.service.publish(self, topic, payload, size)

    def subscribe(self, pattern: str, handler: Callable[[Message], None]) -> Subscription:
        return self.service.subscribe(self, pattern, handler)


class Broker:
    def __init__(self, cluster: str, is_cc: bool):
        self.cluster = cluster
        self.is_cc = is_cc
        self.subs: list[Subscription] = []
        self._cache: dict[str, list[Subscription]] = {}

    def add(self, sub: Subscription) -> None:
        self.subs.append(sub)
        self._cache.clear()

    def remove(self, sub: Subscription) -> None:
        if sub in self.subs:
            self.subs.remove(sub)
            self._cache.clear()

    def matching(self, topic: str) -> list[Subscription]:
        hit = self._cache.get(topic)
        if hit is None:
            hit = [s for s in self.subs if topic_matches(s.pattern, topic)]
            self._cache[topic] = hit
        return hit


class TrafficLog:
    """Append-only record of every inter-site hop (and LAN hops if enabled)."""

    FIELDS = ("msg_id", "topic", "bytes", "src", "dst", "t_pub", "t_dlv", "link", "plane", "hop")

    def __init__(self):
        self.records: list[tuple] = []

    def append(self, *record) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def rows(self) -> Iterator[dict]:
        for r in self.records:
            d = dict(zip(self.FIELDS, r))
            d["t_pub"] = d["t_pub"] / 1000
            d["t_dlv"] = d["t_dlv"] / 1000
            yield d

    def lines(self) -> Iterator[str]:
        for row in self.rows():
            yield json.dumps(row, sort_keys=True)

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def digest(self) -> str:
        """sha256 over tab-separated records in log order."""
        h = hashlib.sha256()
        for r in self.records:
            h.update(("\t".join(map(str, r)) + "\n").encode())
        return h.hexdigest()

    def wan_bytes(self, plane: Optional[str] = None, since: int = 0) -> int:
        return sum(
            r[2] for r in self.records
            if r[9] != "lan" and r[6] >= since and (plane is None or r[8] == plane)
        )


class MessageService:
    def __init__(
        self,
        sim: Simulator,
        infra: InfrastructureRecord,
        wan_links: dict[str, SimLink],
        lan_links: dict[str, SimLink],
        log_lan: bool = False,
        max_payload: int = MAX_PAYLOAD,
    ):
        self.sim = sim
        self.infra = infra
        self.wan = wan_links
        self.lan = lan_links
        self.log_lan = log_lan
        self.max_payload = max_payload
        self.cc = str(infra.cc.id)
        self.brokers = {str(c.id): Broker(str(c.id), c.is_cc) for c in infra.clusters}
        self.rules: dict[str, list[BridgeRule]] = {str(c.id): [] for c in infra.ecs}
        self._up_cache: dict[str, dict[str, bool]] = {k: {} for k in self.rules}
        self._down_cache: dict[str, dict[str, bool]] = {k: {} for k in self.rules}
        self.clients: dict[str, Client] = {}
        self.log = TrafficLog()
        self._ids = itertools.count(1)
        self._valid: set[str] = set()
        self.published = 0
        self.delivered = 0
        self.cross_site_deliveries = 0
        self.dropped = 0

    # clients and subscriptions

    def register_client(self, client_id: str, location: HierarchicalId | str) -> Client:
        loc = location if isinstance(location, HierarchicalId) else HierarchicalId.parse(location)
        if str(loc.cluster_id) not in self.brokers:
            raise MessagingError(f"no broker for {loc}")
        client = Client(self, client_id, loc)
        self.clients[client_id] = client
        return client

    def unregister_client(self, client_id: str) -> None:
        client = self.clients.pop(client_id, None)
        if client is None:
            return
        broker = self.brokers[client.cluster]
        for sub in [s for s in broker.subs if s.client == client_id]:
            sub.active = False
            broker.remove(sub)

    def _client(self, client: Client | str) -> Client:
        cid = client.id if isinstance(client, Client) else client
        found = self.clients.get(cid)
        if found is None:
            raise UnregisteredClient(cid)
        return found

    def subscribe(self, client: Client | str, pattern: str, handler: Callable[[Message], None]) -> Subscription:
        c = self._client(client)
        check_pattern(pattern)
        sub = Subscription(c.id, c.cluster, pattern, handler)
        self.brokers[c.cluster].add(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        sub.active = False
        self.brokers[sub.scope].remove(sub)

    # bridges

    def configure_bridge(self, ec: HierarchicalId | str, patterns, direction: str) -> BridgeRule:
        key = str(ec)
        if key not in self.rules:
            raise MessagingError(f"unknown edge cluster {key}")
        if direction not in ("up", "down", "both"):
            raise MessagingError(f"bad direction {direction!r}")
        if isinstance(patterns, str):
            patterns = [patterns]
        for p in patterns:
            check_pattern(p)
        rule = BridgeRule(key, tuple(patterns), direction)
        if rule not in self.rules[key]:
            self.rules[key].append(rule)
            self._up_cache[key].clear()
            self._down_cache[key].clear()
        return rule

    def remove_bridge(self, rule: BridgeRule) -> None:
        if rule in self.rules.get(rule.ec, []):
            self.rules[rule.ec].remove(rule)
            self._up_cache[rule.ec].clear()
            self._down_cache[rule.ec].clear()

    def _bridged(self, ec: str, topic: str, up: bool) -> bool:
        cache = (self._up_cache if up else self._down_cache)[ec]
        hit = cache.get(topic)
        if hit is None:
            hit = any(
                (r.ups() if up else r.downs()) and any(topic_matches(p, topic) for p in r.patterns)
                for r in self.rules[ec]
            )
            cache[topic] = hit
        return hit

    # publishing

    def publish(self, client: Client | str, topic: str, payload: Any, size: Optional[int] = None,
                direct: bool = False) -> str:
        """Publish at the client's local broker.

        ``direct`` sends an EC client's message straight to the CC broker
        over the WAN instead (the bridgeless baseline, no local delivery).
        """
        c = self._client(client)
        if topic not in self._valid:
            check_topic(topic)
            self._valid.add(topic)
        if size is None:
            if isinstance(payload, str):
                payload = payload.encode()
            size = len(payload)
        if size > self.max_payload:
            raise PayloadTooLarge(f"{size} bytes on {topic}")
        msg = Message(topic, payload, size, f"m{next(self._ids)}", c.cluster, self.sim.now, c.id)
        self.published += 1
        lan = self.lan[c.cluster]
        if direct and c.cluster != self.cc:
            lan.transmit("up", size, on_arrival=lambda: self._hop(c.cluster, self.cc, "up", msg, c.cluster, ADHOC_REPETITIVE))
        else:
            lan.transmit("up", size, on_arrival=lambda: self._ingress(self.brokers[c.cluster], msg, None))
        return msg.msg_id

    def publish_json(self, client: Client | str, topic: str, obj: Any) -> str:
        return self.publish(client, topic, json.dumps(obj, sort_keys=True).encode())

    def _ingress(self, broker: Broker, msg: Message, came_from: Optional[str]) -> None:
        if self.log_lan and came_from is None:
            self.log.append(msg.msg_id, msg.topic, msg.payload_size, msg.sender, broker.cluster,
                            msg.publish_time, self.sim.now, ADHOC_REPETITIVE, topic_plane(msg.topic), "lan")
        subs = broker.matching(msg.topic)
        if subs:
            cross = broker.cluster != msg.origin
            for sub in subs:
                if sub.active:
                    self.delivered += 1
                    if cross:
                        self.cross_site_deliveries += 1
                    sub.handler(msg)
        topic = msg.topic
        if not broker.is_cc:
            if came_from is None and self._bridged(broker.cluster, topic, True):
                self._hop(broker.cluster, self.cc, "up", msg, broker.cluster, LONG_LASTING)
        else:
            for ec in self.rules:
                if ec != came_from and self._bridged(ec, topic, False):
                    self._hop(self.cc, ec, "down", msg, ec, LONG_LASTING)

    def _hop(self, src: str, dst: str, direction: str, msg: Message, ec: str, kind: str) -> None:
        link = self.wan[ec]

        def arrive():
            self.log.append(msg.msg_id, msg.topic, msg.payload_size, src, dst, msg.publish_time,
                            self.sim.now, kind, topic_plane(msg.topic), direction)
            self._ingress(self.brokers[dst], msg, src)

        try:
            link.transmit(direction, msg.payload_size, on_arrival=arrive, on_drop=self._on_drop)
        except Partitioned:
            self.dropped += 1

    def _on_drop(self) -> None:
        self.dropped += 1

"""Resource-level file service.

Control and data are kept apart. Announcements, transfer requests and
completion notices are small JSON messages on ``ace/svc/file/<site>/<key>``;
object bytes move as bulk flows metered directly on the WAN links and never
pass through a broker.

Objects may carry real bytes or just a length (a synthetic payload), which
is enough for the network model and avoids holding hundreds of MiB in memory.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .infrastructure import HierarchicalId
from .messaging import ADHOC_ONEOFF, Client, MessageService, Message, check_topic
from .simnet import BulkFlow, ms

TEMPORARY = "temporary"
PERMANENT = "permanent"
CONTROL_LIMIT = 1024
DEFAULT_QUOTA = 1 << 40

Data = Union[bytes, int]


class FileServiceError(Exception):
    pass


class KeyExists(FileServiceError):
    pass


class UnknownKey(FileServiceError):
    pass


class QuotaExceeded(FileServiceError):
    pass


class PartitionedSource(FileServiceError):
    pass


def checksum_of(key: str, data: Data) -> str:
    if isinstance(data, int):
        return hashlib.sha256(f"synthetic:{key}:{data}".encode()).hexdigest()
    return hashlib.sha256(data).hexdigest()


@dataclass
class StoredObject:
    key: str
    bytes_len: int
    tier: str
    site: str
    checksum: str
    created_at: int = 0
    content: Optional[bytes] = None

    @property
    def data(self) -> Data:
        return self.content if self.content is not None else self.bytes_len


_ORDER = {"announced": 0, "transferring": 1, "complete": 2, "failed": 2}


@dataclass
class TransferTicket:
    ticket_id: str
    key: str
    src: str
    dst: str
    state: str = "announced"
    created_at: int = 0
    started_at: Optional[int] = None
    finished_at: Optional[int] = None
    bytes_len: int = 0
    src_checksum: str = ""
    dst_checksum: Optional[str] = None
    cached: bool = False
    result: Optional[StoredObject] = None
    history: list[str] = field(default_factory=list)
    on_done: Optional[Callable[["TransferTicket"], None]] = None

    def advance(self, state: str, now: int) -> None:
        if _ORDER[state] <= _ORDER[self.state]:
            raise FileServiceError(f"ticket {self.ticket_id}: {self.state} -> {state}")
        self.state = state
        self.history.append(state)
        if state == "transferring":
            self.started_at = now
        if state in ("complete", "failed"):
            self.finished_at = now
            if self.on_done is not None:
                self.on_done(self)

    @property
    def done(self) -> bool:
        return self.state in ("complete", "failed")


def check_key(key: str) -> None:
    if not isinstance(key, str) or key.startswith("/") or key.endswith("/"):
        raise FileServiceError(f"malformed key {key!r}")
    check_topic(key)


class FileService:
    def __init__(self, messaging: MessageService, quotas: Optional[dict[str, int]] = None,
                 request_timeout_ms: float = 5000.0, chunk: int = BulkFlow.CHUNK):
        self.messaging = messaging
        self.sim = messaging.sim
        self.infra = messaging.infra
        self.cc = messaging.cc
        self.sites = [str(c.id) for c in self.infra.clusters]
        self.quotas = {s: DEFAULT_QUOTA for s in self.sites}
        self.quotas.update(quotas or {})
        self.request_timeout = ms(request_timeout_ms)
        self.chunk = chunk
        self.objects: dict[str, dict[str, StoredObject]] = {s: {} for s in self.sites}
        self.cache: dict[str, dict[tuple[str, str], StoredObject]] = {s: {} for s in self.sites}
        self.tickets: dict[str, TransferTicket] = {}
        self.control_sizes: list[int] = []
        self._ids = itertools.count(1)
        self._actors: dict[str, Client] = {}
        for ec in self.infra.ecs:
            messaging.configure_bridge(ec.id, ["ace/svc/file/#"], "both")
        for c in self.infra.clusters:
            actor = messaging.register_client(f"files@{c.id}", c.id)
            actor.subscribe("ace/svc/file/#", lambda msg, site=str(c.id): self._on_control(site, msg))
            self._actors[str(c.id)] = actor

    # control plane

    def _announce(self, site: str, key: str, doc: dict) -> None:
        payload = json.dumps(doc, sort_keys=True).encode()
        if len(payload) > CONTROL_LIMIT:
            raise FileServiceError("control message exceeds 1 KiB")
        self.control_sizes.append(len(payload))
        self._actors[site].publish(f"ace/svc/file/{site}/{key}", payload)

    def _on_control(self, site: str, msg: Message) -> None:
        doc = msg.json()
        op = doc["op"]
        origin = doc["site"]
        if op in ("put", "delete") and origin != site:
            self.cache[site].pop((origin, doc["key"]), None)
        elif op == "request" and doc["src"] == site:
            ticket = self.tickets[doc["ticket_id"]]
            if ticket.state == "announced":
                self._serve(ticket)

    # operations

    def usage(self, site: str) -> int:
        return sum(o.bytes_len for o in self.objects[site].values()) + \
            sum(o.bytes_len for o in self.cache[site].values())

    def _site(self, client: Client | str | HierarchicalId) -> str:
        if isinstance(client, Client):
            return client.cluster
        hid = client if isinstance(client, HierarchicalId) else HierarchicalId.parse(client)
        site = str(hid.cluster_id)
        if site not in self.objects:
            raise FileServiceError(f"unknown site {site}")
        return site

    def put(self, client, key: str, data: Data, tier: str = TEMPORARY) -> StoredObject:
        check_key(key)
        if tier not in (TEMPORARY, PERMANENT):
            raise FileServiceError(f"bad tier {tier!r}")
        site = self._site(client)
        if key in self.objects[site]:
            raise KeyExists(f"{key} at {site}")
        size = data if isinstance(data, int) else len(data)
        if self.usage(site) + size > self.quotas[site]:
            raise QuotaExceeded(f"{site}: {size} bytes over quota")
        obj = StoredObject(key, size, tier, site, checksum_of(key, data), self.sim.now,
                           None if isinstance(data, int) else bytes(data))
        self.objects[site][key] = obj
        self._announce(site, key, {"op": "put", "key": key, "bytes_len": size,
                                   "checksum": obj.checksum, "ticket_id": None, "site": site})
        return obj

    def delete(self, client, key: str) -> None:
        site = self._site(client)
        if self.objects[site].pop(key, None) is None:
            raise UnknownKey(f"{key} at {site}")
        self._announce(site, key, {"op": "delete", "key": key, "bytes_len": 0,
                                   "checksum": None, "ticket_id": None, "site": site})

    def lookup(self, site: str, key: str) -> StoredObject:
        try:
            return self.objects[site][key]
        except KeyError:
            raise UnknownKey(f"{key} at {site}") from None

    def _legs(self, src: str, dst: str) -> list[tuple]:
        legs = []
        if src != self.cc:
            legs.append((self.messaging.wan[src], "up", src, self.cc))
        if dst != self.cc:
            legs.append((self.messaging.wan[dst], "down", self.cc, dst))
        return legs

    def fetch(self, client, key: str, src_site: str | HierarchicalId,
              on_done: Optional[Callable[[TransferTicket], None]] = None) -> TransferTicket:
        """Get ``key`` from ``src_site`` into the caller's site.

        Local and cached reads complete immediately. Remote reads return a
        ticket that completes once the bytes have crossed the WAN; the copy
        is then cached at the caller's site as a temporary object.
        """
        dst = self._site(client)
        src = str(src_site)
        tid = f"t{next(self._ids)}"
        if src == dst:
            obj = self.lookup(src, key)
            return self._immediate(tid, obj, src, dst, on_done)
        hit = self.cache[dst].get((src, key))
        if hit is not None:
            return self._immediate(tid, hit, src, dst, on_done, cached=True)
        src_obj = self.objects.get(src, {}).get(key)
        if src_obj is None:
            raise UnknownKey(f"{key} at {src}")
        legs = self._legs(src, dst)
        if not all(link.is_up for link, *_ in legs):
            raise PartitionedSource(f"{key} at {src}")
        ticket = TransferTicket(tid, key, src, dst, created_at=self.sim.now, bytes_len=src_obj.bytes_len,
                                src_checksum=src_obj.checksum, on_done=on_done)
        ticket.history.append("announced")
        self.tickets[tid] = ticket
        self._announce(dst, key, {"op": "request", "key": key, "bytes_len": src_obj.bytes_len,
                                  "checksum": src_obj.checksum, "ticket_id": tid, "site": dst,
                                  "src": src})
        self.sim.after(self.request_timeout, self._expire, tid)
        return ticket

    def _immediate(self, tid, obj, src, dst, on_done, cached=False) -> TransferTicket:
        t = TransferTicket(tid, obj.key, src, dst, "complete", self.sim.now, self.sim.now, self.sim.now,
                           obj.bytes_len, obj.checksum, obj.checksum, cached, obj)
        t.history = ["complete"]
        self.tickets[tid] = t
        if on_done is not None:
            on_done(t)
        return t

    def _expire(self, tid: str) -> None:
        ticket = self.tickets[tid]
        if ticket.state == "announced":
            ticket.advance("failed", self.sim.now)

    def _serve(self, ticket: TransferTicket) -> None:
        obj = self.objects[ticket.src].get(ticket.key)
        if obj is None or obj.checksum != ticket.src_checksum:
            ticket.advance("failed", self.sim.now)
            return
        ticket.advance("transferring", self.sim.now)
        self._leg(ticket, obj, self._legs(ticket.src, ticket.dst))

    def _leg(self, ticket: TransferTicket, obj: StoredObject, legs: list) -> None:
        link, direction, a, b = legs[0]
        t0 = self.sim.now

        def complete():
            self.messaging.log.append(ticket.ticket_id, f"ace/svc/file/{ticket.src}/{ticket.key}",
                                      obj.bytes_len, a, b, t0, self.sim.now, ADHOC_ONEOFF, "file", direction)
            if len(legs) > 1:
                self._leg(ticket, obj, legs[1:])
            else:
                self._land(ticket, obj)

        def fail():
            ticket.advance("failed", self.sim.now)

        BulkFlow(link, direction, obj.bytes_len, complete, fail, chunk=self.chunk)

    def _land(self, ticket: TransferTicket, obj: StoredObject) -> None:
        copy = StoredObject(obj.key, obj.bytes_len, TEMPORARY, obj.site,
                            checksum_of(obj.key, obj.data), self.sim.now, obj.content)
        self.cache[ticket.dst][(ticket.src, ticket.key)] = copy
        ticket.dst_checksum = copy.checksum
        ticket.result = copy
        self._announce(ticket.dst, ticket.key, {"op": "complete", "key": ticket.key, "bytes_len": obj.bytes_len,
                                                "checksum": copy.checksum, "ticket_id": ticket.ticket_id,
                                                "site": ticket.dst})
        ticket.advance("complete", self.sim.now)

    def gc_temporary(self, site: str | HierarchicalId, older_than: float) -> int:
        """Drop temporary objects (and cached copies) at least ``older_than`` ms old."""
        site = str(site)
        cutoff = self.sim.now - ms(older_than)
        removed = 0
        for key in [k for k, o in self.objects[site].items() if o.tier == TEMPORARY and o.created_at <= cutoff]:
            del self.objects[site][key]
            removed += 1
        for k in [k for k, o in self.cache[site].items() if o.created_at <= cutoff]:
            del self.cache[site][k]
            removed += 1
        return removed

"""Deterministic discrete-event substrate.

Virtual time is kept as integer microseconds so that event ordering never
depends on float rounding; public helpers convert to and from milliseconds.
Events fire in ``(fire_time, seq)`` order where ``seq`` is an insertion
counter, so simultaneous events run in the order they were scheduled.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import yaml

US_PER_MS = 1000
US_PER_S = 1_000_000


def ms(value: float) -> int:
    """Milliseconds to integer microseconds."""
    return int(round(value * US_PER_MS))


def to_ms(us: int) -> float:
    return us / US_PER_MS


def serialization_us(size: int, mbps: float) -> int:
    """Time to clock ``size`` bytes onto a ``mbps`` link, rounded up to 1 us."""
    if size <= 0:
        return 0
    bits = size * 8 * US_PER_S
    rate = int(round(mbps * 1_000_000))
    return -(-bits // rate)


class Partitioned(Exception):
    """Raised when transmitting on a partitioned link."""

    def __init__(self, link_id: str, direction: str):
        super().__init__(f"link {link_id} ({direction}) is partitioned")
        self.link_id = link_id
        self.direction = direction


class SimEvent:
    __slots__ = ("fire_time", "seq", "fn", "args", "cancelled")

    def __init__(self, fire_time: int, seq: int, fn: Callable, args: tuple):
        self.fire_time = fire_time
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Simulator:
    """Single-threaded event loop with a virtual clock in microseconds."""

    def __init__(self, seed: int = 0):
        self.now = 0
        self.seed = seed
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._seq = itertools.count()
        self.executed = 0

    @property
    def now_ms(self) -> float:
        return self.now / US_PER_MS

    def at(self, fire_time: int, fn: Callable, *args: Any) -> SimEvent:
        if fire_time < self.now:
            raise ValueError(f"cannot schedule in the past ({fire_time} < {self.now})")
        seq = next(self._seq)
        ev = SimEvent(fire_time, seq, fn, args)
        heapq.heappush(self._heap, (fire_time, seq, ev))
        return ev

    def after(self, delay: int, fn: Callable, *args: Any) -> SimEvent:
        return self.at(self.now + delay, fn, *args)

    def every(self, period: int, fn: Callable, *args: Any, start: Optional[int] = None) -> "Periodic":
        return Periodic(self, period, fn, args, self.now if start is None else start)

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)

    def run_until(self, t: int) -> int:
        """Execute every event with ``fire_time <= t``; the clock ends at ``t``."""
        if t < self.now:
            raise ValueError("run_until target is in the past")
        heap = self._heap
        pop = heapq.heappop
        count = 0
        while heap and heap[0][0] <= t:
            fire_time, _, ev = pop(heap)
            if ev.cancelled:
                continue
            self.now = fire_time
            ev.fn(*ev.args)
            count += 1
        self.now = t
        self.executed += count
        return count

    def run(self, limit: Optional[int] = None) -> int:
        """Drain the queue (optionally stopping at ``limit``)."""
        count = 0
        heap = self._heap
        while heap:
            fire_time = heap[0][0]
            if limit is not None and fire_time > limit:
                break
            fire_time, _, ev = heapq.heappop(heap)
            if ev.cancelled:
                continue
            self.now = fire_time
            ev.fn(*ev.args)
            count += 1
        self.executed += count
        return count

    def rng(self, stream: str) -> random.Random:
        """Independent random stream derived from (seed, stream name)."""
        return random.Random(derive_seed(self.seed, stream))


def derive_seed(seed: int, stream: str) -> int:
    digest = hashlib.sha256(f"{seed}/{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


class Periodic:
    """Repeating timer; stop() cancels the pending tick."""

    def __init__(self, sim: Simulator, period: int, fn: Callable, args: tuple, start: int):
        self.sim = sim
        self.period = period
        self.fn = fn
        self.args = args
        self.stopped = False
        self._ev = sim.at(start, self._tick)

    def _tick(self) -> None:
        if self.stopped:
            return
        self._ev = self.sim.after(self.period, self._tick)
        self.fn(*self.args)

    def stop(self) -> None:
        self.stopped = True
        self._ev.cancel()


class _Transmission:
    __slots__ = ("size", "ser_end", "event", "on_drop", "dropped")

    def __init__(self, size: int, ser_end: int, on_drop: Optional[Callable]):
        self.size = size
        self.ser_end = ser_end
        self.event: Optional[SimEvent] = None
        self.on_drop = on_drop
        self.dropped = False


class _Channel:
    """One serialization queue: FIFO, drains at exactly ``mbps``."""

    def __init__(self, name: str, mbps: float):
        if mbps <= 0:
            raise ValueError("bandwidth must be positive")
        self.name = name
        self.mbps = mbps
        self.busy_until = 0
        self.inflight: deque[_Transmission] = deque()
        self.bytes_delivered = 0
        self.bytes_dropped = 0
        self.deliveries: list[tuple[int, int]] = []  # (arrival, size), kept when tracing


@dataclass
class LinkStats:
    bytes_delivered: dict[str, int] = field(default_factory=dict)
    bytes_dropped: dict[str, int] = field(default_factory=dict)


class SimLink:
    """Point-to-point link with per-direction FIFO serialization.

    ``up`` runs from endpoint ``a`` to ``b`` (edge to cloud for WAN links),
    ``down`` the other way. A ``shared`` link (a LAN medium) serializes both
    directions through a single queue.
    """

    def __init__(
        self,
        sim: Simulator,
        link_id: str,
        endpoints: tuple[str, str],
        up_mbps: float,
        down_mbps: float,
        delay_ms: float,
        shared: bool = False,
        trace: bool = False,
    ):
        if delay_ms < 0:
            raise ValueError("delay must be non-negative")
        self.sim = sim
        self.id = link_id
        self.endpoints = endpoints
        self.up_bandwidth = up_mbps
        self.down_bandwidth = down_mbps
        self.delay = ms(delay_ms)
        self.shared = shared
        self.trace = trace
        self.state = "up"
        up = _Channel("up", up_mbps)
        self._channels = {"up": up, "down": up if shared else _Channel("down", down_mbps)}
        self.drops = 0

    @property
    def one_way_delay_ms(self) -> float:
        return to_ms(self.delay)

    def channel(self, direction: str) -> _Channel:
        return self._channels[direction]

    def transmit(
        self,
        direction: str,
        size: int,
        on_arrival: Optional[Callable] = None,
        on_drop: Optional[Callable] = None,
        at: Optional[int] = None,
    ) -> int:
        """Queue ``size`` bytes; returns the arrival time in microseconds.

        Arrival = max(at, queue free) + serialization + one-way delay.
        """
        if self.state != "up":
            self.drops += 1
            raise Partitioned(self.id, direction)
        ch = self._channels[direction]
        now = self.sim.now if at is None else at
        start = ch.busy_until if ch.busy_until > now else now
        ser_end = start + serialization_us(size, ch.mbps)
        ch.busy_until = ser_end
        arrival = ser_end + self.delay
        tx = _Transmission(size, ser_end, on_drop)
        inflight = ch.inflight
        while inflight and inflight[0].ser_end <= now:
            inflight.popleft()
        inflight.append(tx)
        tx.event = self.sim.at(arrival, self._arrive, ch, tx, on_arrival)
        return arrival

    def _arrive(self, ch: _Channel, tx: _Transmission, on_arrival: Optional[Callable]) -> None:
        ch.bytes_delivered += tx.size
        if self.trace:
            ch.deliveries.append((self.sim.now, tx.size))
        if on_arrival is not None:
            on_arrival()

    def set_partition(self, partitioned: bool, at: Optional[int] = None) -> None:
        """Schedule a state change; applied immediately when ``at`` is now/None."""
        when = self.sim.now if at is None else at
        if when == self.sim.now:
            self._apply(partitioned)
        else:
            self.sim.at(when, self._apply, partitioned)

    def _apply(self, partitioned: bool) -> None:
        now = self.sim.now
        if not partitioned:
            self.state = "up"
            return
        self.state = "partitioned"
        for ch in set(self._channels.values()):
            survivors = deque()
            for tx in ch.inflight:
                if tx.ser_end > now:
                    tx.dropped = True
                    tx.event.cancel()
                    ch.bytes_dropped += tx.size
                    if tx.on_drop is not None:
                        tx.on_drop()
                else:
                    survivors.append(tx)
            ch.inflight = survivors
            if ch.busy_until > now:
                ch.busy_until = now

    @property
    def is_up(self) -> bool:
        return self.state == "up"

    def stats(self) -> LinkStats:
        names = ["up"] if self.shared else ["up", "down"]
        return LinkStats(
            bytes_delivered={n: self._channels[n].bytes_delivered for n in names},
            bytes_dropped={n: self._channels[n].bytes_dropped for n in names},
        )


class BulkFlow:
    """Large transfer sent as back-to-back chunks.

    Chunks are queued one at a time, so small messages sharing the channel
    interleave between chunks (round-robin at payload granularity).
    """

    CHUNK = 64 * 1024

    def __init__(
        self,
        link: SimLink,
        direction: str,
        size: int,
        on_complete: Callable[[], None],
        on_fail: Callable[[], None],
        chunk: int = CHUNK,
    ):
        self.link = link
        self.direction = direction
        self.size = size
        self.remaining = size
        self.chunk = chunk
        self.on_complete = on_complete
        self.on_fail = on_fail
        self.state = "transferring"
        self.started_at = link.sim.now
        self.finished_at: Optional[int] = None
        self.bytes_sent = 0
        self._next()

    def _next(self) -> None:
        if self.state != "transferring":
            return
        n = min(self.chunk, self.remaining)
        self.remaining -= n
        last = self.remaining == 0
        try:
            arrival = self.link.transmit(
                self.direction, n,
                on_arrival=(self._done if last else None),
                on_drop=self._fail,
            )
        except Partitioned:
            self._fail()
            return
        self.bytes_sent += n
        if not last:
            ser_end = arrival - self.link.delay
            self.link.sim.at(ser_end, self._next)

    def _done(self) -> None:
        if self.state == "transferring":
            self.state = "complete"
            self.finished_at = self.link.sim.now
            self.on_complete()

    def _fail(self) -> None:
        if self.state == "transferring":
            self.state = "failed"
            self.finished_at = self.link.sim.now
            self.on_fail()


@dataclass
class PartitionWindow:
    cluster: str
    start_ms: float
    end_ms: Optional[float] = None


@dataclass
class Scenario:
    """Network scenario: WAN/LAN parameters, partition schedule, seed."""

    seed: int = 1
    wan_up_mbps: float = 20.0
    wan_down_mbps: float = 40.0
    wan_delay_ms: float = 0.0
    lan_mbps: float = 100.0
    lan_delay_ms: float = 1.0
    partitions: list[PartitionWindow] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        data = dict(data or {})
        wan = data.pop("wan", {}) or {}
        lan = data.pop("lan", {}) or {}
        parts = data.pop("partitions", []) or []
        seed = data.pop("seed", 1)
        if data:
            raise ValueError(f"unknown scenario fields: {sorted(data)}")
        return cls(
            seed=int(seed),
            wan_up_mbps=float(wan.get("up_mbps", 20.0)),
            wan_down_mbps=float(wan.get("down_mbps", 40.0)),
            wan_delay_ms=float(wan.get("delay_ms", 0.0)),
            lan_mbps=float(lan.get("mbps", 100.0)),
            lan_delay_ms=float(lan.get("delay_ms", 1.0)),
            partitions=[PartitionWindow(**p) for p in parts],
        )

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

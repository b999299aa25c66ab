"""In-app controller framework.

Every application that declares control-plane usage gets one global
controller (IC) at the CC and one local controller (LIC) per EC. Topics:

    app/<app>/ctl/<ec>/cmd         IC -> LIC    control ops (bridged down)
    app/<app>/ctl/<ec>/state       IC -> LIC    policy state (bridged down)
    app/<app>/ctl/cc/ack           LIC -> IC    aggregated op acks (bridged up)
    app/<app>/ctl/cc/report/<ec>   LIC -> IC    per-epoch reports (bridged up)
    app/<app>/ctl/<scope>/op       controller -> local instances
    app/<app>/ctl/<scope>/iack     local instances -> controller
    app/<app>/telemetry/<iid>      instance -> local controller (never bridged)

Workload payloads live under ``app/<app>/data/...``, so control and data
never share a subtree.
"""

from __future__ import annotations

import itertools
import json
import operator
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

from .controller import IMAGES
from .simnet import ms
from .topology import ApplicationTopology, BridgeSpec, ComponentSpec

OP_KINDS = ("start", "filter", "aggregate", "terminate")
TRIGGERS = ("on_sample", "on_timer", "on_message")
OVERRIDES = ("route", "thresholds", "custom")
CC_SCOPE = "cc"


class InAppError(Exception):
    pass


class UnknownTarget(InAppError):
    pass


class UnknownInstance(InAppError):
    pass


class UnsupportedOverride(InAppError):
    pass


class Timeout(InAppError):
    def __init__(self, instance: str):
        super().__init__(f"no ack from {instance}")
        self.instance = instance

    def __eq__(self, other):
        return isinstance(other, Timeout) and other.instance == self.instance

    def __hash__(self):
        return hash(("Timeout", self.instance))


# --- value types -------------------------------------------------------------

@dataclass(frozen=True)
class ControlOp:
    """``target`` is ``*``, ``<component>``, ``<component>@<scope>`` or an instance id."""

    kind: str
    target: str
    args: tuple[tuple[str, Any], ...] = ()
    op_id: str = ""

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise InAppError(f"unknown op kind {self.kind!r}")

    @classmethod
    def make(cls, kind: str, target: str, **args) -> "ControlOp":
        return cls(kind, target, tuple(sorted(args.items())))

    @property
    def arg_map(self) -> dict:
        return dict(self.args)

    @property
    def component(self) -> str:
        return self.target.split("@", 1)[0]

    @property
    def scope(self) -> Optional[str]:
        return self.target.split("@", 1)[1] if "@" in self.target else None

    def matches(self, component: str, scope: str, instance_id: str) -> bool:
        if self.target == instance_id:
            return True
        if self.component not in ("*", component):
            return False
        return self.scope is None or self.scope == scope

    def to_dict(self) -> dict:
        return {"kind": self.kind, "target": self.target, "args": dict(self.args), "op_id": self.op_id}

    @classmethod
    def from_dict(cls, d: dict) -> "ControlOp":
        return cls(d["kind"], d["target"], tuple(sorted(d.get("args", {}).items())), d.get("op_id", ""))


@dataclass
class PolicyHook:
    name: str
    trigger: str
    override: str
    decide: Callable[..., Any]

    def __post_init__(self):
        if self.trigger not in TRIGGERS:
            raise InAppError(f"unknown trigger {self.trigger!r}")


class PolicyHandle:
    def __init__(self, controller: "InAppController", hook: PolicyHook):
        self.controller = controller
        self.hook = hook

    @property
    def active(self) -> bool:
        return self.hook in self.controller.hooks

    def deregister(self) -> None:
        self.controller.deregister_policy(self)


class Ewma:
    """Exponentially weighted moving average; the first sample initializes it."""

    def __init__(self, alpha: float = 0.2, prior: Optional[float] = None):
        if not 0 < alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        self.alpha = alpha
        self.prior = prior
        self.value: Optional[float] = None
        self.samples = 0

    def update(self, sample: float) -> float:
        if sample < 0:
            raise ValueError("negative sample")
        if self.value is None:
            self.value = float(sample)
        else:
            self.value = self.alpha * sample + (1 - self.alpha) * self.value
        self.samples += 1
        return self.value

    @property
    def estimate(self) -> Optional[float]:
        return self.prior if self.value is None else self.value


@dataclass
class ComponentTelemetry:
    instance_id: str
    component: str = ""
    queue_len: int = 0
    busy: float = 0.0
    last_latency_sample: Optional[float] = None
    window: deque = field(default_factory=lambda: deque(maxlen=32))
    ewma: Ewma = field(default_factory=Ewma)

    def update(self, sample: dict) -> "ComponentTelemetry":
        if "queue_len" in sample:
            q = int(sample["queue_len"])
            if q < 0:
                raise ValueError("queue_len must be >= 0")
            self.queue_len = q
        if "busy" in sample:
            self.busy = min(1.0, max(0.0, float(sample["busy"])))
        if sample.get("latency_ms") is not None:
            lat = float(sample["latency_ms"])
            self.last_latency_sample = lat
            self.window.append(lat)
            self.ewma.update(lat)
        return self

    def metric(self, name: str) -> list[float]:
        if name == "latency":
            return list(self.window)
        if name == "queue_len":
            return [float(self.queue_len)]
        if name == "busy":
            return [self.busy]
        raise InAppError(f"unknown metric {name!r}")


_CMP = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge,
        "==": operator.eq, "!=": operator.ne}


def make_predicate(args: dict) -> Callable[[dict], bool]:
    """Filter predicate from ``{"field": ..., "op": ..., "value": ...}``."""
    try:
        cmp = _CMP[args.get("op", "==")]
        name = args["field"]
        value = args["value"]
    except KeyError as exc:
        raise InAppError(f"bad filter args: {exc}") from None
    return lambda item: name in item and cmp(item[name], value)


def reduce_window(values: list[float], fn: str) -> float:
    if fn == "count":
        return float(len(values))
    if fn == "sum":
        return float(sum(values))
    if fn == "mean":
        return sum(values) / len(values) if values else 0.0
    raise InAppError(f"unknown reduce {fn!r}")


# --- runtime behaviors -------------------------------------------------------

class Component:
    """Base class for application behaviors run by node agents.

    Handles control ops addressed to the instance (start/terminate toggle
    ``active``, filter installs a predicate on outgoing items) and exposes
    a small telemetry helper.
    """

    def __init__(self, ctx):
        self.ctx = ctx
        self.sim = ctx.sim
        self.client = ctx.client
        self.app = ctx.entry.app
        self.name = ctx.entry.component
        self.iid = ctx.instance_id
        self.scope = ctx.scope
        self.params = ctx.params
        self.active = True
        self.filters: list[Callable[[dict], bool]] = []
        self.ops_applied: list[ControlOp] = []
        self._subs = []
        self._timers = []

    def topic(self, *parts: str) -> str:
        return "/".join(("app", self.app) + parts)

    def subscribe(self, pattern: str, handler: Callable) -> None:
        self._subs.append(self.client.subscribe(pattern, handler))

    def every(self, period_ms: float, fn: Callable, *args) -> None:
        self._timers.append(self.sim.every(ms(period_ms), fn, *args, start=self.sim.now + ms(period_ms)))

    def publish(self, topic: str, payload: Any, size: Optional[int] = None) -> str:
        return self.client.publish(topic, payload, size)

    def publish_json(self, topic: str, doc: dict) -> str:
        return self.client.publish(topic, json.dumps(doc, sort_keys=True).encode())

    def telemetry(self, **fields) -> None:
        self.publish_json(self.topic("telemetry", self.iid), {"kind": "sample", "component": self.name, **fields})

    def passes(self, item: dict) -> bool:
        return all(f(item) for f in self.filters)

    def start(self) -> None:
        self.subscribe(self.topic("ctl", self.scope, "op"), self._on_op)
        self.publish_json(self.topic("telemetry", self.iid), {"kind": "hello", "component": self.name})
        self.on_start()

    def stop(self) -> None:
        for sub in self._subs:
            self.client.service.unsubscribe(sub)
        for t in self._timers:
            t.stop()
        self._subs.clear()
        self._timers.clear()
        self.on_stop()

    def on_start(self) -> None:
        pass

    def on_stop(self) -> None:
        pass

    def _on_op(self, msg) -> None:
        op = ControlOp.from_dict(msg.json())
        if not op.matches(self.name, self.scope, self.iid):
            return
        self.apply_op(op)
        self.publish_json(self.topic("ctl", self.scope, "iack"), {"op_id": op.op_id, "iid": self.iid})

    def apply_op(self, op: ControlOp) -> None:
        self.ops_applied.append(op)
        if op.kind == "start":
            self.active = True
        elif op.kind == "terminate":
            self.active = False
        elif op.kind == "filter":
            self.filters.append(make_predicate(op.arg_map))


@dataclass
class _LocalOp:
    op: ControlOp
    expected: set[str]
    acked: list[str] = field(default_factory=list)
    done: bool = False
    result: Any = None
    reply: Optional[Callable] = None


class InAppController(Component):
    """Shared machinery of IC and LIC: policy hooks, telemetry, local op fan-out."""

    def __init__(self, ctx):
        super().__init__(ctx)
        self.hooks: list[PolicyHook] = []
        self.telemetry_by_instance: dict[str, ComponentTelemetry] = {}
        self.epoch_ms = float(self.params.get("epoch_ms", 1000))
        self.alpha = float(self.params.get("alpha", 0.2))
        self.local_timeout_ms = float(self.params.get("local_timeout_ms", 1000))
        self.components = [c for c in self.params.get("components", "").split(",") if c]
        self.aggregates: dict[str, ControlOp] = {}
        self._local_ops: dict[str, _LocalOp] = {}

    # policies

    def register_policy(self, hook: PolicyHook) -> PolicyHandle:
        if hook.override not in OVERRIDES or not hasattr(self, f"base_{hook.override}"):
            raise UnsupportedOverride(hook.override)
        self.hooks.append(hook)
        return PolicyHandle(self, hook)

    def deregister_policy(self, handle: PolicyHandle) -> None:
        if handle.hook in self.hooks:
            self.hooks.remove(handle.hook)

    def decide(self, point: str, *args) -> Any:
        """Newest hook that returns a decision wins; the base policy is the fallback."""
        for hook in reversed(self.hooks):
            if hook.override == point:
                out = hook.decide(self, *args)
                if out is not None:
                    return out
        return getattr(self, f"base_{point}")(*args)

    def base_custom(self, *args) -> Any:
        return None

    # telemetry

    def register_instance(self, iid: str, component: str) -> ComponentTelemetry:
        t = self.telemetry_by_instance.get(iid)
        if t is None:
            t = ComponentTelemetry(iid, component, ewma=Ewma(self.alpha))
            self.telemetry_by_instance[iid] = t
        return t

    def report_telemetry(self, iid: str, sample: dict) -> ComponentTelemetry:
        t = self.telemetry_by_instance.get(iid)
        if t is None:
            raise UnknownInstance(iid)
        t.update(sample)
        self.on_sample(t, sample)
        return t

    def on_sample(self, telemetry: ComponentTelemetry, sample: dict) -> None:
        pass

    def _on_telemetry(self, msg) -> None:
        iid = msg.topic.rsplit("/", 1)[1]
        doc = msg.json()
        if doc.get("kind") == "hello":
            self.register_instance(iid, doc["component"])
        elif iid in self.telemetry_by_instance:
            self.report_telemetry(iid, doc)

    # local fan-out

    def _targets(self, op: ControlOp) -> set[str]:
        return {iid for iid, t in self.telemetry_by_instance.items() if op.matches(t.component, self.scope, iid)}

    def run_local(self, op: ControlOp, reply: Callable[[_LocalOp], None]) -> None:
        """Execute ``op`` on this scope's instances; ``reply`` gets the outcome once."""
        known = self._local_ops.get(op.op_id)
        if known is not None:
            if known.done:
                reply(known)
            else:
                known.reply = reply
            return
        local = _LocalOp(op, self._targets(op), reply=reply)
        self._local_ops[op.op_id] = local
        if op.kind == "aggregate":
            self.aggregates[op.op_id] = op
            local.result = self._aggregate(op)
            self._finish(local)
            return
        if not local.expected:
            self._finish(local)
            return
        self.publish_json(self.topic("ctl", self.scope, "op"), op.to_dict())
        self.sim.after(ms(self.local_timeout_ms), self._finish, local)

    def _on_iack(self, msg) -> None:
        doc = msg.json()
        local = self._local_ops.get(doc["op_id"])
        if local is None or local.done:
            return
        if doc["iid"] not in local.acked:
            local.acked.append(doc["iid"])
        if set(local.acked) >= local.expected:
            self._finish(local)

    def _finish(self, local: _LocalOp) -> None:
        if local.done:
            return
        local.done = True
        if local.reply is not None:
            local.reply(local)

    def _aggregate(self, op: ControlOp) -> float:
        args = op.arg_map
        values: list[float] = []
        for iid in sorted(self._targets(op)):
            values += self.telemetry_by_instance[iid].metric(args.get("metric", "latency"))
        return reduce_window(values, args.get("fn", "mean"))

    def aggregate_values(self) -> dict[str, float]:
        return {op_id: self._aggregate(op) for op_id, op in sorted(self.aggregates.items())}

    def start(self) -> None:
        self.subscribe(self.topic("telemetry", "#"), self._on_telemetry)
        self.subscribe(self.topic("ctl", self.scope, "iack"), self._on_iack)
        self.every(self.epoch_ms, self._epoch)
        self.on_start()

    def _epoch(self) -> None:
        self.on_epoch()

    def on_epoch(self) -> None:
        pass


class LocalController(InAppController):
    """Per-EC controller (LIC): executes IC ops inside its EC and reports each epoch."""

    def start(self) -> None:
        self.ic_state: dict = {}
        self.subscribe(self.topic("ctl", self.scope, "cmd"), self._on_cmd)
        self.subscribe(self.topic("ctl", self.scope, "state"), self._on_state)
        super().start()

    def _on_cmd(self, msg) -> None:
        op = ControlOp.from_dict(msg.json())
        self.run_local(op, self._ack_up)

    def _ack_up(self, local: _LocalOp) -> None:
        self.publish_json(self.topic("ctl", CC_SCOPE, "ack"), {
            "op_id": local.op.op_id, "scope": self.scope, "acked": sorted(local.acked),
            "missing": sorted(local.expected - set(local.acked)), "result": local.result,
        })

    def _on_state(self, msg) -> None:
        self.ic_state = msg.json()
        self.on_state(self.ic_state)

    def on_state(self, state: dict) -> None:
        pass

    def report(self) -> dict:
        return {}

    def _epoch(self) -> None:
        self.on_epoch()
        doc = {"scope": self.scope, "aggregates": self.aggregate_values(), **self.report()}
        self.publish_json(self.topic("ctl", CC_SCOPE, "report", self.scope), doc)


@dataclass
class Dispatch:
    op: ControlOp
    scopes: list[str]
    acks: dict[str, list[str]] = field(default_factory=dict)
    results: dict[str, Any] = field(default_factory=dict)
    timeouts: list[Timeout] = field(default_factory=list)
    sent_at: int = 0

    @property
    def pending(self) -> list[str]:
        return [s for s in self.scopes if s not in self.acks]

    @property
    def complete(self) -> bool:
        return not self.pending

    def ack_list(self) -> list[tuple[str, str]]:
        return sorted((scope, iid) for scope, iids in self.acks.items() for iid in iids)


class GlobalController(InAppController):
    """CC controller (IC): global coordination and op dispatch."""

    def __init__(self, ctx):
        super().__init__(ctx)
        self.scopes = [s for s in self.params.get("scopes", "").split(",") if s]
        self.retry_ms = float(self.params.get("retry_ms", 1000))
        self.dispatch_timeout_ms = float(self.params.get("dispatch_timeout_ms", 2000))
        self.dispatches: dict[str, Dispatch] = {}
        self.reports: dict[str, dict] = {}
        self._op_ids = itertools.count(1)

    def start(self) -> None:
        self.subscribe(self.topic("ctl", CC_SCOPE, "ack"), self._on_ack)
        self.subscribe(self.topic("ctl", CC_SCOPE, "report", "+"), self._on_report)
        super().start()
        self.every(self.retry_ms, self._retry)

    def dispatch(self, op: ControlOp) -> Dispatch:
        if self.components and op.component != "*" and op.component not in self.components \
                and not any(op.target.startswith(f"{self.app}.{c}.") for c in self.components):
            raise UnknownTarget(op.target)
        scope = op.scope
        if scope is not None and scope != CC_SCOPE and scope not in self.scopes:
            raise UnknownTarget(op.target)
        op = replace(op, op_id=f"{self.iid}/op{next(self._op_ids)}")
        scopes = [scope] if scope is not None else [CC_SCOPE] + self.scopes
        d = Dispatch(op, scopes, sent_at=self.sim.now)
        self.dispatches[op.op_id] = d
        for s in scopes:
            self._send(d, s)
        self.sim.after(ms(self.dispatch_timeout_ms), self._expire, d)
        return d

    def _send(self, d: Dispatch, scope: str) -> None:
        if scope == CC_SCOPE:
            self.run_local(d.op, lambda local: self._record(d, CC_SCOPE, local.acked, local.result))
        else:
            self.publish_json(self.topic("ctl", scope, "cmd"), d.op.to_dict())

    def _record(self, d: Dispatch, scope: str, acked: list[str], result: Any) -> None:
        if scope in d.acks:
            return
        d.acks[scope] = sorted(acked)
        d.results[scope] = result
        d.timeouts = [t for t in d.timeouts if t.instance != scope]

    def _on_ack(self, msg) -> None:
        doc = msg.json()
        d = self.dispatches.get(doc["op_id"])
        if d is not None:
            self._record(d, doc["scope"], doc["acked"], doc.get("result"))

    def _expire(self, d: Dispatch) -> None:
        for scope in d.pending:
            t = Timeout(scope)
            if t not in d.timeouts:
                d.timeouts.append(t)

    def _retry(self) -> None:
        for d in self.dispatches.values():
            for scope in d.pending:
                if Timeout(scope) in d.timeouts:
                    self._send(d, scope)

    def _on_report(self, msg) -> None:
        doc = msg.json()
        self.reports[doc["scope"]] = doc
        self.on_report(doc["scope"], doc)

    def on_report(self, scope: str, doc: dict) -> None:
        pass

    def push_state(self, scope: str, state: dict) -> None:
        self.publish_json(self.topic("ctl", scope, "state"), state)


IMAGES.register("ace/ic", GlobalController)
IMAGES.register("ace/lic", LocalController)
IMAGES.register("ace/component", Component)


# --- injection ---------------------------------------------------------------

def needs_controllers(topology: ApplicationTopology) -> bool:
    return any(c.plane == "control" or {"IC", "LIC"} & set(c.connections) for c in topology.components)


def control_bridges(app: str) -> list[BridgeSpec]:
    return [
        BridgeSpec(f"app/{app}/ctl/{{ec}}/cmd", "down"),
        BridgeSpec(f"app/{app}/ctl/{{ec}}/state", "down"),
        BridgeSpec(f"app/{app}/ctl/{CC_SCOPE}/#", "up"),
    ]


def inject_controllers(topology: ApplicationTopology, ec_scopes: list[str]) -> ApplicationTopology:
    """Add IC (one, at CC) and LIC (one per EC) unless the app already declares them."""
    if not needs_controllers(topology):
        return topology
    cparams = dict(topology.controller_params)
    workload = sorted(c.name for c in topology.components if c.name not in ("IC", "LIC"))
    params = {**{k: v for k, v in cparams.items() if k not in ("ic_image", "lic_image")},
              "components": ",".join(workload), "scopes": ",".join(sorted(ec_scopes))}
    pairs = tuple(sorted(params.items()))
    comps = list(topology.components)
    names = set(topology.names)
    if "IC" not in names:
        comps.append(ComponentSpec("IC", cparams.get("ic_image", "ace/ic"), 1, (), 250, 256,
                                   frozenset(), "cloud", "control", "node", pairs))
    if "LIC" not in names:
        comps.append(ComponentSpec("LIC", cparams.get("lic_image", "ace/lic"), len(ec_scopes), (), 250, 256,
                                   frozenset(), "edge", "control", "cluster", pairs))
    bridges = list(topology.bridges)
    for b in control_bridges(topology.app_name):
        if b not in bridges:
            bridges.append(b)
    return replace(topology, components=tuple(sorted(comps, key=lambda c: c.name)), bridges=tuple(bridges))

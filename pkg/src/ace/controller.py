"""Deployment controller and node agents.

The controller turns deployment plans into per-node manifests and ships them
to node agents over the message service on ``ace/ctl/<node-id>``. Agents ack
on ``ace/ctl/<node-id>/ack`` and report status once per second on
``ace/ctl/<node-id>/status``. Unacked manifests are re-sent every retry
period, which is how nodes behind a healed partition converge.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Optional

import yaml

from .infrastructure import HierarchicalId, NodeSpec
from .orchestrator import commitments_of, orchestrate
from .simnet import ms
from .topology import ApplicationTopology, ChangeSet, DeploymentPlan, diff

if TYPE_CHECKING:
    from .platform import Platform

log = logging.getLogger(__name__)

MAX_RESTARTS = 3


class ControllerError(Exception):
    pass


class AlreadyDeployed(ControllerError):
    pass


class UnknownApp(ControllerError):
    pass


class AgentUnreachable(ControllerError):
    def __init__(self, node: str):
        super().__init__(f"agent on {node} unreachable")
        self.node = node


# --- images ------------------------------------------------------------------

class ImageRegistry:
    """Content-addressed stub: image names resolve to behavior factories."""

    def __init__(self, fallback: Optional[Callable] = None):
        self._by_name: dict[str, tuple[str, Callable]] = {}
        self.fallback = fallback

    def copy(self, fallback: Optional[Callable] = None) -> "ImageRegistry":
        """Independent copy; unknown names resolve to ``fallback`` when given."""
        out = ImageRegistry(fallback)
        out._by_name = dict(self._by_name)
        return out

    def register(self, name: str, factory: Callable) -> str:
        digest = "sha256:" + hashlib.sha256(name.encode()).hexdigest()[:16]
        self._by_name[name] = (digest, factory)
        return digest

    def digest(self, name: str) -> str:
        return self._by_name[name][0]

    def resolve(self, name: str) -> Callable:
        try:
            return self._by_name[name][1]
        except KeyError:
            if self.fallback is not None:
                return self.fallback
            raise ControllerError(f"image {name!r} not found") from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name


IMAGES = ImageRegistry()


class IdleBehavior:
    """Placeholder workload that just stays up."""

    def __init__(self, ctx):
        self.ctx = ctx

    def start(self):
        pass

    def stop(self):
        pass


IMAGES.register("ace/idle", IdleBehavior)


# --- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class ServiceEntry:
    instance_id: str
    app: str
    component: str
    image: str
    params: tuple[tuple[str, str], ...] = ()
    plane: str = "workload"
    restart_policy: str = f"on-failure:{MAX_RESTARTS}"

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "app": self.app,
            "component": self.component,
            "image": self.image,
            "params": dict(self.params),
            "plane": self.plane,
            "restart_policy": self.restart_policy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceEntry":
        return cls(d["instance_id"], d["app"], d["component"], d["image"],
                   tuple(sorted(d.get("params", {}).items())), d.get("plane", "workload"),
                   d.get("restart_policy", f"on-failure:{MAX_RESTARTS}"))


@dataclass
class NodeManifest:
    node: str
    services: list[ServiceEntry]
    generation: int = 1

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "generation": self.generation,
            "services": [s.to_dict() for s in sorted(self.services, key=lambda s: s.instance_id)],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NodeManifest":
        return cls(d["node"], [ServiceEntry.from_dict(s) for s in d["services"]], d["generation"])

    def to_compose(self) -> str:
        """Compose-style YAML document: one ``services:`` map for the node."""
        services = {}
        for s in sorted(self.services, key=lambda s: s.instance_id):
            services[s.instance_id] = {
                "image": s.image,
                "environment": dict(s.params),
                "labels": {"ace.app": s.app, "ace.component": s.component, "ace.plane": s.plane},
                "restart": s.restart_policy,
            }
        doc = {"x-ace-node": self.node, "x-ace-generation": self.generation, "services": services}
        return yaml.safe_dump(doc, sort_keys=True, default_flow_style=False)


def instance_id(app: str, component: str, index: int, revision: int) -> str:
    return f"{app}.{component}.{index}.v{revision}"


def assign_instances(plan: DeploymentPlan, revision: int) -> dict[str, tuple[str, int, str]]:
    """instance id -> (component, replica index, node id), deterministic."""
    out = {}
    for name, i, nid in plan.bindings():
        out[instance_id(plan.topology.app_name, name, i, revision)] = (name, i, str(nid))
    return out


def _entry(plan: DeploymentPlan, iid: str, component: str) -> ServiceEntry:
    spec = plan.topology.component(component)
    params = dict(spec.params)
    if spec.plane == "control":
        params = {**dict(plan.topology.controller_params), **params}
    return ServiceEntry(iid, plan.topology.app_name, component, spec.image,
                        tuple(sorted(params.items())), spec.plane)


def plan_to_instructions(plan: DeploymentPlan, instances: Optional[dict] = None) -> list[NodeManifest]:
    """One manifest per node hosting at least one instance of ``plan``."""
    instances = instances if instances is not None else assign_instances(plan, plan.topology.version)
    per_node: dict[str, list[ServiceEntry]] = {}
    for iid, (component, _, node) in instances.items():
        per_node.setdefault(node, []).append(_entry(plan, iid, component))
    return [NodeManifest(node, sorted(per_node[node], key=lambda s: s.instance_id), 1)
            for node in sorted(per_node)]


# --- agent -------------------------------------------------------------------

@dataclass
class InstanceContext:
    """What a running behavior gets to see of its host."""

    platform: "Platform"
    agent: "Agent"
    client: Any
    entry: ServiceEntry
    node: HierarchicalId

    @property
    def sim(self):
        return self.platform.sim

    @property
    def instance_id(self) -> str:
        return self.entry.instance_id

    @property
    def params(self) -> dict[str, str]:
        return dict(self.entry.params)

    @property
    def cluster(self) -> HierarchicalId:
        return self.node.cluster_id

    @property
    def scope(self) -> str:
        """Short cluster token used in topic names: ``cc`` or ``ec-<m>``."""
        return self.node.cluster

    def rng(self, stream: str = ""):
        return self.platform.sim.rng(f"{self.entry.instance_id}/{stream}")

    def crash(self) -> None:
        self.agent.crash(self.entry.instance_id)


@dataclass
class _Running:
    entry: ServiceEntry
    state: str = "starting"
    restarts: int = 0
    behavior: Any = None
    token: int = 0


class Agent:
    """Executes node manifests; one per registered node."""

    def __init__(self, platform: "Platform", node: NodeSpec, start_delay_ms: float = 200.0,
                 status_interval_ms: float = 1000.0):
        self.platform = platform
        self.node = node
        self.node_id = str(node.id)
        self.start_delay = ms(start_delay_ms)
        self.generation = 0
        self.instances: dict[str, _Running] = {}
        self._tokens = 0
        self.client = platform.messaging.register_client(f"agent@{self.node_id}", node.id)
        self.client.subscribe(f"ace/ctl/{self.node_id}", self._on_manifest)
        self._status = platform.sim.every(ms(status_interval_ms), self._report,
                                          start=platform.sim.now + ms(status_interval_ms))

    def _on_manifest(self, msg) -> None:
        manifest = NodeManifest.from_dict(msg.json())
        if manifest.generation <= self.generation:
            self._ack()
            return
        self.generation = manifest.generation
        desired = {s.instance_id: s for s in manifest.services}
        for iid in [i for i in self.instances if i not in desired]:
            self._stop(iid)
        for iid, entry in desired.items():
            if iid not in self.instances:
                self._tokens += 1
                run = _Running(entry, token=self._tokens)
                self.instances[iid] = run
                self.platform.sim.after(self.start_delay, self._start, iid, run.token)
        self._maybe_ack()

    def _start(self, iid: str, token: int) -> None:
        run = self.instances.get(iid)
        if run is None or run.token != token:
            return
        factory = self.platform.images.resolve(run.entry.image)
        ctx = InstanceContext(self.platform, self, self.client, run.entry, self.node.id)
        try:
            run.behavior = factory(ctx)
            run.behavior.start()
            run.state = "running"
        except Exception:
            log.exception("instance %s failed to start", iid)
            self.crash(iid)
            return
        self._maybe_ack()

    def _stop(self, iid: str) -> None:
        run = self.instances.pop(iid)
        if run.behavior is not None and run.state == "running":
            run.behavior.stop()

    def crash(self, iid: str) -> None:
        run = self.instances.get(iid)
        if run is None:
            return
        if run.behavior is not None and run.state == "running":
            try:
                run.behavior.stop()
            except Exception:
                pass
        run.behavior = None
        run.restarts += 1
        if run.restarts > MAX_RESTARTS:
            run.state = "failed"
            self._maybe_ack()
            return
        run.state = "starting"
        self._tokens += 1
        run.token = self._tokens
        self.platform.sim.after(self.start_delay, self._start, iid, run.token)

    def _maybe_ack(self) -> None:
        if all(r.state != "starting" for r in self.instances.values()):
            self._ack()

    def _states(self) -> dict:
        return {iid: {"state": r.state, "restarts": r.restarts} for iid, r in sorted(self.instances.items())}

    def _ack(self) -> None:
        self.client.publish(f"ace/ctl/{self.node_id}/ack", json.dumps(
            {"node": self.node_id, "generation": self.generation, "instances": self._states()},
            sort_keys=True).encode())

    def _report(self) -> None:
        self.client.publish(f"ace/ctl/{self.node_id}/status", json.dumps(
            {"node": self.node_id, "generation": self.generation, "instances": self._states()},
            sort_keys=True).encode())

    def running(self) -> dict[str, str]:
        return {iid: r.state for iid, r in self.instances.items()}

    def behavior(self, iid: str):
        return self.instances[iid].behavior


# --- controller --------------------------------------------------------------

@dataclass
class DeploymentRecord:
    app_name: str
    version: int
    plan: DeploymentPlan
    instances: dict[str, tuple[str, int, str]]
    generations: dict[str, int] = field(default_factory=dict)
    status: str = "deploying"
    detail: dict[str, str] = field(default_factory=dict)
    bridges: list = field(default_factory=list)
    deployed_at: int = 0
    history: list[tuple[int, str]] = field(default_factory=list)

    def set_status(self, status: str, now: int) -> None:
        if status != self.status:
            self.status = status
            self.history.append((now, status))

    def to_dict(self) -> dict:
        return {
            "app": self.app_name,
            "version": self.version,
            "status": self.status,
            "generations": dict(sorted(self.generations.items())),
            "instances": {k: {"component": c, "index": i, "node": n}
                          for k, (c, i, n) in sorted(self.instances.items())},
            "detail": dict(sorted(self.detail.items())),
        }


@dataclass
class MonitoringSnapshot:
    timestamp: float
    instances: dict[str, dict]
    nodes: dict[str, dict]

    def to_dict(self) -> dict:
        return {"timestamp": self.timestamp, "instances": self.instances, "nodes": self.nodes}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


class Controller:
    def __init__(self, platform: "Platform", ack_timeout_ms: float = 2000.0,
                 retry_ms: float = 1000.0, stale_after_ms: float = 3000.0):
        self.platform = platform
        self.sim = platform.sim
        self.ack_timeout = ms(ack_timeout_ms)
        self.stale_after = ms(stale_after_ms)
        self.records: dict[str, DeploymentRecord] = {}
        self.node_services: dict[str, dict[str, ServiceEntry]] = {}
        self.node_gen: dict[str, int] = {}
        self.acked_gen: dict[str, int] = {}
        self.last_seen: dict[str, int] = {}
        self.inst_state: dict[str, dict] = {}
        self.sent: list[tuple[int, str, int]] = []  # (time, node, generation)
        cc_node = HierarchicalId(platform.infra.cc.id.infra, "cc")
        self.client = platform.messaging.register_client("controller@cc", cc_node)
        self.client.subscribe("ace/ctl/+/ack", self._on_ack)
        self.client.subscribe("ace/ctl/+/status", self._on_status)
        self._retry = self.sim.every(ms(retry_ms), self._resend, start=self.sim.now + ms(retry_ms))

    # plumbing

    def _send(self, node: str) -> None:
        gen = self.node_gen[node]
        manifest = NodeManifest(node, list(self.node_services.get(node, {}).values()), gen)
        self.sent.append((self.sim.now, node, gen))
        self.client.publish(f"ace/ctl/{node}", manifest.dumps().encode())

    def manifest(self, node: str) -> NodeManifest:
        return NodeManifest(node, sorted(self.node_services.get(node, {}).values(),
                                         key=lambda s: s.instance_id), self.node_gen.get(node, 0))

    def manifests(self) -> list[NodeManifest]:
        return [self.manifest(n) for n in sorted(self.node_gen)]

    def _resend(self) -> None:
        for node, gen in sorted(self.node_gen.items()):
            if self.acked_gen.get(node, 0) < gen:
                self._send(node)

    def _apply(self, changes: dict[str, dict[str, ServiceEntry]]) -> list[str]:
        """Install new desired service sets; bump and send only nodes that changed."""
        touched = []
        for node in sorted(changes):
            new = changes[node]
            if new == self.node_services.get(node, {}):
                continue
            self.node_services[node] = new
            self.node_gen[node] = self.node_gen.get(node, 0) + 1
            touched.append(node)
            self._send(node)
        return touched

    def _on_ack(self, msg) -> None:
        doc = msg.json()
        node = doc["node"]
        self.acked_gen[node] = max(self.acked_gen.get(node, 0), doc["generation"])
        self._observe(node, doc)

    def _on_status(self, msg) -> None:
        doc = msg.json()
        self._observe(doc["node"], doc)

    def _observe(self, node: str, doc: dict) -> None:
        self.last_seen[node] = self.sim.now
        changed = False
        for iid in [i for i, s in self.inst_state.items() if s["node"] == node and i not in doc["instances"]]:
            del self.inst_state[iid]
            changed = True
        for iid, st in doc["instances"].items():
            new = {"node": node, **st}
            if self.inst_state.get(iid) != new:
                self.inst_state[iid] = new
                changed = True
        # a quiet status only matters to records still waiting on acks
        if changed or any(r.status == "deploying" for r in self.records.values()):
            self._refresh()

    # status evaluation

    def instance_state(self, iid: str, node: str) -> str:
        spec = self.platform.registry.node(node)
        if not spec.active:
            return "degraded"
        st = self.inst_state.get(iid)
        if st is None or st["node"] != node:
            return "pending"
        return st["state"]

    def _refresh(self) -> None:
        now = self.sim.now
        for rec in self.records.values():
            if rec.status == "removed":
                continue
            states = {iid: self.instance_state(iid, node) for iid, (_, _, node) in rec.instances.items()}
            if all(s == "running" for s in states.values()):
                rec.detail = {}
                rec.set_status("running", now)
                continue
            bad = {i: s for i, s in states.items() if s in ("degraded", "failed")}
            timed_out = now - rec.deployed_at >= self.ack_timeout
            if bad or timed_out:
                detail = {}
                for iid, s in states.items():
                    if s == "running":
                        continue
                    node = rec.instances[iid][2]
                    detail[iid] = f"AgentUnreachable({node})" if s == "pending" else s
                rec.detail = detail
                rec.set_status("degraded", now)
            else:
                rec.set_status("deploying", now)

    def _timeout_check(self) -> None:
        self._refresh()

    def on_node_event(self, event: str, node: NodeSpec) -> None:
        if event == "shielded":
            self._refresh()

    # operations

    def _bridge(self, topology: ApplicationTopology) -> list:
        rules = []
        for b in topology.bridges:
            for ec in self.platform.infra.ecs:
                pattern = b.pattern.replace("{ec}", ec.id.cluster)
                rules.append(self.platform.messaging.configure_bridge(ec.id, [pattern], b.direction))
        return rules

    def _unbridge(self, rec: DeploymentRecord) -> None:
        still = [r for other in self.records.values() if other is not rec and other.status != "removed"
                 for r in other.bridges]
        for rule in rec.bridges:
            if rule not in still:
                self.platform.messaging.remove_bridge(rule)
        rec.bridges = []

    def _desired_with(self, plan: DeploymentPlan, instances: dict, drop_app: Optional[str] = None,
                      keep: Optional[set[str]] = None) -> dict[str, dict[str, ServiceEntry]]:
        nodes = set(self.node_services) | {n for _, _, n in instances.values()}
        out = {n: dict(self.node_services.get(n, {})) for n in nodes}
        if drop_app is not None:
            for n in out:
                out[n] = {i: e for i, e in out[n].items() if e.app != drop_app or (keep and i in keep)}
        for iid, (component, _, node) in instances.items():
            out[node][iid] = _entry(plan, iid, component)
        return out

    def active(self, app: str) -> DeploymentRecord:
        rec = self.records.get(app)
        if rec is None or rec.status == "removed":
            raise UnknownApp(app)
        return rec

    def commitments(self, exclude: Optional[str] = None) -> dict[str, tuple[int, int]]:
        plans = [r.plan for r in self.records.values() if r.status != "removed" and r.app_name != exclude]
        return commitments_of(plans)

    def deploy(self, plan: DeploymentPlan, instances: Optional[dict] = None) -> DeploymentRecord:
        app = plan.topology.app_name
        if app in self.records and self.records[app].status != "removed":
            raise AlreadyDeployed(app)
        if instances is None:
            instances = assign_instances(plan, plan.topology.version)
        rec = DeploymentRecord(app, plan.topology.version, plan, instances, deployed_at=self.sim.now)
        rec.history.append((self.sim.now, "deploying"))
        self.records[app] = rec
        rec.bridges = self._bridge(plan.topology)
        self._apply(self._desired_with(plan, instances))
        rec.generations = {n: self.node_gen[n] for _, _, n in instances.values()}
        self.sim.after(self.ack_timeout, self._timeout_check)
        self._refresh()
        return rec

    def restore(self, plan: DeploymentPlan, instances: dict[str, tuple[str, int, str]],
                version: Optional[int] = None) -> DeploymentRecord:
        """Reinstall a deployment persisted elsewhere, keeping its instance ids."""
        rec = self.deploy(plan, instances)
        if version is not None:
            rec.version = version
        return rec

    def bump_to(self, generations: dict[str, int]) -> None:
        """Raise node generations to at least the given values, resending manifests."""
        for node, gen in sorted(generations.items()):
            if gen > self.node_gen.get(node, 0):
                self.node_gen[node] = gen
                self._send(node)
                for rec in self.records.values():
                    if node in rec.generations:
                        rec.generations[node] = gen

    def update(self, app: str, topology: ApplicationTopology, mode: str = "incremental") -> DeploymentRecord:
        rec = self.active(app)
        changes = diff(rec.plan.topology, topology)
        infra = self.platform.infra
        others = self.commitments(exclude=app)
        if mode == "thorough":
            plan = orchestrate(topology, infra, others)
            instances = assign_instances(plan, topology.version)
            self._unbridge(rec)
            desired = self._desired_with(plan, instances, drop_app=app)
        elif mode == "incremental":
            if changes.empty:
                rec.version = topology.version
                rec.plan = DeploymentPlan(topology, rec.plan.instances, rec.plan.service_bindings)
                return rec
            plan, instances = self._incremental(rec, topology, changes, others)
            self._unbridge(rec)
            desired = self._desired_with(plan, instances, drop_app=app)
        else:
            raise ValueError(f"unknown update mode {mode!r}")
        rec.plan = plan
        rec.version = topology.version
        rec.instances = instances
        rec.deployed_at = self.sim.now
        rec.set_status("deploying", self.sim.now)
        rec.bridges = self._bridge(topology)
        touched = self._apply(desired)
        for n in touched:
            rec.generations[n] = self.node_gen[n]
        self.sim.after(self.ack_timeout, self._timeout_check)
        self._refresh()
        return rec

    def _incremental(self, rec: DeploymentRecord, topology: ApplicationTopology, changes: ChangeSet,
                     others: dict) -> tuple[DeploymentPlan, dict]:
        old_plan = rec.plan
        keep = {iid: v for iid, v in rec.instances.items() if v[0] in changes.unchanged}
        kept_plan = DeploymentPlan(topology, {n: old_plan.instances[n] for n in changes.unchanged})
        commitments = dict(others)
        for node, (cpu, mem) in commitments_of([kept_plan]).items():
            c0, m0 = commitments.get(node, (0, 0))
            commitments[node] = (c0 + cpu, m0 + mem)
        fresh_names = changes.added | changes.modified
        sub = topology.with_components([c for c in topology.components if c.name in fresh_names])
        sub_plan = orchestrate(sub, self.platform.infra, commitments)
        instances_map = {n: list(old_plan.instances[n]) for n in changes.unchanged}
        instances_map.update(sub_plan.instances)
        plan = DeploymentPlan(topology, instances_map, sub_plan.service_bindings or old_plan.service_bindings)
        instances = dict(keep)
        instances.update(assign_instances(DeploymentPlan(topology, sub_plan.instances), topology.version))
        return plan, instances

    def remove(self, app: str) -> DeploymentRecord:
        rec = self.active(app)
        desired = {n: {i: e for i, e in svcs.items() if e.app != app} for n, svcs in self.node_services.items()}
        touched = self._apply(desired)
        for n in touched:
            rec.generations[n] = self.node_gen[n]
        self._unbridge(rec)
        rec.set_status("removed", self.sim.now)
        return rec

    def collect_status(self) -> MonitoringSnapshot:
        now = self.sim.now
        commitments = self.commitments()
        nodes = {}
        for spec in self.platform.infra.nodes():
            nid = str(spec.id)
            seen = self.last_seen.get(nid)
            used_cpu, used_mem = commitments.get(nid, (0, 0))
            nodes[nid] = {
                "status": spec.status,
                "residual_cpu": spec.cpu_capacity - used_cpu,
                "residual_mem": spec.mem_capacity - used_mem,
                "last_seen": None if seen is None else seen / 1000,
                "stale": seen is None or now - seen > self.stale_after,
            }
        instances = {}
        for rec in self.records.values():
            if rec.status == "removed":
                continue
            for iid, (component, _, node) in sorted(rec.instances.items()):
                st = self.inst_state.get(iid, {})
                instances[iid] = {
                    "app": rec.app_name,
                    "component": component,
                    "host": node,
                    "state": self.instance_state(iid, node),
                    "restarts": st.get("restarts", 0),
                    "stale": nodes[node]["stale"],
                    "last_seen": nodes[node]["last_seen"],
                }
        return MonitoringSnapshot(now / 1000, instances, nodes)

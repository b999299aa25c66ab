"""Application topology files: model, parse, validate, diff.

A topology is a YAML document::

    app: vq
    version: 1
    services: [message]
    bridges:
      - {pattern: "app/vq/data/coc", direction: up}
    controller_params: {policy: AP}
    components:
      - name: OD
        image: ace/vq-od:1
        replicas: 9
        connections: [LIC, EOC, COC]
        resources: {cpu: 1000, mem: 512}
        labels: {camera: "true"}
        placement: edge
        plane: workload
        spread: node
        params: {interval_s: "0.5"}

Unknown fields are rejected. ``IC`` and ``LIC`` are reserved names for the
in-app controllers the framework injects, so connections may reference them
without declaring them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import yaml

from .infrastructure import HierarchicalId, InfrastructureRecord, NodeSpec, _parse_labels

RESERVED_CONTROLLERS = ("IC", "LIC")
PLACEMENTS = ("edge", "cloud", "any")
PLANES = ("control", "workload")
SPREADS = ("node", "cluster")
SERVICES = ("message", "file")
DIRECTIONS = ("up", "down", "both")

_TOP_FIELDS = {"app", "version", "services", "components", "bridges", "controller_params"}
_COMPONENT_FIELDS = {
    "name", "image", "replicas", "connections", "resources", "labels",
    "placement", "plane", "spread", "params",
}


class TopologyError(Exception):
    pass


class TopologySyntaxError(TopologyError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class UnknownField(TopologyError):
    def __init__(self, field_name: str, where: str = "topology"):
        super().__init__(f"unknown field {field_name!r} in {where}")
        self.field = field_name


class DanglingConnection(TopologyError):
    def __init__(self, name: str):
        super().__init__(f"connection to undeclared component {name!r}")
        self.name = name


class NonPositiveResource(TopologyError):
    def __init__(self, name: str):
        super().__init__(f"component {name!r} has non-positive resources")
        self.name = name


class NameMismatch(TopologyError):
    pass


class NonMonotoneVersion(TopologyError):
    pass


@dataclass(frozen=True)
class ComponentSpec:
    name: str
    image: str
    replicas: int = 1
    connections: tuple[str, ...] = ()
    cpu: int = 100
    mem: int = 64
    labels_required: frozenset[str] = frozenset()
    placement: str = "any"
    plane: str = "workload"
    spread: str = "node"
    params: tuple[tuple[str, str], ...] = ()

    @property
    def param_map(self) -> dict[str, str]:
        return dict(self.params)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "image": self.image,
            "replicas": self.replicas,
            "connections": list(self.connections),
            "resources": {"cpu": self.cpu, "mem": self.mem},
            "labels": sorted(self.labels_required),
            "placement": self.placement,
            "plane": self.plane,
            "spread": self.spread,
            "params": dict(self.params),
        }


@dataclass(frozen=True)
class BridgeSpec:
    pattern: str
    direction: str


@dataclass(frozen=True)
class ApplicationTopology:
    app_name: str
    version: int = 1
    components: tuple[ComponentSpec, ...] = ()
    services_required: frozenset[str] = frozenset({"message"})
    bridges: tuple[BridgeSpec, ...] = ()
    controller_params: tuple[tuple[str, str], ...] = ()

    def component(self, name: str) -> ComponentSpec:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.components]

    def with_components(self, components: Iterable[ComponentSpec]) -> "ApplicationTopology":
        return replace(self, components=tuple(sorted(components, key=lambda c: c.name)))

    def to_dict(self) -> dict:
        return {
            "app": self.app_name,
            "version": self.version,
            "services": sorted(self.services_required),
            "bridges": [{"pattern": b.pattern, "direction": b.direction} for b in self.bridges],
            "controller_params": dict(self.controller_params),
            "components": [c.to_dict() for c in sorted(self.components, key=lambda c: c.name)],
        }


def serialize(topology: ApplicationTopology) -> str:
    """Canonical YAML: components sorted by name, map keys sorted."""
    return yaml.safe_dump(topology.to_dict(), sort_keys=True, default_flow_style=False)


def _str_map(value, where: str) -> tuple[tuple[str, str], ...]:
    if value is None:
        return ()
    if not isinstance(value, dict):
        raise TopologySyntaxError(f"{where} must be a mapping")
    return tuple(sorted((str(k), _scalar(v)) for k, v in value.items()))


def _scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise NonPositiveResource(name)
    try:
        n = int(value)
    except ValueError:
        raise NonPositiveResource(name) from None
    if n <= 0:
        raise NonPositiveResource(name)
    return n


def _component(raw: dict) -> ComponentSpec:
    if not isinstance(raw, dict) or "name" not in raw:
        raise TopologySyntaxError("each component needs a name")
    name = str(raw["name"])
    for key in raw:
        if key not in _COMPONENT_FIELDS:
            raise UnknownField(key, f"component {name}")
    if "image" not in raw:
        raise TopologySyntaxError(f"component {name!r} needs an image")
    res = raw.get("resources") or {}
    if not isinstance(res, dict):
        raise TopologySyntaxError(f"resources of {name!r} must be a mapping")
    for key in res:
        if key not in ("cpu", "mem"):
            raise UnknownField(key, f"resources of {name}")
    cpu = _positive_int(res.get("cpu", 100), name)
    mem = _positive_int(res.get("mem", 64), name)
    replicas = raw.get("replicas", 1)
    if not isinstance(replicas, int) or isinstance(replicas, bool) or replicas < 1:
        raise TopologySyntaxError(f"replicas of {name!r} must be a positive integer")
    placement = raw.get("placement", "any")
    plane = raw.get("plane", "workload")
    spread = raw.get("spread", "node")
    for value, allowed, what in ((placement, PLACEMENTS, "placement"), (plane, PLANES, "plane"), (spread, SPREADS, "spread")):
        if value not in allowed:
            raise TopologySyntaxError(f"{what} of {name!r} must be one of {allowed}")
    try:
        labels = _parse_labels(raw.get("labels"))
    except ValueError as exc:
        raise TopologySyntaxError(str(exc)) from None
    connections = raw.get("connections") or []
    if not isinstance(connections, list):
        raise TopologySyntaxError(f"connections of {name!r} must be a list")
    return ComponentSpec(
        name=name,
        image=str(raw["image"]),
        replicas=replicas,
        connections=tuple(str(c) for c in connections),
        cpu=cpu,
        mem=mem,
        labels_required=labels,
        placement=placement,
        plane=plane,
        spread=spread,
        params=_str_map(raw.get("params"), f"params of {name}"),
    )


def from_dict(doc) -> ApplicationTopology:
    if not isinstance(doc, dict):
        raise TopologySyntaxError("topology must be a mapping")
    for key in doc:
        if key not in _TOP_FIELDS:
            raise UnknownField(key)
    if "app" not in doc:
        raise TopologySyntaxError("missing 'app'")
    version = doc.get("version", 1)
    if not isinstance(version, int) or version < 1:
        raise TopologySyntaxError("version must be an integer >= 1")
    services = doc.get("services") or ["message"]
    for s in services:
        if s not in SERVICES:
            raise TopologySyntaxError(f"unknown service {s!r}")
    bridges = []
    for b in doc.get("bridges") or []:
        if set(b) - {"pattern", "direction"}:
            raise UnknownField(sorted(set(b) - {"pattern", "direction"})[0], "bridge")
        if b.get("direction") not in DIRECTIONS:
            raise TopologySyntaxError(f"bridge direction must be one of {DIRECTIONS}")
        bridges.append(BridgeSpec(str(b["pattern"]), b["direction"]))
    components = [_component(c) for c in (doc.get("components") or [])]
    names = [c.name for c in components]
    if len(set(names)) != len(names):
        raise TopologySyntaxError("duplicate component names")
    known = set(names) | set(RESERVED_CONTROLLERS)
    for c in components:
        for target in c.connections:
            if target not in known:
                raise DanglingConnection(target)
    return ApplicationTopology(
        app_name=str(doc["app"]),
        version=version,
        components=tuple(sorted(components, key=lambda c: c.name)),
        services_required=frozenset(services),
        bridges=tuple(bridges),
        controller_params=_str_map(doc.get("controller_params"), "controller_params"),
    )


def parse_topology(text: bytes | str) -> ApplicationTopology:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TopologySyntaxError(f"not UTF-8: {exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise TopologySyntaxError(str(exc.problem), mark.line + 1 if mark else None) from None
    return from_dict(doc)


# --- feasibility rule shared by validation and placement ---------------------

def placement_allows(component: ComponentSpec, cluster_kind: str) -> bool:
    if component.placement == "edge":
        return cluster_kind == "EC"
    if component.placement == "cloud":
        return cluster_kind == "CC"
    return True


def node_admits(component: ComponentSpec, node: NodeSpec, cluster_kind: str,
                residual_cpu: Optional[int] = None, residual_mem: Optional[int] = None) -> bool:
    if not node.active:
        return False
    if not component.labels_required <= node.labels:
        return False
    if not placement_allows(component, cluster_kind):
        return False
    cpu = node.cpu_capacity if residual_cpu is None else residual_cpu
    mem = node.mem_capacity if residual_mem is None else residual_mem
    return cpu >= component.cpu and mem >= component.mem


@dataclass(frozen=True)
class Violation:
    component: str
    kind: str
    detail: str


def validate(topology: ApplicationTopology, infra: InfrastructureRecord) -> list[Violation]:
    """Every violated constraint, not just the first. Empty list means ok."""
    out: list[Violation] = []
    nodes = [(n, c.kind) for c in infra.clusters for n in c.nodes if n.active]
    for comp in topology.components:
        big_enough = [n for n, _ in nodes if n.cpu_capacity >= comp.cpu and n.mem_capacity >= comp.mem]
        if not big_enough:
            out.append(Violation(comp.name, "InsufficientCapacity",
                                 f"no active node offers {comp.cpu}m/{comp.mem}MiB"))
            continue
        feasible = [(n, k) for n, k in nodes if node_admits(comp, n, k)]
        if not feasible:
            out.append(Violation(comp.name, "NoFeasibleNode",
                                 "no active node satisfies labels, placement and resources"))
            continue
        if comp.spread == "cluster":
            clusters = {str(n.id.cluster_id) for n, _ in feasible}
            if len(clusters) < comp.replicas:
                out.append(Violation(comp.name, "InsufficientClusters",
                                     f"{comp.replicas} replicas need distinct clusters, {len(clusters)} eligible"))
    return out


# --- change sets -------------------------------------------------------------

@dataclass(frozen=True)
class ChangeSet:
    added: frozenset[str]
    removed: frozenset[str]
    modified: frozenset[str]
    unchanged: frozenset[str]
    version: int
    replacements: tuple[ComponentSpec, ...] = ()
    header: tuple[tuple[str, object], ...] = ()

    @property
    def empty(self) -> bool:
        return not (self.added or self.removed or self.modified)


def diff(old: ApplicationTopology, new: ApplicationTopology) -> ChangeSet:
    if old.app_name != new.app_name:
        raise NameMismatch(f"{old.app_name} != {new.app_name}")
    if new.version <= old.version:
        raise NonMonotoneVersion(f"{new.version} <= {old.version}")
    old_c = {c.name: c for c in old.components}
    new_c = {c.name: c for c in new.components}
    added = frozenset(new_c) - frozenset(old_c)
    removed = frozenset(old_c) - frozenset(new_c)
    common = frozenset(old_c) & frozenset(new_c)
    modified = frozenset(n for n in common if old_c[n] != new_c[n])
    return ChangeSet(
        added=added,
        removed=removed,
        modified=modified,
        unchanged=common - modified,
        version=new.version,
        replacements=tuple(new_c[n] for n in sorted(added | modified)),
        header=(
            ("services_required", new.services_required),
            ("bridges", new.bridges),
            ("controller_params", new.controller_params),
        ),
    )


def apply_changes(old: ApplicationTopology, changes: ChangeSet) -> ApplicationTopology:
    comps = {c.name: c for c in old.components if c.name not in changes.removed}
    for spec in changes.replacements:
        comps[spec.name] = spec
    return replace(old, version=changes.version, **dict(changes.header)).with_components(comps.values())


# --- deployment plans --------------------------------------------------------

@dataclass
class DeploymentPlan:
    topology: ApplicationTopology
    instances: dict[str, list[HierarchicalId]] = field(default_factory=dict)
    service_bindings: dict[str, list[str]] = field(default_factory=dict)

    def bindings(self) -> list[tuple[str, int, HierarchicalId]]:
        return [(name, i, nid) for name in sorted(self.instances) for i, nid in enumerate(self.instances[name])]

    def to_dict(self) -> dict:
        doc = self.topology.to_dict()
        for comp in doc["components"]:
            comp["instances"] = [str(n) for n in self.instances.get(comp["name"], [])]
        doc["service_bindings"] = {k: sorted(v) for k, v in sorted(self.service_bindings.items())}
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "DeploymentPlan":
        doc = json.loads(json.dumps(doc))
        bindings = doc.pop("service_bindings", {})
        instances = {}
        for comp in doc.get("components", []):
            instances[comp["name"]] = [HierarchicalId.parse(s) for s in comp.pop("instances", [])]
        return cls(from_dict(doc), instances, bindings)

    @classmethod
    def loads(cls, text: str) -> "DeploymentPlan":
        return cls.from_dict(json.loads(text))

"""Registry of a user's edge-cloud infrastructure.

Every entity is scoped by a three-layer dotted identifier::

    inf-<k>                 infrastructure
    inf-<k>.cc              the central cloud
    inf-<k>.ec-<m>          an edge cloud
    inf-<k>.ec-<m>.n<j>     a node

Counters are per scope, so replaying the same call sequence on a fresh
registry yields identical identifiers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Optional

import yaml


class RegistryError(Exception):
    pass


class ZeroEc(RegistryError):
    pass


class MultipleCc(RegistryError):
    pass


class DuplicateClusterName(RegistryError):
    pass


class UnknownCluster(RegistryError):
    pass


class UnknownNode(RegistryError):
    pass


class UnknownInfra(RegistryError):
    pass


@dataclass(frozen=True, order=True)
class HierarchicalId:
    infra: str
    cluster: Optional[str] = None
    node: Optional[str] = None

    def __post_init__(self):
        if self.node is not None and self.cluster is None:
            raise ValueError("a node id needs a cluster")

    @cached_property
    def _text(self) -> str:
        return ".".join(p for p in (self.infra, self.cluster, self.node) if p is not None)

    def __str__(self) -> str:
        return self._text

    @classmethod
    def parse(cls, text: str) -> "HierarchicalId":
        parts = text.split(".")
        if not 1 <= len(parts) <= 3 or not all(parts):
            raise ValueError(f"malformed id {text!r}")
        return cls(*parts)

    @property
    def cluster_id(self) -> "HierarchicalId":
        return HierarchicalId(self.infra, self.cluster)

    @property
    def infra_id(self) -> "HierarchicalId":
        return HierarchicalId(self.infra)

    @property
    def is_node(self) -> bool:
        return self.node is not None

    @property
    def is_cc(self) -> bool:
        return self.cluster == "cc"

    def within(self, other: "HierarchicalId") -> bool:
        """True if ``other`` is this id or one of its ancestors."""
        return str(self) == str(other) or str(self).startswith(str(other) + ".")


def _parse_labels(labels: Iterable[str] | dict | None) -> frozenset[str]:
    if labels is None:
        return frozenset()
    if isinstance(labels, dict):
        return frozenset(f"{k}={_label_value(v)}" for k, v in labels.items())
    out = set()
    for item in labels:
        if "=" not in item:
            raise ValueError(f"label {item!r} is not key=value")
        out.add(item)
    return frozenset(out)


def _label_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


@dataclass
class NodeSpec:
    id: HierarchicalId
    cpu_capacity: int
    mem_capacity: int
    labels: frozenset[str] = frozenset()
    status: str = "active"
    name: Optional[str] = None

    def __post_init__(self):
        if self.cpu_capacity <= 0 or self.mem_capacity <= 0:
            raise ValueError("node capacities must be positive")

    @property
    def active(self) -> bool:
        return self.status == "active"

    def to_dict(self) -> dict:
        return {
            "id": str(self.id),
            "name": self.name,
            "cpu": self.cpu_capacity,
            "mem": self.mem_capacity,
            "labels": sorted(self.labels),
            "status": self.status,
        }


@dataclass
class ClusterSpec:
    id: HierarchicalId
    kind: str
    name: str
    nodes: list[NodeSpec] = field(default_factory=list)
    lan_bandwidth: float = 100.0
    wan_link: Optional[str] = None
    join_token: str = ""
    _next_node: int = 1

    @property
    def is_cc(self) -> bool:
        return self.kind == "CC"

    def to_dict(self) -> dict:
        return {
            "id": str(self.id),
            "kind": self.kind,
            "name": self.name,
            "lan_bandwidth": self.lan_bandwidth,
            "wan_link": self.wan_link,
            "join_token": self.join_token,
            "next_node": self._next_node,
            "nodes": [n.to_dict() for n in self.nodes],
        }


@dataclass
class InfrastructureRecord:
    id: HierarchicalId
    owner: str
    clusters: list[ClusterSpec] = field(default_factory=list)

    @property
    def cc(self) -> ClusterSpec:
        return next(c for c in self.clusters if c.is_cc)

    @property
    def ecs(self) -> list[ClusterSpec]:
        return [c for c in self.clusters if not c.is_cc]

    def cluster(self, cid: HierarchicalId | str) -> ClusterSpec:
        key = str(cid)
        for c in self.clusters:
            if str(c.id) == key:
                return c
        raise UnknownCluster(key)

    def cluster_by_name(self, name: str) -> ClusterSpec:
        for c in self.clusters:
            if c.name == name:
                return c
        raise UnknownCluster(name)

    def nodes(self) -> list[NodeSpec]:
        return sorted((n for c in self.clusters for n in c.nodes), key=lambda n: str(n.id))

    def node(self, nid: HierarchicalId | str) -> NodeSpec:
        hid = nid if isinstance(nid, HierarchicalId) else HierarchicalId.parse(nid)
        for c in self.clusters:
            if c.id.cluster != hid.cluster:
                continue
            for n in c.nodes:
                if n.id == hid:
                    return n
        raise UnknownNode(str(nid))

    def cluster_of(self, nid: HierarchicalId | str) -> ClusterSpec:
        hid = nid if isinstance(nid, HierarchicalId) else HierarchicalId.parse(nid)
        return self.cluster(hid.cluster_id)

    def to_dict(self) -> dict:
        return {
            "id": str(self.id),
            "owner": self.owner,
            "clusters": [c.to_dict() for c in self.clusters],
        }


class Registry:
    """Single logical authority for infrastructure state."""

    def __init__(self, token_seed: str = "ace"):
        self.token_seed = token_seed
        self.infras: dict[str, InfrastructureRecord] = {}
        self._next_infra = 1
        self._listeners: list[Callable[[str, NodeSpec], None]] = []

    def subscribe(self, listener: Callable[[str, NodeSpec], None]) -> None:
        """listener(event, node) with event in {"registered", "shielded"}."""
        self._listeners.append(listener)

    def _emit(self, event: str, node: NodeSpec) -> None:
        for fn in self._listeners:
            fn(event, node)

    def _token(self, *parts: str) -> str:
        return hashlib.sha256("/".join((self.token_seed,) + parts).encode()).hexdigest()[:16]

    def register_infrastructure(self, owner: str, declared_clusters: list[dict]) -> InfrastructureRecord:
        kinds = [str(c["kind"]).upper() for c in declared_clusters]
        if kinds.count("CC") > 1:
            raise MultipleCc(owner)
        if kinds.count("EC") == 0:
            raise ZeroEc(owner)
        if kinds.count("CC") == 0:
            raise RegistryError("exactly one CC is required")
        if any(k not in ("CC", "EC") for k in kinds):
            raise RegistryError(f"unknown cluster kind in {kinds}")
        names = [c.get("name") or k.lower() for c, k in zip(declared_clusters, kinds)]
        if len(set(names)) != len(names):
            raise DuplicateClusterName(owner)

        infra_id = HierarchicalId(f"inf-{self._next_infra}")
        self._next_infra += 1
        record = InfrastructureRecord(id=infra_id, owner=owner)
        ec_index = 1
        for decl, kind, name in zip(declared_clusters, kinds, names):
            if kind == "CC":
                cid = HierarchicalId(infra_id.infra, "cc")
            else:
                cid = HierarchicalId(infra_id.infra, f"ec-{ec_index}")
                ec_index += 1
            record.clusters.append(ClusterSpec(
                id=cid,
                kind=kind,
                name=name,
                lan_bandwidth=float(decl.get("lan_bandwidth", 100.0)),
                wan_link=None if kind == "CC" else f"wan:{cid}",
                join_token=self._token(str(cid)),
            ))
        self.infras[str(infra_id)] = record
        return record

    def infra(self, iid: HierarchicalId | str) -> InfrastructureRecord:
        key = str(iid if isinstance(iid, str) else iid.infra_id)
        try:
            return self.infras[key]
        except KeyError:
            raise UnknownInfra(key) from None

    def _cluster(self, cid: HierarchicalId | str) -> ClusterSpec:
        hid = cid if isinstance(cid, HierarchicalId) else HierarchicalId.parse(cid)
        if hid.cluster is None:
            raise UnknownCluster(str(hid))
        try:
            return self.infra(hid.infra).cluster(hid.cluster_id)
        except UnknownInfra:
            raise UnknownCluster(str(hid)) from None

    def register_node(
        self,
        cluster: HierarchicalId | str,
        cpu: int,
        mem: int,
        labels: Iterable[str] | dict | None = None,
        name: Optional[str] = None,
    ) -> NodeSpec:
        spec = self._cluster(cluster)
        nid = HierarchicalId(spec.id.infra, spec.id.cluster, f"n{spec._next_node}")
        node = NodeSpec(nid, int(cpu), int(mem), _parse_labels(labels), name=name or str(nid))
        spec._next_node += 1
        spec.nodes.append(node)
        self._emit("registered", node)
        return node

    def node(self, nid: HierarchicalId | str) -> NodeSpec:
        hid = nid if isinstance(nid, HierarchicalId) else HierarchicalId.parse(nid)
        if hid.node is None:
            raise UnknownNode(str(hid))
        try:
            return self.infra(hid.infra).node(hid)
        except (UnknownInfra, UnknownCluster):
            raise UnknownNode(str(hid)) from None

    def shield_node(self, nid: HierarchicalId | str) -> NodeSpec:
        node = self.node(nid)
        if node.status != "shielded":
            node.status = "shielded"
            self._emit("shielded", node)
        return node

    def mark_failed(self, nid: HierarchicalId | str) -> NodeSpec:
        node = self.node(nid)
        node.status = "failed"
        self._emit("shielded", node)
        return node

    def list_nodes(
        self,
        infra: HierarchicalId | str,
        labels: Iterable[str] | dict | None = None,
        kind: Optional[str] = None,
        predicate: Optional[Callable[[NodeSpec], bool]] = None,
    ) -> list[NodeSpec]:
        record = self.infra(infra)
        want = _parse_labels(labels)
        out = []
        for c in record.clusters:
            if kind is not None and c.kind != kind.upper():
                continue
            for n in c.nodes:
                if not n.active or not want <= n.labels:
                    continue
                if predicate is not None and not predicate(n):
                    continue
                out.append(n)
        return sorted(out, key=lambda n: str(n.id))

    # persistence

    def snapshot(self) -> dict:
        return {
            "token_seed": self.token_seed,
            "next_infra": self._next_infra,
            "infras": {k: v.to_dict() for k, v in sorted(self.infras.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True, indent=2)

    @classmethod
    def from_snapshot(cls, data: dict) -> "Registry":
        reg = cls(data.get("token_seed", "ace"))
        reg._next_infra = data["next_infra"]
        for key, rec in data["infras"].items():
            record = InfrastructureRecord(HierarchicalId.parse(rec["id"]), rec["owner"])
            for c in rec["clusters"]:
                spec = ClusterSpec(
                    id=HierarchicalId.parse(c["id"]),
                    kind=c["kind"],
                    name=c["name"],
                    lan_bandwidth=c["lan_bandwidth"],
                    wan_link=c["wan_link"],
                    join_token=c["join_token"],
                    _next_node=c["next_node"],
                )
                for n in c["nodes"]:
                    spec.nodes.append(NodeSpec(
                        HierarchicalId.parse(n["id"]), n["cpu"], n["mem"],
                        frozenset(n["labels"]), n["status"], n["name"],
                    ))
                record.clusters.append(spec)
            reg.infras[key] = record
        return reg

    def load_declaration(self, doc: dict, owner: str = "user") -> InfrastructureRecord:
        """Register an ``infra.yaml`` document: clusters plus their nodes."""
        if not isinstance(doc, dict) or "clusters" not in doc:
            raise RegistryError("infrastructure file needs a 'clusters' list")
        clusters = doc["clusters"]
        record = self.register_infrastructure(
            doc.get("owner", owner),
            [{"kind": c["kind"], "name": c.get("name"), **({"lan_bandwidth": c["lan_bandwidth"]} if "lan_bandwidth" in c else {})}
             for c in clusters],
        )
        for decl, spec in zip(clusters, record.clusters):
            for n in decl.get("nodes", []) or []:
                self.register_node(spec.id, n["cpu"], n["mem"], n.get("labels"), name=n.get("name"))
        return record


def load_infra_yaml(path: str | Path) -> dict:
    return yaml.safe_load(Path(path).read_text())


# Reference testbed: one GPU workstation at CC, three ECs each with one x86
# mini PC and three camera-attached Raspberry Pis.
CC_NODE = {"cpu": 16000, "mem": 65536, "labels": {"gpu": "true", "role": "workstation"}}
MINIPC_NODE = {"cpu": 8000, "mem": 16384, "labels": {"role": "minipc"}}
RPI_NODE = {"cpu": 4000, "mem": 4096, "labels": {"camera": "true", "role": "rpi"}}


def reference_testbed_declaration(n_ecs: int = 3, cameras_per_ec: int = 3) -> dict:
    clusters = [{"name": "cc", "kind": "CC", "nodes": [dict(CC_NODE, name="cc-gpu1")]}]
    for i in range(1, n_ecs + 1):
        nodes = [dict(MINIPC_NODE, name=f"ec-{i}-minipc")]
        nodes += [dict(RPI_NODE, name=f"ec-{i}-rpi{j}") for j in range(1, cameras_per_ec + 1)]
        clusters.append({"name": f"ec-{i}", "kind": "EC", "nodes": nodes})
    return {"owner": "u1", "clusters": clusters}


def build_reference_testbed(registry: Optional[Registry] = None) -> tuple[Registry, InfrastructureRecord]:
    registry = registry or Registry()
    record = registry.load_declaration(reference_testbed_declaration())
    return registry, record

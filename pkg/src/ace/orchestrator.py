"""Component placement: bind every replica to a node.

Components are taken in first-fit-decreasing order of (cpu, mem); each
replica tries candidate nodes in score order and the search backtracks
chronologically on dead ends. Failed sub-states are memoized on
(slot, residual capacities, nodes used by the current component), which
keeps the search complete while cutting the replica-permutation symmetry.

Candidate score: nodes not yet hosting the component first (soft
anti-affinity), then most residual cpu, then most residual mem, then node id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .infrastructure import HierarchicalId, InfrastructureRecord, NodeSpec
from .topology import (
    ApplicationTopology,
    ComponentSpec,
    DeploymentPlan,
    node_admits,
    validate,
)


class OrchestrationError(Exception):
    pass


class Infeasible(OrchestrationError):
    def __init__(self, component: str, reason: str):
        super().__init__(f"{component}: {reason}")
        self.component = component
        self.reason = reason


class ValidationFailed(OrchestrationError):
    def __init__(self, violations):
        super().__init__("; ".join(f"{v.component}: {v.kind}" for v in violations))
        self.violations = violations


@dataclass
class PlacementProblem:
    topology: ApplicationTopology
    nodes: list[tuple[NodeSpec, str]]  # (node, cluster kind)
    commitments: dict[str, tuple[int, int]] = field(default_factory=dict)

    @classmethod
    def build(cls, topology: ApplicationTopology, infra: InfrastructureRecord,
              commitments: Optional[dict[str, tuple[int, int]]] = None,
              cluster: Optional[HierarchicalId] = None) -> "PlacementProblem":
        nodes = []
        for c in infra.clusters:
            if cluster is not None and str(c.id) != str(cluster):
                continue
            for n in c.nodes:
                if n.active:
                    nodes.append((n, c.kind))
        nodes.sort(key=lambda item: str(item[0].id))
        return cls(topology, nodes, dict(commitments or {}))

    def residual(self, node: NodeSpec) -> tuple[int, int]:
        used_cpu, used_mem = self.commitments.get(str(node.id), (0, 0))
        cpu, mem = node.cpu_capacity - used_cpu, node.mem_capacity - used_mem
        if cpu < 0 or mem < 0:
            raise ValueError(f"commitments exceed capacity on {node.id}")
        return cpu, mem


def _score_key(node: NodeSpec, cpu: int, mem: int, already: int):
    return (already, -cpu, -mem, str(node.id))


def feasible_nodes(component: ComponentSpec, problem: PlacementProblem) -> list[HierarchicalId]:
    scored = []
    for node, kind in problem.nodes:
        cpu, mem = problem.residual(node)
        if node_admits(component, node, kind, cpu, mem):
            scored.append(_score_key(node, cpu, mem, 0) + (node.id,))
    scored.sort()
    return [item[-1] for item in scored]


def _ordered(topology: ApplicationTopology) -> list[ComponentSpec]:
    return sorted(topology.components, key=lambda c: (-c.cpu, -c.mem, c.name))


def _search(problem: PlacementProblem) -> Optional[dict[str, list[HierarchicalId]]]:
    comps = _ordered(problem.topology)
    slots = [(c, k) for c in comps for k in range(c.replicas)]
    nodes = [n for n, _ in problem.nodes]
    kinds = [k for _, k in problem.nodes]
    clusters = [str(n.id.cluster_id) for n in nodes]
    cpu = [problem.residual(n)[0] for n in nodes]
    mem = [problem.residual(n)[1] for n in nodes]
    # eligibility ignoring capacity is fixed per component
    eligible = {
        c.name: [i for i, n in enumerate(nodes) if node_admits(c, n, kinds[i], 10**12, 10**12)]
        for c in comps
    }
    chosen: list[int] = []
    failed: set = set()

    def room(comp: ComponentSpec, used_clusters: set) -> int:
        """Replicas of ``comp`` that still fit if nothing else were placed."""
        if comp.spread == "cluster":
            return len({clusters[i] for i in eligible[comp.name]
                        if clusters[i] not in used_clusters and cpu[i] >= comp.cpu and mem[i] >= comp.mem})
        total = 0
        for i in eligible[comp.name]:
            fit = min(cpu[i] // comp.cpu if comp.cpu else 10**9, mem[i] // comp.mem if comp.mem else 10**9)
            total += fit
        return total

    def rec(s: int) -> bool:
        if s == len(slots):
            return True
        comp, k = slots[s]
        used = chosen[s - k:s] if k else []
        key = (s, tuple(cpu), tuple(mem), tuple(sorted(used)))
        if key in failed:
            return False
        used_clusters = {clusters[i] for i in used}
        # cheap necessary condition; it alone rules out over-subscribed components
        if room(comp, used_clusters) < comp.replicas - k or any(
                room(c, set()) < c.replicas for c in comps[comps.index(comp) + 1:]):
            failed.add(key)
            return False
        cands = []
        for i in eligible[comp.name]:
            if cpu[i] < comp.cpu or mem[i] < comp.mem:
                continue
            if comp.spread == "cluster" and clusters[i] in used_clusters:
                continue
            cands.append((_score_key(nodes[i], cpu[i], mem[i], used.count(i)), i))
        cands.sort()
        for _, i in cands:
            cpu[i] -= comp.cpu
            mem[i] -= comp.mem
            chosen.append(i)
            if rec(s + 1):
                return True
            chosen.pop()
            cpu[i] += comp.cpu
            mem[i] += comp.mem
        failed.add(key)
        return False

    if not rec(0):
        return None
    out: dict[str, list[HierarchicalId]] = {c.name: [] for c in problem.topology.components}
    for (comp, _), i in zip(slots, chosen):
        out[comp.name].append(nodes[i].id)
    return out


def _first_blocker(problem: PlacementProblem) -> tuple[str, str]:
    """Name a component to blame when the whole search fails."""
    for comp in _ordered(problem.topology):
        single = PlacementProblem(
            problem.topology.with_components([comp]), problem.nodes, problem.commitments)
        if _search(single) is None:
            return comp.name, "no assignment satisfies its replicas"
    return _ordered(problem.topology)[0].name, "no joint assignment fits capacity"


def solve(problem: PlacementProblem) -> dict[str, list[HierarchicalId]]:
    result = _search(problem)
    if result is None:
        raise Infeasible(*_first_blocker(problem))
    return result


def orchestrate(
    topology: ApplicationTopology,
    infra: InfrastructureRecord,
    commitments: Optional[dict[str, tuple[int, int]]] = None,
    delegate_ecs: bool = False,
) -> DeploymentPlan:
    """Produce a DeploymentPlan or raise; never returns a partial plan.

    With ``delegate_ecs`` the bindings of edge components are reported at
    cluster granularity and resolved later by ``delegate_node_level``.
    """
    violations = validate(topology, infra)
    if violations:
        raise ValidationFailed(violations)
    problem = PlacementProblem.build(topology, infra, commitments)
    instances = solve(problem)
    if delegate_ecs:
        instances = {
            name: [nid if nid.is_cc else nid.cluster_id for nid in nids]
            for name, nids in instances.items()
        }
    services = {s: sorted(str(c.id) for c in infra.clusters) for s in topology.services_required}
    return DeploymentPlan(topology, instances, services)


def delegate_node_level(
    plan: DeploymentPlan,
    ec: HierarchicalId,
    infra: InfrastructureRecord,
    commitments: Optional[dict[str, tuple[int, int]]] = None,
) -> DeploymentPlan:
    """Resolve cluster-level bindings inside ``ec`` to concrete nodes.

    Returns a new plan; the input plan is left untouched on failure.
    """
    ec_key = str(ec.cluster_id)
    wanted: dict[str, int] = {}
    for name, nids in plan.instances.items():
        n = sum(1 for nid in nids if not nid.is_node and str(nid) == ec_key)
        if n:
            wanted[name] = n
    if not wanted:
        return plan
    comps = []
    for name, n in wanted.items():
        spec = plan.topology.component(name)
        # cluster spread is already satisfied at the global level
        comps.append(ComponentSpec(**{**spec.__dict__, "replicas": n, "spread": "node"}))
    local = plan.topology.with_components(comps)
    commitments = dict(commitments or {})
    for name, nids in plan.instances.items():
        spec = plan.topology.component(name)
        for nid in nids:
            if nid.is_node and nid.within(ec.cluster_id):
                cpu, mem = commitments.get(str(nid), (0, 0))
                commitments[str(nid)] = (cpu + spec.cpu, mem + spec.mem)
    problem = PlacementProblem.build(local, infra, commitments, cluster=ec.cluster_id)
    resolved = solve(problem)
    instances = {}
    for name, nids in plan.instances.items():
        fresh = iter(resolved.get(name, []))
        instances[name] = [
            next(fresh) if (not nid.is_node and str(nid) == ec_key) else nid for nid in nids
        ]
    return DeploymentPlan(plan.topology, instances, dict(plan.service_bindings))


def commitments_of(plans: list[DeploymentPlan]) -> dict[str, tuple[int, int]]:
    out: dict[str, tuple[int, int]] = {}
    for plan in plans:
        for name, nids in plan.instances.items():
            spec = plan.topology.component(name)
            for nid in nids:
                if not nid.is_node:
                    continue
                cpu, mem = out.get(str(nid), (0, 0))
                out[str(nid)] = (cpu + spec.cpu, mem + spec.mem)
    return out

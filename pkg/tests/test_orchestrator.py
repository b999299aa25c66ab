import random
import time

import pytest
from hypothesis import given, settings, strategies as st

from ace.infrastructure import HierarchicalId, build_reference_testbed
from ace.orchestrator import (
    Infeasible, OrchestrationError, PlacementProblem, ValidationFailed, delegate_node_level,
    feasible_nodes, orchestrate,
)
from ace.topology import ApplicationTopology, ComponentSpec
from ace.videoquery.topologies import video_query_topology
from oracles import brute_force_feasible, plan_violations, random_instance


def test_feasible_nodes_on_testbed():
    _, rec = build_reference_testbed()
    topo = video_query_topology("ACE", 0.1)
    problem = PlacementProblem.build(topo, rec)
    od = feasible_nodes(topo.component("OD"), problem)
    assert len(od) == 9
    assert all("camera=true" in rec.node(n).labels for n in od)
    assert feasible_nodes(topo.component("COC"), problem) == [rec.cc.nodes[0].id]
    ghost = ComponentSpec("g", "x", labels_required=frozenset({"lidar=true"}))
    assert feasible_nodes(ghost, problem) == []


def test_video_query_plan_layout():
    _, rec = build_reference_testbed()
    plan = orchestrate(video_query_topology("ACE", 0.1), rec)
    assert plan_violations(plan, rec) == []
    assert sorted(map(str, plan.instances["OD"])) == sorted(
        str(n.id) for c in rec.ecs for n in c.nodes if "camera=true" in n.labels)
    eoc = plan.instances["EOC"]
    assert sorted(str(n.cluster_id) for n in eoc) == sorted(str(c.id) for c in rec.ecs)
    assert all("role=minipc" in rec.node(n).labels for n in eoc)
    assert [n.is_cc for n in plan.instances["COC"] + plan.instances["RS"]] == [True, True]


def test_empty_topology_gives_empty_plan():
    _, rec = build_reference_testbed()
    plan = orchestrate(ApplicationTopology("none"), rec)
    assert plan.instances == {}


def test_infeasible_raises_without_plan():
    _, rec = build_reference_testbed()
    with pytest.raises(ValidationFailed):
        orchestrate(ApplicationTopology("t", 1, (ComponentSpec("x", "i", cpu=10**6),)), rec)
    # every node individually fits but twelve 4-core replicas on the camera nodes do not
    crowd = ComponentSpec("x", "i", replicas=12, cpu=4000, mem=1024, labels_required=frozenset({"camera=true"}))
    with pytest.raises(Infeasible) as err:
        orchestrate(ApplicationTopology("t", 1, (crowd,)), rec)
    assert err.value.component == "x"


def test_oversubscribed_component_is_rejected_quickly():
    _, rec = build_reference_testbed()
    # 36 of these fit on the nine camera nodes; a naive search enumerates every multiset
    many = ComponentSpec("OD", "i", replicas=40, cpu=1000, mem=512, labels_required=frozenset({"camera=true"}))
    started = time.perf_counter()
    with pytest.raises(Infeasible):
        orchestrate(ApplicationTopology("t", 1, (many,)), rec)
    assert time.perf_counter() - started < 2.0


def test_deterministic_plan():
    _, rec = build_reference_testbed()
    topo = video_query_topology("ACE_PLUS", 0.1)
    assert orchestrate(topo, rec).dumps() == orchestrate(topo, rec).dumps()


def test_delegation_resolves_within_ec():
    _, rec = build_reference_testbed()
    topo = video_query_topology("ACE", 0.1)
    plan = orchestrate(topo, rec, delegate_ecs=True)
    ec1 = rec.ecs[0].id
    assert sum(1 for n in plan.instances["OD"] if str(n) == str(ec1)) == 3
    resolved = delegate_node_level(plan, ec1, rec)
    ods = [n for n in resolved.instances["OD"] if n.within(ec1)]
    assert len(ods) == 3 and len(set(map(str, ods))) == 3
    eoc = [n for n in resolved.instances["EOC"] if n.within(ec1)]
    assert len(eoc) == 1 and "role=minipc" in rec.node(eoc[0]).labels
    # the input plan is untouched
    assert any(not n.is_node for n in plan.instances["OD"])


def test_delegation_failure_leaves_plan_unchanged():
    reg, rec = build_reference_testbed()
    topo = video_query_topology("ACE", 0.1)
    plan = orchestrate(topo, rec, delegate_ecs=True)
    before = plan.dumps()
    ec1 = rec.ecs[0].id
    for n in rec.ecs[0].nodes:
        if "camera=true" in n.labels:
            reg.shield_node(n.id)
    with pytest.raises(OrchestrationError):
        delegate_node_level(plan, ec1, rec)
    assert plan.dumps() == before


def test_commitments_reduce_residual_capacity():
    _, rec = build_reference_testbed()
    cc = str(rec.cc.nodes[0].id)
    topo = ApplicationTopology("t", 1, (ComponentSpec("x", "i", cpu=8000, placement="cloud"),))
    orchestrate(topo, rec, commitments={cc: (8000, 0)})
    with pytest.raises(Infeasible):
        orchestrate(topo, rec, commitments={cc: (8001, 0)})


def test_oracle_equivalence_sample():
    rng = random.Random(11)
    agree = 0
    for _ in range(150):
        _, rec, topo = random_instance(rng)
        try:
            plan = orchestrate(topo, rec)
        except OrchestrationError:
            plan = None
        assert (plan is not None) == brute_force_feasible(topo, rec)
        if plan is not None:
            assert plan_violations(plan, rec) == []
            agree += 1
    assert 0 < agree < 150  # the generator produces both outcomes


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_adding_an_idle_node_never_breaks_feasibility(seed):
    rng = random.Random(seed)
    reg, rec, topo = random_instance(rng, max_nodes=5)
    try:
        orchestrate(topo, rec)
    except OrchestrationError:
        return
    cluster = rng.choice(rec.clusters)
    reg.register_node(cluster.id, 4000, 4096, ["camera=true", "gpu=true"])
    plan = orchestrate(topo, rec)
    assert plan_violations(plan, rec) == []


def test_shielded_nodes_are_never_chosen():
    reg, rec = build_reference_testbed()
    victim = HierarchicalId.parse(str(rec.ecs[1].nodes[1].id))
    reg.shield_node(victim)
    topo = ApplicationTopology("t", 1, (
        ComponentSpec("od", "i", replicas=8, labels_required=frozenset({"camera=true"})),))
    plan = orchestrate(topo, rec)
    assert str(victim) not in map(str, plan.instances["od"])

import json

import pytest
from hypothesis import given, settings, strategies as st

from ace.infrastructure import (
    DuplicateClusterName, HierarchicalId, MultipleCc, Registry, UnknownCluster, UnknownInfra,
    UnknownNode, ZeroEc, build_reference_testbed,
)


def test_reference_shape():
    reg, rec = build_reference_testbed()
    assert len(rec.ecs) == 3 and rec.cc.kind == "CC"
    assert rec.cc.wan_link is None and all(ec.wan_link for ec in rec.ecs)
    cams = reg.list_nodes(rec.id, labels={"camera": "true"})
    assert len(cams) == 9
    assert len(reg.list_nodes(rec.id)) == 13
    assert [str(n.id) for n in cams] == sorted(str(n.id) for n in cams)


def test_declaration_errors():
    reg = Registry()
    with pytest.raises(ZeroEc):
        reg.register_infrastructure("u1", [{"kind": "CC"}])
    with pytest.raises(MultipleCc):
        reg.register_infrastructure("u1", [{"kind": "CC"}, {"kind": "CC"}, {"kind": "EC"}])
    with pytest.raises(DuplicateClusterName):
        reg.register_infrastructure("u1", [{"kind": "CC", "name": "a"}, {"kind": "EC", "name": "a"}])
    with pytest.raises(UnknownInfra):
        reg.list_nodes("inf-9")


def test_node_ids_share_cluster_prefix():
    reg = Registry()
    rec = reg.register_infrastructure("u1", [{"kind": "CC"}, {"kind": "EC", "name": "e"}])
    ec = rec.ecs[0]
    nodes = [reg.register_node(ec.id, 4000, 4096, {"camera": "true"}) for _ in range(4)]
    assert [str(n.id) for n in nodes] == [f"{ec.id}.n{i}" for i in range(1, 5)]
    assert all(str(n.id).startswith(f"{ec.id}.") for n in nodes)
    cc_node = reg.register_node(rec.cc.id, 16000, 65536, ["gpu=true"])
    assert str(cc_node.id) == f"{rec.id}.cc.n1" and cc_node.status == "active"
    with pytest.raises(UnknownCluster):
        reg.register_node("inf-1.ec-7", 1, 1)
    with pytest.raises(ValueError):
        reg.register_node(ec.id, 0, 1)


def test_shield_is_idempotent_and_hides_node():
    reg, rec = build_reference_testbed()
    target = reg.list_nodes(rec.id, labels={"camera": "true"})[0]
    events = []
    reg.subscribe(lambda ev, n: events.append((ev, str(n.id))))
    reg.shield_node(target.id)
    reg.shield_node(str(target.id))
    assert reg.node(target.id).status == "shielded"
    assert events == [("shielded", str(target.id))]
    assert target.id not in [n.id for n in reg.list_nodes(rec.id)]
    assert len(reg.list_nodes(rec.id, labels={"camera": "true"})) == 8
    with pytest.raises(UnknownNode):
        reg.shield_node("inf-1.ec-1.n99")


def test_id_parse_round_trip():
    hid = HierarchicalId.parse("inf-2.ec-3.n4")
    assert str(hid) == "inf-2.ec-3.n4"
    assert str(hid.cluster_id) == "inf-2.ec-3" and str(hid.infra_id) == "inf-2"
    assert hid.within(hid.cluster_id) and hid.cluster_id.within(hid.infra_id)
    with pytest.raises(ValueError):
        HierarchicalId.parse("")


def test_snapshot_round_trip():
    reg, _ = build_reference_testbed()
    reg.shield_node("inf-1.ec-2.n3")
    copy = Registry.from_snapshot(json.loads(reg.dumps()))
    assert copy.dumps() == reg.dumps()


ops = st.lists(st.tuples(st.sampled_from(["infra", "node"]), st.integers(0, 10), st.integers(1, 3)),
               max_size=25)


def replay(seq):
    reg = Registry("seed")
    infras = []
    issued = []
    for op, pick, n_ec in seq:
        if op == "infra" or not infras:
            rec = reg.register_infrastructure("u", [{"kind": "CC"}] + [{"kind": "EC", "name": f"e{i}"} for i in range(n_ec)])
            infras.append(rec)
            issued.extend((c.id, rec.id) for c in rec.clusters)
        else:
            rec = infras[pick % len(infras)]
            cluster = rec.clusters[pick % len(rec.clusters)]
            node = reg.register_node(cluster.id, 100, 100)
            issued.append((node.id, cluster.id))
    return reg, issued


@settings(max_examples=50, deadline=None)
@given(ops)
def test_prefix_property_and_replay_determinism(seq):
    reg, issued = replay(seq)
    for child, parent in issued:
        assert str(child).startswith(str(parent) + ".")
    assert len({str(c) for c, _ in issued}) == len(issued)
    for rec in reg.infras.values():
        assert sum(c.kind == "CC" for c in rec.clusters) == 1
    assert replay(seq)[0].dumps() == reg.dumps()


@settings(max_examples=30, deadline=None)
@given(st.sets(st.integers(0, 12)))
def test_list_nodes_never_exposes_shielded(picks):
    reg, rec = build_reference_testbed()
    nodes = rec.nodes()
    for i in picks:
        reg.shield_node(nodes[i].id)
    listed = reg.list_nodes(rec.id)
    assert all(n.status == "active" for n in listed)
    assert len(listed) == 13 - len(picks)

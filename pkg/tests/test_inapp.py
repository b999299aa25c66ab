import pytest
from hypothesis import given, settings, strategies as st

from ace.inapp import (
    ComponentTelemetry, ControlOp, Ewma, InAppError, PolicyHook, Timeout, UnknownInstance,
    UnknownTarget, UnsupportedOverride, inject_controllers, make_predicate, reduce_window,
)
from ace.platform import Platform
from ace.topology import ApplicationTopology, ComponentSpec
from ace.videoquery.components import ap_route_hook
from ace.videoquery.policies import COC, EOC
from ace.videoquery.topologies import video_query_topology


def demo_app():
    return ApplicationTopology("demo", 1, (
        ComponentSpec("W", "ace/component", replicas=3, placement="edge", spread="cluster", connections=("LIC",)),
        ComponentSpec("H", "ace/component", placement="cloud"),
    ))


def deployed(topology=None, **kw):
    p = Platform(**kw)
    rec = p.deploy(topology or demo_app())
    assert p.settle(rec) == "running"
    p.run_for(500)
    return p


def by_scope(p, app, comp):
    return {b.scope: b for b in p.behaviors(app, comp)}


# EWMA ------------------------------------------------------------------------

def test_ewma_first_sample_and_fixed_point():
    e = Ewma(0.2)
    assert e.estimate is None and Ewma(0.2, prior=44.0).estimate == 44.0
    assert e.update(44.0) == 44.0
    f = Ewma(0.2)
    for _ in range(200):
        f.update(50.0)
    assert f.value == pytest.approx(50.0)
    with pytest.raises(ValueError):
        Ewma(0.0)
    with pytest.raises(ValueError):
        e.update(-1)


def closed_form(samples, alpha):
    """x_n = (1-a)^(n-1) s_1 + sum_{k>=2} a (1-a)^(n-k) s_k."""
    n = len(samples)
    value = (1 - alpha) ** (n - 1) * samples[0]
    for k in range(2, n + 1):
        value += alpha * (1 - alpha) ** (n - k) * samples[k - 1]
    return value


def test_ewma_alternating_matches_closed_form():
    alpha = 0.2
    samples = [10.0, 90.0] * 60
    e = Ewma(alpha)
    for n, s in enumerate(samples, start=1):
        assert e.update(s) == pytest.approx(closed_form(samples[:n], alpha), rel=1e-12)
    # two-point limit cycle: L10 = a*10 + (1-a)*L90, L90 = a*90 + (1-a)*L10
    low = (alpha * 10 + (1 - alpha) * alpha * 90) / (1 - (1 - alpha) ** 2)
    high = alpha * 90 + (1 - alpha) * low
    assert e.value == pytest.approx(high, abs=1e-6)
    assert (low + high) / 2 == pytest.approx(50.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1000), min_size=1, max_size=40), st.floats(0.01, 1.0))
def test_ewma_property(samples, alpha):
    e = Ewma(alpha)
    for s in samples:
        e.update(s)
    assert e.value == pytest.approx(closed_form(samples, alpha), rel=1e-9, abs=1e-9)
    assert min(samples) - 1e-9 <= e.value <= max(samples) + 1e-9


# value types -------------------------------------------------------------------

def test_value_type_invariants():
    with pytest.raises(InAppError):
        ControlOp("explode", "*")
    with pytest.raises(InAppError):
        PolicyHook("p", "on_whim", "route", lambda *a: None)
    t = ComponentTelemetry("i")
    t.update({"busy": 1.7, "queue_len": 3, "latency_ms": 12.0})
    assert t.busy == 1.0 and t.queue_len == 3 and t.last_latency_sample == 12.0
    with pytest.raises(ValueError):
        t.update({"queue_len": -1})
    op = ControlOp.make("filter", "OD@ec-1", field="size", op="<", value=5)
    assert op.component == "OD" and op.scope == "ec-1"
    assert op.matches("OD", "ec-1", "x") and not op.matches("OD", "ec-2", "x")
    assert ControlOp.from_dict(op.to_dict()) == op
    pred = make_predicate(op.arg_map)
    assert pred({"size": 4}) and not pred({"size": 5}) and not pred({})
    assert reduce_window([1.0, 2.0, 6.0], "mean") == 3.0
    assert reduce_window([], "mean") == 0.0 and reduce_window([1.0], "count") == 1.0


def test_injection_adds_one_ic_and_one_lic_per_ec():
    topo = inject_controllers(demo_app(), ["ec-1", "ec-2", "ec-3"])
    ic, lic = topo.component("IC"), topo.component("LIC")
    assert (ic.replicas, ic.placement, ic.plane) == (1, "cloud", "control")
    assert (lic.replicas, lic.placement, lic.spread) == (3, "edge", "cluster")
    assert inject_controllers(topo, ["ec-1", "ec-2", "ec-3"]) == topo
    plain = ApplicationTopology("p", 1, (ComponentSpec("x", "ace/idle"),))
    assert inject_controllers(plain, ["ec-1"]) is plain


# dispatch ----------------------------------------------------------------------

def test_terminate_is_scoped_to_one_ec():
    p = deployed()
    ic = p.behaviors("demo", "IC")[0]
    d = ic.dispatch(ControlOp.make("terminate", "W@ec-2"))
    p.run_for(1000)
    assert d.complete and d.scopes == ["ec-2"] and len(d.ack_list()) == 1
    assert {s: w.active for s, w in by_scope(p, "demo", "W").items()} == {"ec-1": True, "ec-2": False, "ec-3": True}
    assert p.behaviors("demo", "H")[0].active
    d = ic.dispatch(ControlOp.make("start", "W"))
    p.run_for(1000)
    assert d.complete and len(d.ack_list()) == 3
    assert all(w.active for w in p.behaviors("demo", "W"))


def test_unknown_targets_and_instances():
    p = deployed()
    ic = p.behaviors("demo", "IC")[0]
    with pytest.raises(UnknownTarget):
        ic.dispatch(ControlOp.make("terminate", "Nope"))
    with pytest.raises(UnknownTarget):
        ic.dispatch(ControlOp.make("terminate", "W@ec-9"))
    with pytest.raises(UnknownInstance):
        ic.report_telemetry("ghost", {"latency_ms": 1.0})


def test_partitioned_ec_times_out_then_retries():
    p = deployed()
    ic = p.behaviors("demo", "IC")[0]
    p.partition("ec-3")
    d = ic.dispatch(ControlOp.make("terminate", "W"))
    p.run_for(2500)
    assert set(d.acks) == {"cc", "ec-1", "ec-2"}
    assert d.timeouts == [Timeout("ec-3")]
    assert by_scope(p, "demo", "W")["ec-3"].active
    p.partition("ec-3", False)
    p.run_for(2000)
    assert d.complete and d.timeouts == []
    assert not any(w.active for w in p.behaviors("demo", "W"))


def test_lic_executes_local_ops_during_partition():
    p = deployed()
    lic = by_scope(p, "demo", "LIC")["ec-1"]
    p.partition("ec-1")
    out = []
    lic.run_local(ControlOp("terminate", "W", op_id="local-1"), out.append)
    p.run_for(500)
    assert out and out[0].acked == [by_scope(p, "demo", "W")["ec-1"].iid]
    assert not by_scope(p, "demo", "W")["ec-1"].active


def test_aggregate_reduces_telemetry_window():
    p = deployed()
    w = by_scope(p, "demo", "W")["ec-1"]
    for lat in (10.0, 20.0, 60.0):
        w.telemetry(latency_ms=lat)
    p.run_for(100)
    ic = p.behaviors("demo", "IC")[0]
    d = ic.dispatch(ControlOp.make("aggregate", "W@ec-1", metric="latency", fn="mean"))
    p.run_for(500)
    assert d.results == {"ec-1": 30.0}
    p.run_for(1500)
    # the aggregate keeps being reported every epoch
    assert ic.reports["ec-1"]["aggregates"] == {d.op.op_id: 30.0}


# policies ----------------------------------------------------------------------

def test_custom_policy_register_and_deregister():
    p = deployed()
    lic = by_scope(p, "demo", "LIC")["ec-1"]
    assert lic.decide("custom") is None
    abstain = lic.register_policy(PolicyHook("quiet", "on_message", "custom", lambda ctl: None))
    assert lic.decide("custom") is None  # abstention falls back to the base
    loud = lic.register_policy(PolicyHook("loud", "on_message", "custom", lambda ctl: "mine"))
    assert lic.decide("custom") == "mine"
    loud.deregister()
    abstain.deregister()
    assert not loud.active and lic.hooks == []
    with pytest.raises(UnsupportedOverride):
        lic.register_policy(PolicyHook("r", "on_sample", "route", lambda ctl, a, b: EOC))
    with pytest.raises(UnsupportedOverride):
        lic.register_policy(PolicyHook("r", "on_sample", "bogus", lambda ctl: None))


def test_advanced_route_over_basic_policy():
    p = deployed(video_query_topology("ACE", 0.5, duration_s=2))
    lic = by_scope(p, "vq", "LIC")["ec-1"]
    assert lic.decide("route", 500.0, 10.0) == EOC
    handle = lic.register_policy(ap_route_hook())
    assert lic.decide("route", 500.0, 10.0) == COC
    assert lic.decide("route", 10.0, 500.0) == EOC
    handle.deregister()
    assert lic.decide("route", 500.0, 10.0) == EOC


def test_filter_stops_matching_crops():
    p = deployed(video_query_topology("EI", 0.1, duration_s=20))
    ods = p.behaviors("vq", "OD")
    assert p.behaviors("vq", "IC") == []  # EI has no controllers, so apply the op directly
    od = ods[0]
    p.run_for(3000)
    sent = od.sent
    assert sent > 0
    od.apply_op(ControlOp.make("filter", "OD", field="size", op="<", value=0))
    p.run_for(5000)
    assert od.sent == sent
    assert ods[1].sent > 0


def test_control_and_data_planes_do_not_mix():
    p = Platform(log_lan=True)
    p.settle(p.deploy(video_query_topology("ACE_PLUS", 0.1, duration_s=10)))
    p.run_for(12_000)
    rows = p.messaging.log.records
    assert rows
    for r in rows:
        topic, size, plane = r[1], r[2], r[8]
        if plane == "data":
            assert topic.startswith("app/vq/data/")
        if plane == "control":
            assert "/data/" not in topic and size <= 1024
    assert {r[8] for r in rows} >= {"data", "control", "platform"}

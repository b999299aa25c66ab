import pytest
from hypothesis import given, settings, strategies as st

from ace.fileservice import (
    CONTROL_LIMIT, FileServiceError, KeyExists, PartitionedSource, QuotaExceeded, TransferTicket,
    UnknownKey, checksum_of,
)
from ace.platform import Platform
from ace.simnet import Scenario

MIB = 1024 * 1024


def setup(delay=50.0):
    p = Platform(Scenario(wan_delay_ms=delay))
    ec1 = p.infra.ecs[0]
    edge = p.messaging.register_client("trainer", ec1.nodes[0].id)
    cloud = p.messaging.register_client("collector", p.infra.cc.nodes[0].id)
    return p, p.files, edge, cloud, str(ec1.id)


def file_bytes(p):
    return sum(r[2] for r in p.messaging.log.records if r[8] == "file")


def test_put_announces_to_cloud():
    p, fs, edge, cloud, ec1 = setup()
    seen = []
    cloud.subscribe("ace/svc/file/#", seen.append)
    obj = fs.put(edge, "models/delta", 12 * MIB)
    assert obj.site == ec1 and obj.tier == "temporary"
    p.run_for(500)
    assert [m.topic for m in seen] == [f"ace/svc/file/{ec1}/models/delta"]
    assert seen[0].json()["op"] == "put" and seen[0].payload_size <= CONTROL_LIMIT
    with pytest.raises(KeyExists):
        fs.put(edge, "models/delta", b"again")


def test_fetch_remote_then_cached():
    p, fs, edge, cloud, ec1 = setup()
    fs.put(edge, "artifacts/eoc", b"weights" * 1000)
    done = []
    ticket = fs.fetch(cloud, "artifacts/eoc", ec1, on_done=done.append)
    assert ticket.state == "announced"
    p.run_for(2000)
    assert ticket.state == "complete" and done == [ticket]
    assert ticket.dst_checksum == ticket.src_checksum == checksum_of("artifacts/eoc", b"weights" * 1000)
    assert ticket.result.content == b"weights" * 1000
    assert ticket.history == ["announced", "transferring", "complete"]
    wan_before = file_bytes(p)
    again = fs.fetch(cloud, "artifacts/eoc", ec1)
    assert again.cached and again.state == "complete"
    p.run_for(1000)
    assert file_bytes(p) == wan_before


def test_local_fetch_costs_nothing():
    p, fs, edge, _, ec1 = setup()
    fs.put(edge, "k", 1000)
    t = fs.fetch(edge, "k", ec1)
    assert t.state == "complete" and not t.cached
    with pytest.raises(UnknownKey):
        fs.fetch(edge, "missing", ec1)


def test_large_transfer_time_matches_uplink_rate():
    p, fs, edge, cloud, ec1 = setup(delay=50.0)
    size = 300 * MIB
    fs.put(edge, "models/full", size, tier="permanent")
    t = fs.fetch(cloud, "models/full", ec1)
    p.run_for(140_000)
    assert t.state == "complete"
    elapsed = (t.finished_at - t.created_at) / 1e6
    expected = size * 8 / 20e6 + 0.050
    assert elapsed == pytest.approx(expected, rel=0.01)
    assert file_bytes(p) == size


def test_partitioned_source_without_cache():
    p, fs, edge, cloud, ec1 = setup()
    fs.put(edge, "k", 5000)
    p.partition(ec1)
    with pytest.raises(PartitionedSource):
        fs.fetch(cloud, "k", ec1)


def test_partition_mid_transfer_fails_ticket():
    p, fs, edge, cloud, ec1 = setup()
    fs.put(edge, "big", 50 * MIB)
    t = fs.fetch(cloud, "big", ec1)
    p.run_for(3000)
    assert t.state == "transferring"
    p.partition(ec1)
    p.run_for(100)
    assert t.state == "failed"
    assert t.result is None and ("inf-1.ec-1", "big") not in fs.cache[str(p.infra.cc.id)]


def test_request_times_out_if_never_served():
    p, fs, edge, cloud, ec1 = setup()
    fs.put(edge, "k", 5000)
    t = fs.fetch(cloud, "k", ec1)
    p.partition(ec1)  # request is lost on the way down
    p.run_for(6000)
    assert t.state == "failed" and t.history == ["announced", "failed"]


def test_ticket_only_moves_forward():
    t = TransferTicket("t", "k", "a", "b")
    t.advance("transferring", 1)
    with pytest.raises(FileServiceError):
        t.advance("announced", 2)
    t.advance("complete", 3)
    with pytest.raises(FileServiceError):
        t.advance("failed", 4)


def test_cache_dropped_after_delete_and_new_put():
    p, fs, edge, cloud, ec1 = setup()
    fs.put(edge, "m", b"v1")
    fs.fetch(cloud, "m", ec1)
    p.run_for(2000)
    fs.delete(edge, "m")
    fs.put(edge, "m", b"v2-longer")
    p.run_for(1000)
    t = fs.fetch(cloud, "m", ec1)
    assert not t.cached
    p.run_for(2000)
    assert t.result.content == b"v2-longer"


def test_control_messages_stay_small():
    p, fs, edge, cloud, ec1 = setup()
    for i in range(20):
        fs.put(edge, f"blob/{i}", (i + 1) * MIB)
        fs.fetch(cloud, f"blob/{i}", ec1)
    p.run_for(30_000)
    assert fs.control_sizes and max(fs.control_sizes) <= CONTROL_LIMIT
    big_messages = [r for r in p.messaging.log.records if r[8] != "file" and r[2] > CONTROL_LIMIT]
    assert all(not r[1].startswith("ace/svc/file") for r in big_messages)


def test_quota():
    p = Platform()
    ec1 = str(p.infra.ecs[0].id)
    p.files.quotas[ec1] = 100
    c = p.messaging.register_client("c", p.infra.ecs[0].nodes[0].id)
    p.files.put(c, "a", 60)
    with pytest.raises(QuotaExceeded):
        p.files.put(c, "b", 60)


def test_gc_threshold_zero_and_idempotent():
    p, fs, edge, _, ec1 = setup()
    fs.put(edge, "t1", 10)
    fs.put(edge, "t2", 10)
    fs.put(edge, "keep", 10, tier="permanent")
    p.run_for(10)
    assert fs.gc_temporary(ec1, 0) == 2
    assert fs.gc_temporary(ec1, 0) == 0
    assert list(fs.objects[ec1]) == ["keep"]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 5000)), max_size=20), st.integers(0, 6000))
def test_gc_never_removes_permanent(objects, threshold):
    p, fs, edge, _, ec1 = setup(delay=0.0)
    for i, (permanent, at) in enumerate(objects):
        p.sim.at(at * 1000, fs.put, edge, f"o{i}", 10, "permanent" if permanent else "temporary")
    p.run_for(6000)
    perm = {k for k, o in fs.objects[ec1].items() if o.tier == "permanent"}
    fs.gc_temporary(ec1, threshold)
    assert perm <= set(fs.objects[ec1])
    for o in fs.objects[ec1].values():
        if o.tier == "temporary":
            assert p.sim.now - o.created_at < threshold * 1000

"""One test per acceptance criterion; each prints a PASS/FAIL line.

The default experiment matrix (4 paradigms x 5 loads x 2 delays x 3 seeds,
300 s each) runs once per session and feeds criteria 1-4 and 9.
"""

import filecmp
import random
import time

import numpy as np
import pytest

from ace.orchestrator import OrchestrationError, orchestrate
from ace.platform import Platform
from ace.simnet import BulkFlow, SimLink, Simulator, ms
from ace.videoquery import coc_verdict
from ace.videoquery.experiment import MatrixConfig, results_csv, run_matrix, simulate, trend_checks, write_trace
from ace.videoquery.models import calibrate_negative_a, eoc_error
from conftest import ACCEPTANCE_LINES
from oracles import brute_force_feasible, expected_sites, plan_violations, random_instance, segment_match
from test_controller import vq
from test_messaging import bare, random_rules, random_traffic
from test_videoquery import integrated_error

MATRIX_LIMIT_S = 120.0


def verdict(n, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {n:>2} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def matrix():
    result = run_matrix(MatrixConfig())
    return result, results_csv(result.reports)


def check(matrix, prefix):
    result, _ = matrix
    (c,) = [c for c in trend_checks(result.reports) if c.name.startswith(prefix)]
    return c


def test_criterion_1_f1_ordering(matrix):
    result, _ = matrix
    c = check(matrix, "f1 ordering")
    fast = result.seconds < MATRIX_LIMIT_S
    verdict(1, "f1 ordering", c.passed and fast,
            f"{c.detail}; {len(result.reports)} runs in {result.seconds:.1f}s (limit {MATRIX_LIMIT_S:.0f}s)")


def test_criterion_2_bandwidth_ordering(matrix):
    c = check(matrix, "bwc")
    verdict(2, "bwc ordering", c.passed, c.detail)


def test_criterion_3_cloud_backlog(matrix):
    c = check(matrix, "CI backlog")
    verdict(3, "cloud-only backlog", c.passed, c.detail)


def test_criterion_4_advanced_policy_latency(matrix):
    c = check(matrix, "eil ACE+")
    verdict(4, "advanced policy latency", c.passed, c.detail)


def test_criterion_5_calibration():
    a = calibrate_negative_a()
    model, oracle = eoc_error(a), integrated_error(a)
    n = 100_000
    hit = sum(coc_verdict(1, f"acc/{i}", True) for i in range(n)) / n
    ok = abs(oracle - 0.1106) <= 0.005 and abs(model - oracle) < 1e-6 and abs(hit - 0.9551) <= 0.005
    verdict(5, "calibration", ok, f"edge error {oracle:.4%} (quadrature), cloud hit {hit:.4%} over {n} crops")


def test_criterion_6_network_closed_forms():
    sim = Simulator()
    link = SimLink(sim, "wan", ("ec", "cc"), 20.0, 40.0, 50.0)
    arrival = link.transmit("up", 40_000)
    sim.run()
    sim = Simulator()
    link = SimLink(sim, "wan", ("ec", "cc"), 20.0, 40.0, 50.0)
    size = 300 * 1024 * 1024
    done = []
    BulkFlow(link, "up", size, lambda: done.append(sim.now), lambda: done.append(None))
    sim.run()
    expected = 125.8 + 0.050
    got = done[0] / 1e6 if done and done[0] is not None else float("nan")
    ok = arrival == ms(66) and abs(got - expected) <= 0.01 * expected
    verdict(6, "network closed forms", ok, f"40 KB at {arrival / 1000:g} ms; 300 MiB in {got:.3f}s vs {expected:.3f}s")


def test_criterion_7_orchestrator_oracle():
    rng = random.Random(2024)
    started = time.perf_counter()
    mismatches, bad_plans, found = 0, 0, 0
    for _ in range(500):
        _, rec, topo = random_instance(rng)
        try:
            plan = orchestrate(topo, rec)
        except OrchestrationError:
            plan = None
        if (plan is not None) != brute_force_feasible(topo, rec):
            mismatches += 1
        if plan is not None:
            found += 1
            bad_plans += bool(plan_violations(plan, rec))
    took = time.perf_counter() - started
    ok = mismatches == 0 and bad_plans == 0 and took < 30
    verdict(7, "orchestrator oracle", ok,
            f"500 instances, {found} feasible, {mismatches} mismatches, {bad_plans} invalid plans, {took:.1f}s")


def _counting_case(seed):
    rng = random.Random(seed)
    sim, rec, svc = bare(delay=rng.choice([0.0, 50.0]))
    rules = random_rules(rng, rec, svc)
    subs, counts, plan, _ = random_traffic(rng, svc, rec)
    sim.run()
    cc = str(rec.cc.id)
    expected = {cid: 0 for cid in subs}
    for origin, topic in plan:
        reach = expected_sites(origin, topic, cc, rules)
        for cid, (site, pattern) in subs.items():
            if site in reach and segment_match(pattern, topic):
                expected[cid] += 1
    return counts == expected


def _local_counts(partition):
    rng = random.Random(9)
    sim, rec, svc = bare(delay=50.0)
    random_rules(rng, rec, svc)
    _, _, _, local = random_traffic(rng, svc, rec, n_pub=120)
    if partition:
        for ec in rec.ecs:
            svc.wan[str(ec.id)].set_partition(True, at=ms(100))
    sim.run()
    return local, svc.dropped


def test_criterion_8_messaging_soundness():
    counting = sum(_counting_case(s) for s in range(100))
    sim, rec, svc = bare()
    random_traffic(random.Random(5), svc, rec, n_pub=200)
    sim.run()
    free, _ = _local_counts(False)
    cut, dropped = _local_counts(True)
    ok = counting == 100 and svc.cross_site_deliveries == 0 and free == cut and dropped > 0
    verdict(8, "messaging soundness", ok,
            f"counting {counting}/100 runs exact; {svc.cross_site_deliveries} cross-site deliveries without rules; "
            f"local counts {'unchanged' if free == cut else 'changed'} under partition ({dropped} WAN drops)")


def test_criterion_9_determinism(matrix, tmp_path):
    _, first_csv = matrix
    again = run_matrix(MatrixConfig())
    same_csv = results_csv(again.reports) == first_csv
    # results.csv carries a digest of every run's full traffic log; also write
    # a few logs twice and compare the files themselves
    same_files = True
    for paradigm in ("CI", "EI", "ACE", "ACE_PLUS"):
        for k in (1, 2):
            write_trace(simulate(paradigm, 0.1, 50.0, 1), tmp_path / f"run{k}")
        name = f"{paradigm}_0.1_50_1.jsonl"
        for sub in ("traffic", "crops"):
            same_files &= filecmp.cmp(tmp_path / "run1" / sub / name, tmp_path / "run2" / sub / name, shallow=False)
    digests = len({r.traffic_digest for r in again.reports})
    verdict(9, "determinism", same_csv and same_files,
            f"results.csv {'identical' if same_csv else 'differs'} across reruns ({digests} distinct log digests); "
            f"sampled trace files {'identical' if same_files else 'differ'}")


def test_criterion_10_incremental_update():
    p = Platform()
    rec = p.deploy(vq())
    p.settle(rec)
    before = dict(p.controller.node_gen)
    p.update("vq", vq(2, eoc_cpu=2500))
    after = p.controller.node_gen
    touched = sorted(n for n in after if after[n] != before.get(n))
    eoc_hosts = sorted({node for comp, _, node in rec.instances.values() if comp == "EOC"})
    ok = len(touched) == 3 and touched == [str(n) for n in eoc_hosts] and p.settle(rec) == "running"
    verdict(10, "incremental update", ok, f"regenerated manifests for {touched}")


# invariants over the same matrix; not numbered criteria, so no PASS/FAIL line

def _cells(matrix):
    result, _ = matrix
    cells = {}
    for r in result.reports:
        cells.setdefault((r.load, r.delay), {}).setdefault(r.paradigm, []).append(r)
    return cells


def _avg(reports, attr):
    return sum(getattr(r, attr) for r in reports) / len(reports)


def test_paradigm_dominance(matrix):
    for (load, delay), by in _cells(matrix).items():
        f1 = {p: _avg(rs, "f1") for p, rs in by.items()}
        bwc = {p: _avg(rs, "bwc") for p, rs in by.items()}
        where = f"({load}, {delay})"
        assert f1["CI"] >= f1["ACE_PLUS"] >= f1["ACE"] - 0.02 and f1["ACE"] > f1["EI"], where
        assert bwc["CI"] > bwc["ACE_PLUS"] >= bwc["ACE"] > bwc["EI"] == 0.0, where


def test_high_load_latency_and_routing(matrix):
    for (load, delay), by in _cells(matrix).items():
        if load != 0.1:
            continue
        eil = {p: _avg(rs, "eil_mean") for p, rs in by.items()}
        assert eil["CI"] > eil["ACE_PLUS"] and eil["ACE_PLUS"] < eil["ACE"]
        # AP sends a larger share of crops to the cloud than BP, seed by seed
        bp = {r.seed: r for r in by["ACE"]}
        for r in by["ACE_PLUS"]:
            assert r.direct_uploads > 0
            assert (r.uploads + r.direct_uploads) / r.crops > (bp[r.seed].uploads + bp[r.seed].direct_uploads) / r.crops


def test_every_crop_accounted_for(matrix):
    result, _ = matrix
    for r in result.reports:
        assert r.unlabeled == 0
        assert r.positives + r.drops + r.uploads + r.direct_uploads == r.crops
    # paradigms see the same crops for a given (load, seed)
    counts = {}
    for r in result.reports:
        counts.setdefault((r.load, r.seed), set()).add(r.crops)
    assert all(len(v) == 1 for v in counts.values())


def test_matrix_is_seed_sensitive(matrix):
    # guard against a determinism pass that comes from ignoring the seed
    result, _ = matrix
    by_seed = {}
    for r in result.reports:
        if (r.paradigm, r.load, r.delay) == ("ACE", 0.1, 50.0):
            by_seed[r.seed] = r.traffic_digest
    assert len(set(by_seed.values())) == len(by_seed) == 3
    assert np.isfinite([r.eil_mean for r in result.reports]).all()

"""Experiment harness: run one paradigm end to end and score it.

Each run deploys the paradigm's topology through the orchestrator and
controller, lets the ODs generate crops for ``duration_s`` virtual seconds,
then keeps the clock running until every crop has a label (or the drain cap
expires). Metrics:

* f1 against the cloud-classifier oracle over every crop sent by an OD,
* bwc = WAN data-plane bytes x 8 / duration_s, in Mbps,
* eil = t_labeled - t_od_sent over labeled crops, in ms.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import yaml

from ..messaging import TrafficLog
from ..platform import Platform
from ..simnet import Scenario, ms
from . import components  # noqa: F401  (registers images)
from .models import CROPS_PER_SAMPLE, Crop, coc_oracle
from .topologies import PARADIGMS, video_query_topology

INTERVALS = (0.5, 0.4, 0.3, 0.2, 0.1)
DELAYS = (0.0, 50.0)
SEEDS = (1, 2, 3)


@dataclass
class RunTrace:
    paradigm: str
    interval: float
    delay: float
    seed: int
    duration_s: float
    crops: list[Crop]
    log: TrafficLog
    events: int = 0
    end_time_us: int = 0


@dataclass
class MetricsReport:
    paradigm: str
    load: float
    delay: float
    seed: int
    f1: float
    precision: float
    recall: float
    bwc: float
    eil_mean: float
    eil_p50: float
    eil_p95: float
    crops: int
    positives: int
    drops: int
    uploads: int
    direct_uploads: int
    unlabeled: int
    wan_data_bytes: int
    wan_control_bytes: int
    traffic_digest: str = ""

    @property
    def eil(self) -> dict:
        return {"mean": self.eil_mean, "p50": self.eil_p50, "p95": self.eil_p95}

    @property
    def counts(self) -> dict:
        return {"positives": self.positives, "drops": self.drops,
                "uploads": self.uploads, "direct_uploads": self.direct_uploads}

    def row(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = f"{v:.6f}" if isinstance(v, float) else v
        return out


def f1_score(predicted: Iterable[bool], truth: Iterable[bool]) -> tuple[float, float, float]:
    """(f1, precision, recall); 0 by convention when a denominator vanishes."""
    tp = fp = fn = 0
    for p, t in zip(predicted, truth):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0, precision, recall
    return 2 * precision * recall / (precision + recall), precision, recall


def compute_metrics(trace: RunTrace) -> MetricsReport:
    crops = trace.crops
    truth = [coc_oracle(trace.seed, c.crop_id, c.true_positive) for c in crops]
    predicted = [bool(c.predicted) for c in crops]
    f1, precision, recall = f1_score(predicted, truth)
    eils = np.array([c.eil_us for c in crops if c.t_labeled is not None], dtype=float) / 1000.0
    data_bytes = trace.log.wan_bytes("data")
    control_bytes = trace.log.wan_bytes("control") + trace.log.wan_bytes("platform")
    decisions = [c.decision for c in crops]
    return MetricsReport(
        paradigm=trace.paradigm,
        load=trace.interval,
        delay=trace.delay,
        seed=trace.seed,
        f1=f1,
        precision=precision,
        recall=recall,
        bwc=data_bytes * 8 / trace.duration_s / 1e6,
        eil_mean=float(eils.mean()) if eils.size else 0.0,
        eil_p50=float(np.percentile(eils, 50)) if eils.size else 0.0,
        eil_p95=float(np.percentile(eils, 95)) if eils.size else 0.0,
        crops=len(crops),
        positives=decisions.count("positive"),
        drops=decisions.count("drop"),
        uploads=decisions.count("upload"),
        direct_uploads=decisions.count("direct"),
        unlabeled=sum(1 for c in crops if c.t_labeled is None),
        wan_data_bytes=data_bytes,
        wan_control_bytes=control_bytes,
        traffic_digest=trace.log.digest(),
    )


def simulate(paradigm: str, interval: float, delay: float, seed: int, duration_s: float = 300.0,
             crops_per_sample: float = CROPS_PER_SAMPLE, drain_s: float = 600.0) -> RunTrace:
    if paradigm not in PARADIGMS:
        raise ValueError(f"unknown paradigm {paradigm!r}")
    platform = Platform(Scenario(seed=seed, wan_delay_ms=delay))
    platform.crop_sink = []
    topology = video_query_topology(paradigm, interval, delay, duration_s, crops_per_sample)
    record = platform.deploy(topology)
    status = platform.settle(record)
    if status != "running":
        raise RuntimeError(f"{paradigm} deployment ended {status}: {record.detail}")
    sim = platform.sim
    # every OD starts within one sampling interval of now
    sim.run_until(sim.now + ms((duration_s + interval) * 1000) + ms(1000))
    crops = platform.crop_sink
    cap = sim.now + ms(drain_s * 1000)
    while sim.now < cap and any(c.t_labeled is None for c in crops):
        sim.run_until(sim.now + ms(1000))
    return RunTrace(paradigm, interval, delay, seed, duration_s, crops, platform.messaging.log,
                    sim.executed, sim.now)


def run_experiment(paradigm: str, interval: float, delay: float, seed: int, **kwargs) -> MetricsReport:
    return compute_metrics(simulate(paradigm, interval, delay, seed, **kwargs))


# --- matrix ------------------------------------------------------------------

@dataclass
class MatrixConfig:
    paradigms: tuple[str, ...] = PARADIGMS
    intervals: tuple[float, ...] = INTERVALS
    delays: tuple[float, ...] = DELAYS
    seeds: tuple[int, ...] = SEEDS
    duration_s: float = 300.0
    crops_per_sample: float = CROPS_PER_SAMPLE
    traces: bool = False

    @classmethod
    def from_dict(cls, doc: Optional[dict]) -> "MatrixConfig":
        doc = dict(doc or {})
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown experiment fields: {sorted(extra)}")
        for key in ("paradigms", "intervals", "delays", "seeds"):
            if key in doc:
                doc[key] = tuple(doc[key])
        cfg = cls(**doc)
        for p in cfg.paradigms:
            if p not in PARADIGMS:
                raise ValueError(f"unknown paradigm {p!r}")
        cfg.intervals = tuple(float(i) for i in cfg.intervals)
        cfg.delays = tuple(float(d) for d in cfg.delays)
        cfg.seeds = tuple(int(s) for s in cfg.seeds)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "MatrixConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def cells(self) -> list[tuple[str, float, float, int]]:
        return [(p, i, d, s) for p in self.paradigms for i in self.intervals
                for d in self.delays for s in self.seeds]


@dataclass
class MatrixResult:
    reports: list[MetricsReport]
    seconds: float = 0.0


def run_matrix(cfg: MatrixConfig, out_dir: Optional[Path] = None, progress=None) -> MatrixResult:
    started = time.perf_counter()
    reports = []
    for cell in cfg.cells():
        trace = simulate(*cell, duration_s=cfg.duration_s, crops_per_sample=cfg.crops_per_sample)
        report = compute_metrics(trace)
        reports.append(report)
        if out_dir is not None and cfg.traces:
            write_trace(trace, Path(out_dir))
        if progress is not None:
            progress(report)
    return MatrixResult(reports, time.perf_counter() - started)


def _cell_name(trace: RunTrace) -> str:
    return f"{trace.paradigm}_{trace.interval:g}_{trace.delay:g}_{trace.seed}"


def write_trace(trace: RunTrace, out_dir: Path) -> None:
    crops_dir = out_dir / "crops"
    traffic_dir = out_dir / "traffic"
    crops_dir.mkdir(parents=True, exist_ok=True)
    traffic_dir.mkdir(parents=True, exist_ok=True)
    with open(crops_dir / f"{_cell_name(trace)}.jsonl", "w") as fh:
        for c in trace.crops:
            fh.write(json.dumps(c.to_dict(), sort_keys=True) + "\n")
    trace.log.write(traffic_dir / f"{_cell_name(trace)}.jsonl")


CSV_FIELDS = list(MetricsReport.__dataclass_fields__)


def results_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def read_results_csv(path: str | Path) -> list[MetricsReport]:
    out = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for name, f in MetricsReport.__dataclass_fields__.items():
                raw = row[name]
                if f.type in ("float", float):
                    kw[name] = float(raw)
                elif f.type in ("int", int):
                    kw[name] = int(raw)
                else:
                    kw[name] = raw
            out.append(MetricsReport(**kw))
    return out


# --- trend checks ------------------------------------------------------------

def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else float("nan")


def _by(reports: list[MetricsReport]) -> dict[tuple, list[MetricsReport]]:
    out: dict[tuple, list[MetricsReport]] = {}
    for r in reports:
        out.setdefault((r.paradigm, r.load, r.delay), []).append(r)
    return out


@dataclass
class TrendCheck:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def trend_checks(reports: list[MetricsReport]) -> list[TrendCheck]:
    """Ordering checks over a complete paradigm x load x delay matrix."""
    groups = _by(reports)
    loads = sorted({r.load for r in reports}, reverse=True)
    delays = sorted({r.delay for r in reports})
    have = {r.paradigm for r in reports}
    if not set(PARADIGMS) <= have:
        return [TrendCheck("matrix", False, f"paradigms present: {sorted(have)}")]

    def m(p, load, delay, attr):
        return _mean([getattr(r, attr) for r in groups.get((p, load, delay), [])])

    checks = []
    bad = []
    for load in loads:
        for d in delays:
            ci, plus, ace, ei = (m(p, load, d, "f1") for p in ("CI", "ACE_PLUS", "ACE", "EI"))
            if not (ci >= plus >= ace - 0.02 and ace >= ei + 0.05):
                bad.append(f"({load:g}s,{d:g}ms) CI={ci:.3f} ACE+={plus:.3f} ACE={ace:.3f} EI={ei:.3f}")
    checks.append(TrendCheck("f1 ordering CI >= ACE+ >= ACE-0.02, ACE >= EI+0.05", not bad,
                             "; ".join(bad) or f"{len(loads) * len(delays)} cells ok"))

    bad = []
    for load in [x for x in loads if x <= 0.2 + 1e-9]:
        for d in delays:
            ci, plus, ace = (m(p, load, d, "bwc") for p in ("CI", "ACE_PLUS", "ACE"))
            if not (ci >= 1.5 * ace and plus >= ace):
                bad.append(f"({load:g}s,{d:g}ms) CI={ci:.3f} ACE+={plus:.3f} ACE={ace:.3f}")
    ei_bytes = sum(r.wan_data_bytes for r in reports if r.paradigm == "EI")
    if ei_bytes:
        bad.append(f"EI data bytes {ei_bytes}")
    checks.append(TrendCheck("bwc CI >= 1.5 ACE, ACE+ >= ACE at <=0.2s; EI = 0", not bad, "; ".join(bad) or "ok"))

    if 50.0 in delays and 0.1 in loads and 0.5 in loads:
        hi, lo = m("CI", 0.1, 50.0, "eil_mean"), m("CI", 0.5, 50.0, "eil_mean")
        ok = hi >= 3 * lo
        spread = []
        for p in ("EI", "ACE", "ACE_PLUS"):
            vals = [m(p, load, 50.0, "eil_mean") for load in loads]
            var = (max(vals) - min(vals)) / min(vals)
            spread.append(f"{p} {var:.2f}")
            ok = ok and var < 0.5
        checks.append(TrendCheck("CI backlog x3, others vary < 50% (50 ms)", ok,
                                 f"CI {hi:.1f}/{lo:.1f} ms; " + ", ".join(spread)))

    if 0.1 in loads:
        bad = []
        for d in delays:
            plus = {r.seed: r.eil_mean for r in groups.get(("ACE_PLUS", 0.1, d), [])}
            ace = {r.seed: r.eil_mean for r in groups.get(("ACE", 0.1, d), [])}
            for seed in sorted(ace):
                if not plus.get(seed, float("inf")) < ace[seed]:
                    bad.append(f"seed {seed} {d:g}ms ACE+={plus.get(seed)} ACE={ace[seed]:.1f}")
        checks.append(TrendCheck("eil ACE+ < ACE at 0.1s, every seed", not bad, "; ".join(bad) or "ok"))
    return checks

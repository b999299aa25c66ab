"""Runtime behaviors of the query pipeline, run by node agents.

Data topics (app ``vq``):

    app/vq/data/<ec>/eoc    OD -> EOC inside one EC
    app/vq/data/coc         OD or EOC -> COC (bridged up)
    app/vq/data/rs          classifier verdicts -> RS

Control topics used on top of the in-app framework:

    app/vq/ctl/<ec>/route       LIC -> ODs   current destination under AP
    app/vq/ctl/<ec>/thresholds  LIC -> EOC   current confidence thresholds
"""

from __future__ import annotations

import numpy as np

from ..controller import IMAGES
from ..inapp import Component, GlobalController, LocalController, PolicyHook
from ..simnet import derive_seed, ms
from .models import (
    COC_SERVICE_MS,
    CROPS_PER_SAMPLE,
    EOC_SERVICE_MS,
    RESULT_BYTES,
    ClassifierModel,
    ConfidenceLaw,
    CropSource,
    coc_verdict,
    sampling_events,
)
from .policies import (
    COC,
    DEFAULT_TARGET_MS,
    DROP,
    EOC,
    POSITIVE,
    UPLOAD,
    EilEstimator,
    PolicyThresholds,
    adapt_thresholds,
    ap_route,
    bp_route,
    update_eil,
)

_LAW = None


def _law() -> ConfidenceLaw:
    global _LAW
    if _LAW is None:
        _LAW = ConfidenceLaw()
    return _LAW


def _thresholds(params: dict) -> PolicyThresholds:
    return PolicyThresholds(float(params.get("theta_lo", 0.10)), float(params.get("theta_hi", 0.80)))


class ObjectDetector(Component):
    """Samples frames every ``interval_s`` and emits crops.

    ``mode``: ``edge`` sends every crop to the local EOC, ``cloud`` sends
    every crop straight to COC, ``adaptive`` follows the LIC's route.
    """

    def on_start(self):
        p = self.params
        self.interval_us = ms(float(p.get("interval_s", 0.5)) * 1000)
        self.n_events = sampling_events(float(p.get("interval_s", 0.5)), float(p.get("duration_s", 300)))
        self.mode = p.get("mode", "edge")
        node = str(self.ctx.node)
        rng = np.random.default_rng(derive_seed(self.sim.seed, f"crops/{node}"))
        self.source = CropSource(node, rng, _law(), float(p.get("crops_per_sample", CROPS_PER_SAMPLE)))
        self.dest = COC if self.mode == "cloud" else EOC
        self.sink = getattr(self.ctx.platform, "crop_sink", None)
        self.eoc_topic = self.topic("data", self.scope, "eoc")
        self.coc_topic = self.topic("data", "coc")
        self.sent = 0
        if self.mode == "adaptive":
            self.subscribe(self.topic("ctl", self.scope, "route"), self._on_route)
        phase = int(self.sim.rng(f"phase/{node}").random() * self.interval_us)
        self.t0 = self.sim.now + phase
        # empty samples produce nothing, so only the non-empty ones get an event
        counts = self.source.counts(self.n_events)
        self._due = [(int(i), int(counts[i])) for i in np.flatnonzero(counts)]
        self._next = 0
        self._ev = None
        self._schedule()

    def on_stop(self):
        if self._ev is not None:
            self._ev.cancel()

    def _schedule(self):
        if self._next < len(self._due):
            k = self._due[self._next][0]
            self._ev = self.sim.at(self.t0 + k * self.interval_us, self._sample)

    def _on_route(self, msg):
        self.dest = msg.json()["dest"]

    def _sample(self):
        _, n = self._due[self._next]
        self._next += 1
        self._schedule()
        if not self.active:
            return
        for crop in self.source.crops(n, self.sim.now):
            if self.filters and not self.passes(crop.item()):
                continue
            self.send(crop)

    def send(self, crop):
        now = self.sim.now
        crop.t_od_sent = now
        crop.path.append(f"OD@{self.scope}")
        if self.sink is not None:
            self.sink.append(crop)
        self.sent += 1
        if self.dest == COC:
            crop.decision = "direct"
            crop.t_sent_coc = now
            self.client.service.publish(self.client, self.coc_topic, crop, crop.size,
                                        direct=self.mode == "cloud")
        else:
            self.client.publish(self.eoc_topic, crop, crop.size)


class EdgeClassifier(Component):
    """Edge classifier: FIFO, 44 ms per crop, then a BP decision.

    ``mode: edge-only`` never uploads: above theta_hi is positive, anything
    else is treated as negative.
    """

    def on_start(self):
        self.thresholds = _thresholds(self.params)
        self.edge_only = self.params.get("mode") == "edge-only"
        self.per_item = self.params.get("telemetry") == "per_item"
        self.model = ClassifierModel(self.sim, "EOC", float(self.params.get("service_ms", EOC_SERVICE_MS)), self._done)
        self.coc_topic = self.topic("data", "coc")
        self.rs_topic = self.topic("data", "rs")
        self.started = self.sim.now
        self.subscribe(self.topic("data", self.scope, "eoc"), lambda msg: self.model.submit(msg.payload))
        self.subscribe(self.topic("ctl", self.scope, "thresholds"), self._on_thresholds)
        if not self.per_item:
            self.every(float(self.params.get("epoch_ms", 1000)), self._report)

    def _on_thresholds(self, msg):
        d = msg.json()
        self.thresholds = PolicyThresholds(d["theta_lo"], d["theta_hi"])

    def busy_fraction(self) -> float:
        elapsed = self.sim.now - self.started
        return min(1.0, self.model.busy_us / elapsed) if elapsed > 0 else 0.0

    def _report(self):
        self.telemetry(queue_len=self.model.queue_len, busy=self.busy_fraction())

    def _done(self, crop):
        now = self.sim.now
        conf = crop.confidence
        if self.edge_only:
            decision = POSITIVE if conf > self.thresholds.theta_hi else DROP
        else:
            decision = bp_route(conf, self.thresholds)
        if decision == UPLOAD:
            crop.decision = "upload"
            crop.path.append(f"EOC@{self.scope}")
            crop.t_sent_coc = now
            self.client.publish(self.coc_topic, crop, crop.size)
        else:
            crop.decision = decision
            crop.label(decision == POSITIVE, now, f"EOC@{self.scope}")
            self.client.publish(self.rs_topic, crop, RESULT_BYTES)
        if self.per_item:
            self.telemetry(latency_ms=(now - crop.t_od_sent) / 1000, queue_len=self.model.queue_len,
                           uploaded=decision == UPLOAD)


class CloudClassifier(Component):
    """Cloud classifier: FIFO, 32.3 ms per crop, deterministic top-5 verdict."""

    def on_start(self):
        self.per_item = self.params.get("telemetry") == "per_item"
        self.model = ClassifierModel(self.sim, "COC", float(self.params.get("service_ms", COC_SERVICE_MS)), self._done)
        self.rs_topic = self.topic("data", "rs")
        self.seed = self.sim.seed
        self.subscribe(self.topic("data", "coc"), lambda msg: self.model.submit(msg.payload))

    def _done(self, crop):
        now = self.sim.now
        crop.label(coc_verdict(self.seed, crop.crop_id, crop.true_positive), now, "COC")
        self.client.publish(self.rs_topic, crop, RESULT_BYTES)
        if self.per_item:
            self.telemetry(latency_ms=(now - crop.t_sent_coc) / 1000, queue_len=self.model.queue_len)


class ResultStorage(Component):
    def on_start(self):
        self.results: dict[str, bool] = {}
        self.subscribe(self.topic("data", "rs"), self._store)

    def _store(self, msg):
        crop = msg.payload
        self.results[crop.crop_id] = crop.predicted


def ap_route_hook() -> PolicyHook:
    return PolicyHook("AP-route", "on_sample", "route", lambda ctl, eoc, coc: ap_route(eoc, coc))


def ap_threshold_hook() -> PolicyHook:
    return PolicyHook("AP-thresholds", "on_timer", "thresholds",
                      lambda ctl, current, eoc, coc: adapt_thresholds(
                          current, eoc, coc, ctl.eoc_target_ms, coc_target=ctl.coc_target_ms, shrink=ctl.shrink))


class QueryGlobalController(GlobalController):
    """IC: tracks COC latency, sets per-EC thresholds each epoch."""

    def on_start(self):
        p = self.params
        self.policy = p.get("policy", "BP")
        self.shrink = p.get("shrink", "band")
        coc_prior = float(p.get("coc_prior_ms", COC_SERVICE_MS))
        eoc_prior = float(p.get("eoc_prior_ms", EOC_SERVICE_MS))
        target = float(p.get("target_ms", DEFAULT_TARGET_MS))
        self.eoc_target_ms = float(p.get("eoc_target_ms", target))
        self.coc_target_ms = float(p.get("coc_target_ms", target))
        self.coc = EilEstimator("COC", self.alpha, prior=coc_prior)
        self.coc_queue = 0
        base = _thresholds(p)
        self.thresholds = {s: base for s in self.scopes}
        self.eoc_eil = {s: eoc_prior for s in self.scopes}
        self.history: list[tuple[int, str, float, float]] = []
        if self.policy == "AP":
            self.register_policy(ap_threshold_hook())
        state_ms = float(p.get("state_ms", self.epoch_ms))
        if state_ms != self.epoch_ms:
            self.every(state_ms, self._push_all)

    def base_thresholds(self, current, eil_eoc, eil_coc):
        return current

    def on_sample(self, telemetry, sample):
        if telemetry.component == "COC" and sample.get("latency_ms") is not None:
            update_eil(self.coc, sample["latency_ms"])
            self.coc_queue = int(sample.get("queue_len", 0))

    def on_report(self, scope, doc):
        if doc.get("eoc_eil") is not None:
            self.eoc_eil[scope] = doc["eoc_eil"]

    def on_epoch(self):
        for scope in self.scopes:
            th = self.decide("thresholds", self.thresholds[scope], self.eoc_eil[scope], self.coc.ewma)
            self.thresholds[scope] = th
            self.history.append((self.sim.now, scope, th.theta_lo, th.theta_hi))
        self._push_all()

    def _push_all(self):
        for scope in self.scopes:
            th = self.thresholds[scope]
            self.push_state(scope, {"coc_eil": self.coc.ewma, "coc_queue": self.coc_queue,
                                    "theta_lo": th.theta_lo, "theta_hi": th.theta_hi})


ROUTE_ESTIMATES = ("ewma", "queue")


class QueryLocalController(LocalController):
    """LIC: tracks the local EOC latency and steers ODs under AP."""

    def on_start(self):
        p = self.params
        self.policy = p.get("policy", "BP")
        self.eoc_prior = float(p.get("eoc_prior_ms", EOC_SERVICE_MS))
        self.eoc = EilEstimator(f"EOC@{self.scope}", self.alpha, prior=self.eoc_prior)
        self.coc_eil = float(p.get("coc_prior_ms", COC_SERVICE_MS))
        self.thresholds = _thresholds(p)
        self.dest = EOC
        self.route_estimate = p.get("route_estimate", "ewma")
        if self.route_estimate not in ROUTE_ESTIMATES:
            raise ValueError(f"unknown route estimate {self.route_estimate!r}")
        self.coc_prior = self.coc_eil
        self.eoc_service = float(p.get("eoc_service_ms", EOC_SERVICE_MS))
        self.coc_service = float(p.get("coc_service_ms", COC_SERVICE_MS))
        self.eoc_queue = 0
        self.coc_queue = 0
        self.epoch_samples = 0
        self.route_changes = 0
        if self.policy == "AP":
            self.register_policy(ap_route_hook())

    def base_route(self, eil_eoc, eil_coc):
        return EOC

    def on_sample(self, telemetry, sample):
        if telemetry.component == "EOC" and sample.get("latency_ms") is not None:
            update_eil(self.eoc, sample["latency_ms"])
            self.eoc_queue = int(sample.get("queue_len", 0))
            self.epoch_samples += 1
            self._reroute()

    def on_state(self, state):
        self.coc_eil = state["coc_eil"]
        self.coc_queue = int(state.get("coc_queue", 0))
        th = PolicyThresholds(state["theta_lo"], state["theta_hi"])
        if th != self.thresholds:
            self.thresholds = th
            self.publish_json(self.topic("ctl", self.scope, "thresholds"),
                              {"theta_lo": th.theta_lo, "theta_hi": th.theta_hi})
        self._reroute()

    def _reroute(self):
        dest = self.decide("route", *self.route_inputs())
        if dest != self.dest:
            self.dest = dest
            self.route_changes += 1
            self.publish_json(self.topic("ctl", self.scope, "route"), {"dest": dest})

    def route_inputs(self) -> tuple[float, float]:
        """(EOC, COC) latency estimates the route decision compares.

        ``ewma`` uses the smoothed measured latencies. ``queue`` predicts the
        latency of a crop sent now from the last seen queue lengths.
        """
        if self.route_estimate == "queue":
            return (self.eoc_prior + self.eoc_queue * self.eoc_service,
                    self.coc_prior + self.coc_queue * self.coc_service)
        return self.eoc.ewma, self.coc_eil

    def on_epoch(self):
        # an idle EOC drifts back to its prior so the edge gets probed again
        if self.epoch_samples == 0 and self.eoc.value is not None:
            update_eil(self.eoc, self.eoc_prior)
            self._reroute()
        self.epoch_samples = 0

    def report(self):
        return {"eoc_eil": self.eoc.ewma}


IMAGES.register("ace/vq-od", ObjectDetector)
IMAGES.register("ace/vq-eoc", EdgeClassifier)
IMAGES.register("ace/vq-coc", CloudClassifier)
IMAGES.register("ace/vq-rs", ResultStorage)
IMAGES.register("ace/vq-ic", QueryGlobalController)
IMAGES.register("ace/vq-lic", QueryLocalController)

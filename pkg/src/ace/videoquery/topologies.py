"""Topology files for the four paradigms of the query app."""

from __future__ import annotations

from ..topology import ApplicationTopology, from_dict
from .models import COC_SERVICE_MS, CROPS_PER_SAMPLE, EOC_SERVICE_MS

PARADIGMS = ("CI", "EI", "ACE", "ACE_PLUS")
APP = "vq"

# Expected one-way cost of a 40 KB crop on a 20 Mbps uplink, in ms.
_UPLINK_MS = 16.0
_LAN_MS = 4.0


def _od(mode: str, interval_s: float, duration_s: float, crops: float, connections: list[str]) -> dict:
    return {
        "name": "OD", "image": "ace/vq-od", "replicas": 9, "connections": connections,
        "resources": {"cpu": 1000, "mem": 512}, "labels": {"camera": "true"},
        "placement": "edge", "spread": "node",
        "params": {"interval_s": interval_s, "duration_s": duration_s, "crops_per_sample": crops, "mode": mode},
    }


def _eoc(params: dict, connections: list[str]) -> dict:
    return {
        "name": "EOC", "image": "ace/vq-eoc", "replicas": 3, "connections": connections,
        "resources": {"cpu": 2000, "mem": 2048}, "labels": {"role": "minipc"},
        "placement": "edge", "spread": "cluster", "params": params,
    }


def _coc(params: dict) -> dict:
    return {
        "name": "COC", "image": "ace/vq-coc", "replicas": 1, "connections": ["RS"],
        "resources": {"cpu": 4000, "mem": 8192}, "labels": {"gpu": "true"},
        "placement": "cloud", "params": params,
    }


def _rs(edge: bool) -> dict:
    doc = {"name": "RS", "image": "ace/vq-rs", "resources": {"cpu": 500, "mem": 512}}
    if edge:
        doc.update(replicas=3, placement="edge", spread="cluster")
    else:
        doc.update(replicas=1, placement="cloud")
    return doc


def topology_document(paradigm: str, interval_s: float, delay_ms: float = 0.0, duration_s: float = 300.0,
                      crops_per_sample: float = CROPS_PER_SAMPLE, version: int = 1) -> dict:
    if paradigm not in PARADIGMS:
        raise ValueError(f"unknown paradigm {paradigm!r}")
    doc: dict = {"app": APP, "version": version, "services": ["message"]}
    if paradigm == "CI":
        doc["components"] = [_od("cloud", interval_s, duration_s, crops_per_sample, ["COC"]), _coc({}), _rs(False)]
        return doc
    if paradigm == "EI":
        doc["components"] = [
            _od("edge", interval_s, duration_s, crops_per_sample, ["EOC"]),
            _eoc({"mode": "edge-only"}, ["RS"]),
            _rs(True),
        ]
        return doc
    adaptive = paradigm == "ACE_PLUS"
    telemetry = {"telemetry": "per_item"} if adaptive else {}
    doc["components"] = [
        _od("adaptive" if adaptive else "edge", interval_s, duration_s, crops_per_sample,
            ["EOC", "COC", "LIC"] if adaptive else ["EOC", "LIC"]),
        _eoc({"mode": "bp", **telemetry}, ["COC", "RS", "LIC"]),
        _coc(telemetry),
        _rs(False),
    ]
    doc["bridges"] = [
        {"pattern": f"app/{APP}/data/coc", "direction": "up"},
        {"pattern": f"app/{APP}/data/rs", "direction": "up"},
    ]
    doc["controller_params"] = {
        "policy": "AP" if adaptive else "BP",
        "ic_image": "ace/vq-ic",
        "lic_image": "ace/vq-lic",
        "alpha": 0.2,
        "epoch_ms": 1000,
        "target_ms": 300,
        "route_estimate": "queue",
        "eoc_prior_ms": EOC_SERVICE_MS + _LAN_MS,
        "coc_prior_ms": round(COC_SERVICE_MS + _UPLINK_MS + delay_ms, 3),
    }
    if adaptive:
        # routing reacts to queue snapshots, so ship COC state more often than once per epoch
        doc["controller_params"]["state_ms"] = 200
    return doc


def video_query_topology(paradigm: str, interval_s: float, delay_ms: float = 0.0, duration_s: float = 300.0,
                         crops_per_sample: float = CROPS_PER_SAMPLE, version: int = 1) -> ApplicationTopology:
    return from_dict(topology_document(paradigm, interval_s, delay_ms, duration_s, crops_per_sample, version))

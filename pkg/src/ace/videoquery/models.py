"""Synthetic stand-ins for the query pipeline's data and classifiers.

Crops arrive per sampling event as a Poisson batch. Each crop carries a
latent label and a latent edge-classifier confidence drawn at extraction
time, so every paradigm run on the same seed sees the same crops.

Edge confidence law: positives ~ Beta(2, 1); negatives ~ Beta(a, 0.6) with
``a`` solved so that the decision "positive iff c > 0.8" errs on 11.06% of
the crop mix. The U-shaped negative law keeps most negatives confidently
low, which is what makes the upload band narrow.

The cloud classifier is a deterministic function of (seed, crop id): the
same function serves as the run-time verdict and as the ground-truth oracle.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import betainc

POSITIVE_CROPS = 6433
NEGATIVE_CROPS = 68749
P_POSITIVE = POSITIVE_CROPS / (POSITIVE_CROPS + NEGATIVE_CROPS)

EOC_TARGET_ERROR = 0.1106
EOC_THRESHOLD = 0.80
COC_TOP5_HIT = 1 - 0.0449
COC_FALSE_HIT = 0.01

EOC_SERVICE_MS = 44.0
COC_SERVICE_MS = 32.3

POS_A, POS_B = 2.0, 1.0
NEG_B = 0.6

CROP_MEDIAN_BYTES = 40_000
CROP_SIGMA_LOG = 0.5
CROP_CAP_BYTES = 200_000
CROPS_PER_SAMPLE = 0.4

RESULT_BYTES = 128


def eoc_error(neg_a: float, pos_a: float = POS_A, pos_b: float = POS_B, neg_b: float = NEG_B,
              p_pos: float = P_POSITIVE, threshold: float = EOC_THRESHOLD) -> float:
    """Misclassification rate of "positive iff c > threshold" under the crop mix."""
    missed = betainc(pos_a, pos_b, threshold)
    false_alarm = 1.0 - betainc(neg_a, neg_b, threshold)
    return p_pos * missed + (1 - p_pos) * false_alarm


@lru_cache(maxsize=None)
def calibrate_negative_a(target: float = EOC_TARGET_ERROR) -> float:
    return float(brentq(lambda a: eoc_error(a) - target, 1e-3, 50.0, xtol=1e-12))


@dataclass(frozen=True)
class ConfidenceLaw:
    pos_a: float = POS_A
    pos_b: float = POS_B
    neg_a: float = field(default_factory=calibrate_negative_a)
    neg_b: float = NEG_B

    def cdf(self, positive: bool, x: float) -> float:
        a, b = (self.pos_a, self.pos_b) if positive else (self.neg_a, self.neg_b)
        return float(betainc(a, b, x))

    def band_mass(self, lo: float, hi: float, p_pos: float = P_POSITIVE) -> float:
        """Probability that a crop's confidence falls in [lo, hi] (the upload band)."""
        pos = self.cdf(True, hi) - self.cdf(True, lo)
        neg = self.cdf(False, hi) - self.cdf(False, lo)
        return p_pos * pos + (1 - p_pos) * neg

    def draw(self, rng: np.random.Generator, positive: bool) -> float:
        if positive:
            return float(rng.beta(self.pos_a, self.pos_b))
        return float(rng.beta(self.neg_a, self.neg_b))


def _unit(seed: int, crop_id: str) -> float:
    h = hashlib.blake2b(f"{seed}:{crop_id}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "big") / 2**64


def coc_verdict(seed: int, crop_id: str, true_positive: bool) -> bool:
    """Does the cloud classifier's top-5 contain the target label?"""
    u = _unit(seed, crop_id)
    return u < (COC_TOP5_HIT if true_positive else COC_FALSE_HIT)


# The oracle is the cloud verdict itself.
coc_oracle = coc_verdict


@dataclass
class Crop:
    crop_id: str
    source: str
    true_positive: bool
    size: int
    confidence: float
    t_extracted: int
    t_od_sent: Optional[int] = None
    t_sent_coc: Optional[int] = None
    t_labeled: Optional[int] = None
    predicted: Optional[bool] = None
    decision: Optional[str] = None  # positive | drop | upload | direct
    path: list[str] = field(default_factory=list)

    def label(self, predicted: bool, now: int, where: str) -> None:
        self.predicted = predicted
        self.t_labeled = now
        self.path.append(where)

    @property
    def eil_us(self) -> Optional[int]:
        if self.t_labeled is None or self.t_od_sent is None:
            return None
        return self.t_labeled - self.t_od_sent

    def item(self) -> dict:
        """Fields a filter predicate may look at."""
        return {"size": self.size, "source": self.source, "crop_id": self.crop_id}

    def to_dict(self) -> dict:
        return {
            "crop_id": self.crop_id,
            "source": self.source,
            "true_positive": self.true_positive,
            "size": self.size,
            "confidence": round(self.confidence, 6),
            "t_extracted": self.t_extracted,
            "t_od_sent": self.t_od_sent,
            "t_sent_coc": self.t_sent_coc,
            "t_labeled": self.t_labeled,
            "predicted": self.predicted,
            "decision": self.decision,
            "path": self.path,
        }


class CropSource:
    """Per-camera crop generator; deterministic given its numpy generator."""

    def __init__(self, source: str, rng: np.random.Generator, law: ConfidenceLaw,
                 crops_per_sample: float = CROPS_PER_SAMPLE, p_pos: float = P_POSITIVE):
        self.source = source
        self.rng = rng
        self.law = law
        self.lam = crops_per_sample
        self.p_pos = p_pos
        self.count = 0

    def sample(self, now: int) -> list[Crop]:
        return self.crops(int(self.rng.poisson(self.lam)), now)

    def counts(self, n: int) -> np.ndarray:
        """Crop counts for the next ``n`` sampling events, drawn in one go."""
        return self.rng.poisson(self.lam, n)

    def crops(self, k: int, now: int) -> list[Crop]:
        rng = self.rng
        out = []
        for _ in range(k):
            positive = bool(rng.random() < self.p_pos)
            size = int(min(CROP_CAP_BYTES, CROP_MEDIAN_BYTES * np.exp(rng.normal(0.0, CROP_SIGMA_LOG))))
            conf = self.law.draw(rng, positive)
            out.append(Crop(f"{self.source}/{self.count}", self.source, positive, size, conf, now))
            self.count += 1
        return out


def sampling_events(interval_s: float, duration_s: float) -> int:
    return int(round(duration_s / interval_s))


def generate_crops(source: str, interval_s: float, duration_s: float, rng: np.random.Generator,
                   law: Optional[ConfidenceLaw] = None, crops_per_sample: float = CROPS_PER_SAMPLE) -> list[Crop]:
    """Whole stream for one camera, sampled at 0, interval, 2*interval, ..."""
    if not 0.1 - 1e-9 <= interval_s <= 0.5 + 1e-9:
        raise ValueError("interval must be within [0.1, 0.5] s")
    if duration_s > 300:
        raise ValueError("duration is capped at 300 s")
    src = CropSource(source, rng, law or ConfidenceLaw(), crops_per_sample)
    out = []
    for i in range(sampling_events(interval_s, duration_s)):
        out += src.sample(int(round(i * interval_s * 1_000_000)))
    return out


class ClassifierModel:
    """Single-server FIFO queue with a fixed service time."""

    def __init__(self, sim, kind: str, service_ms: float, on_done):
        from ..simnet import ms

        self.sim = sim
        self.kind = kind
        self.service_ms = service_ms
        self.service_us = ms(service_ms)
        self.on_done = on_done
        self.queue: list = []
        self._head = 0
        self.busy = False
        self.busy_us = 0
        self.served = 0

    @property
    def queue_len(self) -> int:
        return len(self.queue) - self._head

    def submit(self, item) -> None:
        self.queue.append(item)
        if not self.busy:
            self._next()

    def _next(self) -> None:
        if self._head >= len(self.queue):
            self.busy = False
            self.queue.clear()
            self._head = 0
            return
        item = self.queue[self._head]
        self._head += 1
        self.busy = True
        self.busy_us += self.service_us
        self.sim.after(self.service_us, self._finish, item)

    def _finish(self, item) -> None:
        self.served += 1
        self.on_done(item)
        self._next()

"""Routing and threshold policies for the query pipeline.

All functions here are pure: (estimates, thresholds, sample) -> decision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ..inapp import Ewma

POSITIVE = "positive"
DROP = "drop"
UPLOAD = "upload"

EOC = "EOC"
COC = "COC"

NOMINAL_LO = 0.10
NOMINAL_HI = 0.80
MIN_BAND = 0.10
DEFAULT_STEP = 0.05
DEFAULT_TARGET_MS = 300.0
DEFAULT_ALPHA = 0.2
SHRINK_MODES = ("band", "low")


@dataclass(frozen=True)
class PolicyThresholds:
    theta_lo: float = NOMINAL_LO
    theta_hi: float = NOMINAL_HI

    def __post_init__(self):
        if not 0.0 <= self.theta_lo <= self.theta_hi <= 1.0:
            raise ValueError(f"bad thresholds ({self.theta_lo}, {self.theta_hi})")

    @property
    def band(self) -> float:
        return self.theta_hi - self.theta_lo


def bp_route(confidence: float, thresholds: PolicyThresholds = PolicyThresholds()) -> str:
    """Strict at both ends; confidences exactly on a threshold are uploaded."""
    if not 0.0 <= confidence <= 1.0:
        raise ValueError("confidence must be in [0, 1]")
    if confidence > thresholds.theta_hi:
        return POSITIVE
    if confidence < thresholds.theta_lo:
        return DROP
    return UPLOAD


def ap_route(eil_eoc: float, eil_coc: float) -> str:
    """Send to the side with the lower estimated latency; ties stay at the edge."""
    return COC if eil_coc < eil_eoc else EOC


class EilEstimator(Ewma):
    """EWMA of end-to-end latency samples for one target (``EOC@<ec>`` or ``COC``)."""

    def __init__(self, target: str, alpha: float = DEFAULT_ALPHA, prior: Optional[float] = None):
        super().__init__(alpha, prior)
        self.target = target

    @property
    def ewma(self) -> float:
        est = self.estimate
        return 0.0 if est is None else est


def update_eil(estimator: EilEstimator, sample: float) -> EilEstimator:
    estimator.update(sample)
    return estimator


def adapt_thresholds(thresholds: PolicyThresholds, eil_eoc: float, eil_coc: float,
                     target: float = DEFAULT_TARGET_MS, step: float = DEFAULT_STEP,
                     coc_target: Optional[float] = None, shrink: str = "band") -> PolicyThresholds:
    """Shrink the upload band while either side is slower than its target;
    otherwise step back toward the nominal band.

    ``target`` applies to both sides unless ``coc_target`` is given.
    ``shrink="band"`` moves both thresholds inward; ``shrink="low"`` only
    raises ``theta_lo``.
    """
    if shrink not in SHRINK_MODES:
        raise ValueError(f"unknown shrink mode {shrink!r}")
    lo, hi = thresholds.theta_lo, thresholds.theta_hi
    coc_target = target if coc_target is None else coc_target
    if eil_eoc > target or eil_coc > coc_target:
        room = max(0.0, (hi - lo) - MIN_BAND)
        if shrink == "low":
            lo = lo + min(step, room)
        else:
            shift = min(step, room / 2)
            lo, hi = lo + shift, hi - shift
    else:
        # widen only; a band already wider than nominal is left alone
        lo = min(lo, max(NOMINAL_LO, lo - step))
        hi = max(hi, min(NOMINAL_HI, hi + step))
    return PolicyThresholds(round(lo, 10), round(hi, 10))

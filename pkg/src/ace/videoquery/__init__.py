"""Video query reference application: crops, classifiers, policies, harness."""

from . import components  # noqa: F401  (registers images)
from .experiment import MetricsReport, compute_metrics, f1_score, run_experiment, simulate
from .models import ConfidenceLaw, Crop, coc_oracle, coc_verdict, generate_crops
from .policies import PolicyThresholds, adapt_thresholds, ap_route, bp_route, update_eil
from .topologies import PARADIGMS, video_query_topology

__all__ = [
    "MetricsReport", "compute_metrics", "f1_score", "run_experiment", "simulate",
    "ConfidenceLaw", "Crop", "coc_oracle", "coc_verdict", "generate_crops",
    "PolicyThresholds", "adapt_thresholds", "ap_route", "bp_route", "update_eil",
    "PARADIGMS", "video_query_topology",
]

"""Trace-driven simulation: workloads, upstream churn and the service loop."""

from .engine import ChurnReport, SimConfig, SimReport, run_churn, run_sim, synthetic_universe
from .trace import Trace, TraceEvent, gen_trace, harmonic, load_trace, write_trace
from .upstream import ChurnModel, Upstream, churn_step

__all__ = [
    "ChurnModel", "ChurnReport", "SimConfig", "SimReport", "Trace", "TraceEvent", "Upstream",
    "churn_step", "gen_trace", "harmonic", "load_trace", "run_churn", "run_sim",
    "synthetic_universe", "write_trace",
]

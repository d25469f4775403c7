"""On-demand orchestration of network hosts backed by short-lived function instances."""
from .config import Config, load_config, parse_config
from .lifecycle import HostRecord, HostState, admit_connection, apply_event
from .metrics import MetricsReport, compute_metrics
from .orchestrator import Backend, Orchestrator
from .sim import Simulator, load_scenario, parse_scenario, run_scenario
from .trace import TraceRecord, TraceSink, parse_trace, read_trace

__version__ = "0.1.0"

__all__ = [
    "Backend", "Config", "HostRecord", "HostState", "MetricsReport", "Orchestrator",
    "Simulator", "TraceRecord", "TraceSink", "admit_connection", "apply_event",
    "compute_metrics", "load_config", "load_scenario", "parse_config", "parse_scenario",
    "parse_trace", "read_trace", "run_scenario",
]

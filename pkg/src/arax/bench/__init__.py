from .runner import BenchHarness, Metrics, run_workload
from .workload import InstanceSpec, WorkloadSpec, scenario, SCENARIOS
from .report import report, parse_metrics

__all__ = [
    "BenchHarness",
    "Metrics",
    "run_workload",
    "InstanceSpec",
    "WorkloadSpec",
    "scenario",
    "SCENARIOS",
    "report",
    "parse_metrics",
]

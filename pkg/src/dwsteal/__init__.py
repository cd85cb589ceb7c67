"""A small task-based dataflow runtime with distributed work stealing."""

from .config import RunConfig, ThiefPolicy, VictimKind
from .harness import RunResult, audit, run, run_inproc, run_socket
from .scheduler import SchedulerPolicyId
from .taskgraph import DataItem, TaskGraphProgram, TaskKey, TaskTemplate

__all__ = [
    "DataItem", "RunConfig", "RunResult", "SchedulerPolicyId", "TaskGraphProgram", "TaskKey",
    "TaskTemplate", "ThiefPolicy", "VictimKind", "audit", "run", "run_inproc", "run_socket",
]

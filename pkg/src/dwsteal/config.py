from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, replace

from .scheduler import SchedulerPolicyId


class ThiefPolicy(enum.Enum):
    READY_ONLY = "ready"
    READY_PLUS_SUCCESSORS = "ready+succ"


class VictimKind(enum.Enum):
    SINGLE = "single"
    CHUNK = "chunk"
    HALF = "half"


@dataclass(frozen=True)
class RunConfig:
    """Everything a node needs to know about a run besides the program.

    Durations are in seconds.
    """

    nodes: int = 1
    workers: int = 2
    scheduler: SchedulerPolicyId = SchedulerPolicyId.TWO_Q
    steal: bool = True
    thief_policy: ThiefPolicy = ThiefPolicy.READY_PLUS_SUCCESSORS
    victim_policy: VictimKind = VictimKind.SINGLE
    chunk_size: int | None = None
    waiting_time_gate: bool = True
    seed: int = 0
    task_delay: float = 0.0
    interval_ms: float = 10_000.0
    worker_backoff: float = 1e-3
    poll_interval: float = 200e-6
    migration_prior: float = 1e-3
    ewma_alpha: float = 0.25
    timeout: float = 60.0

    def __post_init__(self):
        for name, typ in (("scheduler", SchedulerPolicyId), ("thief_policy", ThiefPolicy),
                          ("victim_policy", VictimKind)):
            val = getattr(self, name)
            if not isinstance(val, typ):
                object.__setattr__(self, name, typ(val))
        if self.nodes < 1 or self.workers < 1:
            raise ValueError("nodes and workers must be >= 1")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")

    @property
    def effective_chunk(self) -> int:
        if self.victim_policy is VictimKind.SINGLE:
            return 1
        if self.chunk_size is not None:
            return self.chunk_size
        return max(1, self.workers // 2)

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, enum.Enum):
                d[k] = v.value
        return d

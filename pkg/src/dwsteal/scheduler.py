"""Per-node ready-task storage: absolute priority (AP) and two-queue (2Q)."""

from __future__ import annotations

import collections
import enum
import heapq
import threading
from dataclasses import dataclass

from .taskgraph import TaskInstance, TaskState


class SchedulerPolicyId(enum.Enum):
    AP = "ap"
    TWO_Q = "2q"


class Origin(enum.Enum):
    LOCAL_ACTIVATION = "local"
    STOLEN_ARRIVAL = "stolen"
    RESCHEDULE = "reschedule"


@dataclass
class ReadyQueueStats:
    ready_count: int = 0
    stealable_count: int = 0
    scheduled_total: int = 0
    rescheduled_total: int = 0


def _order(task: TaskInstance):
    # heapq is a min-heap: highest priority first, then smallest key
    return (-task.priority, task.key)


class Scheduler:
    """Common bookkeeping; subclasses own the storage.

    ``on_insert``/``on_select`` hooks let the runtime observe operations
    while the scheduler lock is held (used for event logging and polling).
    """

    policy: SchedulerPolicyId

    def __init__(self, on_insert=None, on_select=None):
        self._lock = threading.Lock()
        self.stats = ReadyQueueStats()
        self._on_insert = on_insert
        self._on_select = on_select

    @property
    def ready_count(self) -> int:
        return self.stats.ready_count

    @property
    def stealable_count(self) -> int:
        return self.stats.stealable_count

    def __len__(self):
        return self.stats.ready_count

    def insert(self, task: TaskInstance, origin: Origin = Origin.LOCAL_ACTIVATION):
        if task.state != TaskState.READY:
            raise ValueError(f"insert of {task.key} in state {task.state.value}")
        if task.stealable is None:
            raise ValueError(f"insert of {task.key} before its stealable flag is known")
        with self._lock:
            self._push(task)
            self._account_insert(task, origin)

    def _account_insert(self, task, origin):
        st = self.stats
        st.ready_count += 1
        st.stealable_count += task.stealable
        st.scheduled_total += 1
        if origin is Origin.RESCHEDULE:
            st.rescheduled_total += 1
        if self._on_insert is not None:
            self._on_insert(task, origin)

    def _account_remove(self, task):
        self.stats.ready_count -= 1
        self.stats.stealable_count -= task.stealable

    def select(self, worker_id: int = 0) -> TaskInstance | None:
        """Pop the next task for a worker, or None when empty.

        A successful select polls the remaining ready count (after removal).
        """
        with self._lock:
            task = self._pop_for_worker()
            if task is None:
                return None
            self._account_remove(task)
            if self._on_select is not None:
                self._on_select(task, worker_id, self.stats.ready_count)
            return task

    def extract_for_steal(self, max_n: int) -> list[TaskInstance]:
        raise NotImplementedError

    def _push(self, task):
        raise NotImplementedError

    def _pop_for_worker(self):
        raise NotImplementedError


class APScheduler(Scheduler):
    """One node-wide strict priority heap ordered by (priority, key)."""

    policy = SchedulerPolicyId.AP

    def __init__(self, **kw):
        super().__init__(**kw)
        self._heap: list = []

    def _push(self, task):
        heapq.heappush(self._heap, (_order(task), task))

    def _pop_for_worker(self):
        if not self._heap:
            return None
        return heapq.heappop(self._heap)[1]

    def extract_for_steal(self, max_n: int) -> list[TaskInstance]:
        """Perform up to ``max_n`` pops, keeping stealable tasks.

        Each popped non-stealable task is pushed straight back and counted as
        rescheduled, so it is seen again by the next pop when it still has
        the highest priority.  Locks are released between pops so workers
        compete with the extraction.
        """
        if max_n < 1:
            raise ValueError("max_n must be >= 1")
        taken = []
        for _ in range(max_n):
            with self._lock:
                if not self._heap:
                    break
                task = heapq.heappop(self._heap)[1]
                self._account_remove(task)
                if task.stealable:
                    taken.append(task)
                    continue
                self._push(task)
                self._account_insert(task, Origin.RESCHEDULE)
        return taken


class TwoQueueScheduler(Scheduler):
    """Priority-ordered front queue for pinned tasks, FIFO back queue for
    stealable ones.  Workers drain the front queue first."""

    policy = SchedulerPolicyId.TWO_Q

    def __init__(self, **kw):
        super().__init__(**kw)
        self._front: list = []
        self._back: collections.deque = collections.deque()

    def _push(self, task):
        if task.stealable:
            self._back.append(task)
        else:
            heapq.heappush(self._front, (_order(task), task))

    def _pop_for_worker(self):
        if self._front:
            return heapq.heappop(self._front)[1]
        if self._back:
            return self._back.popleft()
        return None

    def extract_for_steal(self, max_n: int) -> list[TaskInstance]:
        if max_n < 1:
            raise ValueError("max_n must be >= 1")
        with self._lock:
            n = min(max_n, len(self._back))
            # detach from the tail: the head is what workers will reach next
            taken = [self._back.pop() for _ in range(n)]
            taken.reverse()
            for task in taken:
                self._account_remove(task)
        return taken


def make_scheduler(policy, **kw) -> Scheduler:
    policy = SchedulerPolicyId(policy) if not isinstance(policy, SchedulerPolicyId) else policy
    if policy is SchedulerPolicyId.AP:
        return APScheduler(**kw)
    return TwoQueueScheduler(**kw)

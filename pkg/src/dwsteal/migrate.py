"""Migration agent: starvation detection, victim selection, steal-request
handling under the victim policies, and recreation of stolen tasks."""

from __future__ import annotations

import logging
import math
import queue
import random
import threading
from dataclasses import dataclass, field

from . import metrics as ev
from .config import ThiefPolicy, VictimKind
from .scheduler import Origin
from .taskgraph import TaskInstance, TaskState, WiringError
from .transport import Kind, Message, PeerDown, TaskRecord

log = logging.getLogger(__name__)

NO_ESTIMATE = math.inf


class DuplicateKey(WiringError):
    pass


def detect_starvation(policy: ThiefPolicy, ready_count: int, in_exec_successors: int) -> bool:
    if ready_count > 0:
        return False
    if policy is ThiefPolicy.READY_PLUS_SUCCESSORS:
        return in_exec_successors == 0
    return True


def victim_bound(kind: VictimKind, stealable: int, chunk_size: int = 1) -> int:
    """Upper bound on tasks one request may take."""
    if kind is VictimKind.HALF:
        return (stealable + 1) // 2
    if kind is VictimKind.CHUNK:
        return chunk_size
    return 1


def waiting_time(ready_count: int, workers: int, elapsed: float, tasks_executed: int) -> float:
    """Expected time a newly queued task waits for a worker."""
    if tasks_executed <= 0:
        return NO_ESTIMATE
    return (ready_count / workers + 1) * (elapsed / tasks_executed)


def gate_permits(migration_cost: float, wait: float) -> bool:
    if wait == NO_ESTIMATE:
        return True
    return migration_cost < wait


class MigrationCostModel:
    """EWMA of observed per-task migration time, starting from a prior."""

    def __init__(self, prior: float = 1e-3, alpha: float = 0.25):
        if prior <= 0:
            raise ValueError("prior must be positive")
        self.prior = prior
        self.alpha = alpha
        self.samples = 0
        self._value = prior

    @property
    def estimate(self) -> float:
        return self._value

    def observe(self, duration: float, n_tasks: int) -> float:
        if n_tasks < 1:
            return self._value
        # floor keeps the estimate strictly positive on coarse clocks
        sample = max(duration / n_tasks, 1e-9)
        if self.samples == 0:
            self._value = sample
        else:
            self._value = self.alpha * sample + (1 - self.alpha) * self._value
        self.samples += 1
        return self._value


@dataclass
class StealLedger:
    requests_sent: int = 0
    requests_granted: int = 0
    requests_denied: int = 0
    tasks_stolen_in: int = 0
    tasks_stolen_out: int = 0
    grants_given: int = 0
    denies_given: int = 0
    outstanding: int | None = None
    outcomes: list = field(default_factory=list)

    @property
    def steal_success_pct(self) -> float:
        return 100.0 * self.requests_granted / self.requests_sent if self.requests_sent else 0.0


class MigrationAgent:
    """The per-node thread doing all stealing work.

    Steal requests reach it through ``requests``; grants and denies are
    resolved on the communication agent via :meth:`on_grant` and
    :meth:`on_deny`.
    """

    def __init__(self, node):
        self.node = node
        cfg = node.config
        self.config = cfg
        self.ledger = StealLedger()
        self.cost = MigrationCostModel(cfg.migration_prior, cfg.ewma_alpha)
        self.rng = random.Random(cfg.seed * 1_000_003 + node.rank)
        self.requests: queue.Queue = queue.Queue()
        self._next_id = 0
        self._sent_at: dict[int, int] = {}
        self._lock = threading.Lock()
        self.thread = threading.Thread(target=self.run, name=f"migrate-{node.rank}", daemon=True)

    # thief side

    def pick_victim(self) -> int:
        n_nodes, me = self.node.n_nodes, self.node.rank
        v = self.rng.randrange(n_nodes - 1)
        return v + 1 if v >= me else v

    def starving(self) -> bool:
        return detect_starvation(self.config.thief_policy, self.node.scheduler.ready_count,
                                 self.node.in_exec_successors)

    def maybe_steal(self) -> bool:
        node = self.node
        if node.n_nodes < 2 or not self.config.steal or node.stopping.is_set():
            return False
        with self._lock:
            if self.ledger.outstanding is not None or not self.starving():
                return False
            self._next_id += 1
            rid = self._next_id
            self.ledger.outstanding = rid
            self.ledger.requests_sent += 1
        victim = self.pick_victim()
        self._sent_at[rid] = node.events.now()
        node.events.record(ev.STEAL_SENT, victim=victim, request_id=rid)
        try:
            node.send(Message.steal_request(node.rank, victim, rid))
        except PeerDown:
            if not node.stopping.is_set():
                raise
        return True

    def on_grant(self, msg: Message):
        node = self.node
        n = self.recreate_stolen(msg)
        took = node.events.now() - self._sent_at.pop(msg.request_id, node.events.now())
        self.cost.observe(took / 1e9, n)
        node.events.record(ev.GRANT_RECV, src=msg.src, request_id=msg.request_id, count=n,
                           cost_estimate=self.cost.estimate)
        self._resolve(msg.request_id, n)

    def on_deny(self, msg: Message):
        self._sent_at.pop(msg.request_id, None)
        self.node.events.record(ev.DENY_RECV, src=msg.src, request_id=msg.request_id)
        self._resolve(msg.request_id, 0)

    def _resolve(self, rid, n):
        with self._lock:
            if self.ledger.outstanding != rid:
                raise WiringError(f"rank {self.node.rank}: reply to request {rid} "
                                  f"but {self.ledger.outstanding} is outstanding")
            if n:
                self.ledger.requests_granted += 1
            else:
                self.ledger.requests_denied += 1
            self.ledger.outcomes.append((rid, n))
            self.ledger.outstanding = None

    def recreate_stolen(self, msg: Message) -> int:
        node = self.node
        for rec in msg.tasks:
            tmpl = node.program.template(rec.key.template_id)
            if len(rec.inputs) != tmpl.arity_in or any(x is None for x in rec.inputs):
                raise WiringError(f"grant record {rec.key} lacks inputs")
            task = TaskInstance(rec.key, tmpl.arity_in, priority=rec.priority,
                                inputs=list(rec.inputs))
            node.adopt(task, src=msg.src)
        self.ledger.tasks_stolen_in += len(msg.tasks)
        return len(msg.tasks)

    # victim side

    def bound_for(self, stealable: int) -> int:
        return victim_bound(self.config.victim_policy, stealable, self.config.effective_chunk)

    def handle_steal_request(self, msg: Message) -> Message:
        node = self.node
        cfg = self.config
        stealable = node.scheduler.stealable_count
        bound = self.bound_for(stealable)
        wait = node.waiting_time_estimate()
        cost = self.cost.estimate
        permitted = (not cfg.waiting_time_gate) or gate_permits(cost, wait)
        tasks: list[TaskInstance] = []
        if permitted and bound > 0:
            tasks = node.scheduler.extract_for_steal(bound)
        if not tasks:
            reply = Message.steal_deny(node.rank, msg.thief, msg.request_id)
            node.events.record(ev.DENY_SENT, thief=msg.thief, request_id=msg.request_id,
                               stealable=stealable, bound=bound, permitted=permitted,
                               cost_estimate=cost, wait_estimate=_finite(wait))
            self.ledger.denies_given += 1
            node.send(reply)
            return reply
        records = []
        for t in tasks:
            t.state = TaskState.MIGRATED
            records.append(TaskRecord(t.key, t.priority, tuple(t.inputs)))
        reply = Message.steal_grant(node.rank, msg.thief, msg.request_id, records)
        node.events.record(ev.GRANT_SENT, thief=msg.thief, request_id=msg.request_id,
                           count=len(tasks), stealable=stealable, bound=bound,
                           policy=cfg.victim_policy.value, gate=cfg.waiting_time_gate,
                           cost_estimate=cost, wait_estimate=_finite(wait))
        self.ledger.grants_given += 1
        self.ledger.tasks_stolen_out += len(tasks)
        node.send(reply)
        node.release_migrated(tasks, thief=msg.thief)
        return reply

    # agent loop

    def start(self):
        self.thread.start()

    def run(self):
        node = self.node
        try:
            while not node.stopping.is_set():
                try:
                    msg = self.requests.get(timeout=self.config.poll_interval)
                except queue.Empty:
                    self.maybe_steal()
                    continue
                if msg.kind == Kind.STEAL_REQUEST:
                    self.handle_steal_request(msg)
                self.maybe_steal()
        except PeerDown:
            if not node.stopping.is_set():
                node.fail(f"migration agent on rank {node.rank}: peer down")
        except BaseException as exc:  # noqa: BLE001
            node.fail(f"migration agent on rank {node.rank}: {exc!r}", exc)


def _finite(x: float):
    return None if math.isinf(x) else x

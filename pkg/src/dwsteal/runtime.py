"""Per-node engine.

Each :class:`NodeRuntime` owns a pool of worker threads, one communication agent
and one migration agent.  Distributed termination uses Safra's token
algorithm over the basic (work-carrying) messages ACTIVATE and
STEAL_GRANT.  A node counts as passive when it holds no READY or
EXECUTING task and has no unanswered steal request.
"""

from __future__ import annotations

import logging
import threading
import time

from . import metrics as ev
from .config import RunConfig
from .migrate import NO_ESTIMATE, MigrationAgent, waiting_time
from .scheduler import Origin, make_scheduler
from .taskgraph import (
    NOW_READY,
    TaskGraphProgram,
    TaskInstance,
    TaskKey,
    TaskState,
    WiringError,
    evaluate_stealable,
    route_outputs,
)
from .transport import BLACK, TERMINATE, WHITE, Endpoint, Kind, Message, PeerDown

log = logging.getLogger(__name__)


class RunAborted(RuntimeError):
    pass


class _Counter:
    def __init__(self):
        self._v = 0
        self._lock = threading.Lock()

    def add(self, d: int) -> int:
        with self._lock:
            self._v += d
            return self._v

    @property
    def value(self) -> int:
        return self._v


class NodeRuntime:
    def __init__(self, rank: int, program: TaskGraphProgram, endpoint: Endpoint,
                 config: RunConfig, origin_ns: int | None = None):
        self.rank = rank
        self.n_nodes = config.nodes
        self.n_workers = config.workers
        self.program = program
        self.endpoint = endpoint
        self.config = config
        self.events = ev.EventLog(rank, origin_ns)
        self.scheduler = make_scheduler(config.scheduler, on_insert=self._on_insert,
                                        on_select=self._on_select)
        self._work = threading.Condition()
        self._instances: dict[TaskKey, TaskInstance] = {}
        self._inst_lock = threading.Lock()
        self.results: dict = {}
        self.live = _Counter()
        self._succ = _Counter()
        self._exec_lock = threading.Lock()
        self.tasks_executed = 0
        self._first_exec: float | None = None
        self.done_keys: list[TaskKey] = []
        self.stopping = threading.Event()
        self.error: str | None = None
        self.exc: BaseException | None = None
        # Safra state
        self.msg_balance = 0
        self.color = WHITE
        self._token: Message | None = None
        self._round_active = False
        self.safra_rounds = 0
        self.terminated_at_ns: int | None = None
        self.migration = MigrationAgent(self)
        self._workers = [threading.Thread(target=self.worker_loop, args=(wid,), daemon=True,
                                          name=f"worker-{rank}.{wid}") for wid in range(self.n_workers)]
        self._comm = threading.Thread(target=self.comm_loop, daemon=True, name=f"comm-{rank}")
        self.successor_trace: list | None = None

    # counters read by the migration agent

    @property
    def in_exec_successors(self) -> int:
        return self._succ.value

    def exec_stats(self) -> tuple[int, float]:
        with self._exec_lock:
            if self._first_exec is None:
                return 0, 0.0
            return self.tasks_executed, time.perf_counter() - self._first_exec

    def waiting_time_estimate(self) -> float:
        n, elapsed = self.exec_stats()
        if n == 0:
            return NO_ESTIMATE
        return waiting_time(self.scheduler.ready_count, self.n_workers, elapsed, n)

    def passive(self) -> bool:
        return self.live.value == 0 and self.migration.ledger.outstanding is None

    # scheduler hooks (called under the scheduler lock)

    def _on_insert(self, task, origin):
        self.events.record(ev.INSERT, task.key, origin=origin.value, stealable=task.stealable)

    def _on_select(self, task, worker_id, ready_after):
        self.events.record(ev.SELECT, task.key, worker=worker_id, ready=ready_after)

    # activation path

    def seed(self):
        for key, slot, item in self.program.initial_tasks(self.rank, self.n_nodes):
            if self.program.home_node(key, self.n_nodes) != self.rank:
                raise WiringError(f"rank {self.rank} seeded {key} homed elsewhere")
            self.on_activate(key, slot, item)

    def on_activate(self, key: TaskKey, slot: int, item):
        with self._inst_lock:
            task = self._instances.get(key)
            if task is None:
                task = self.program.new_instance(key)
                self._instances[key] = task
                self.events.record(ev.CREATE, key)
        if task.fill_input(slot, item) is NOW_READY:
            self._make_ready(task, Origin.LOCAL_ACTIVATION)

    def _make_ready(self, task: TaskInstance, origin: Origin):
        evaluate_stealable(self.program.template(task.key.template_id), task)
        self.live.add(1)
        self.scheduler.insert(task, origin)
        with self._work:
            self._work.notify()

    def adopt(self, task: TaskInstance, src: int):
        """Insert a task recreated from a steal grant."""
        with self._inst_lock:
            old = self._instances.get(task.key)
            if old is not None and old.state not in (TaskState.DONE, TaskState.MIGRATED):
                from .migrate import DuplicateKey
                raise DuplicateKey(f"rank {self.rank}: stolen key {task.key} already live here")
            self._instances[task.key] = task
        self.events.record(ev.STOLEN_IN, task.key, src=src)
        self._make_ready(task, Origin.STOLEN_ARRIVAL)

    def release_migrated(self, tasks, thief: int):
        for t in tasks:
            self.events.record(ev.MIGRATED, t.key, thief=thief)
        self.live.add(-len(tasks))

    # workers

    def worker_loop(self, worker_id: int):
        try:
            while not self.stopping.is_set():
                task = self.scheduler.select(worker_id)
                if task is None:
                    with self._work:
                        self._work.wait(self.config.worker_backoff)
                    continue
                self.execute(task, worker_id)
        except BaseException as exc:  # noqa: BLE001
            self.fail(f"worker {worker_id} on rank {self.rank}: {exc!r}", exc)

    def execute(self, task: TaskInstance, worker_id: int = 0):
        tmpl = self.program.template(task.key.template_id)
        if task.state is not TaskState.READY:
            raise WiringError(f"task {task.key} selected in state {task.state.value}")
        task.state = TaskState.EXECUTING
        est = tmpl.local_successors(task.key, self.n_nodes)
        after = self._succ.add(est)
        if self.successor_trace is not None:
            self.successor_trace.append((task.key, est, after))
        with self._exec_lock:
            if self._first_exec is None:
                self._first_exec = time.perf_counter()
        self.events.record(ev.EXEC, task.key, worker=worker_id)
        try:
            outputs = tmpl.body(tuple(task.inputs), task.key)
        except Exception as exc:
            raise RuntimeError(f"body of task {task.key} failed: {exc!r}") from exc
        if self.config.task_delay > 0:
            weight = tmpl.cost_weight(tuple(task.inputs), task.key) if tmpl.cost_weight else 1.0
            if weight > 0:
                time.sleep(self.config.task_delay * weight)
        for out in outputs:
            if out.key is None:
                self.results[(task.key, out.slot)] = out.item
        for route in route_outputs(self.program, outputs, self.n_nodes):
            if route.dest == self.rank:
                self.on_activate(route.key, route.slot, route.item)
            else:
                self.send(Message.activate(self.rank, route.dest, route.key, route.slot, route.item))
        after = self._succ.add(-est)
        if self.successor_trace is not None:
            self.successor_trace.append((task.key, -est, after))
        task.state = TaskState.DONE
        task.inputs = [None] * task.arity_in
        self.events.record(ev.DONE, task.key, worker=worker_id)
        self.done_keys.append(task.key)
        with self._exec_lock:
            self.tasks_executed += 1
        self.live.add(-1)

    # messaging

    def send(self, msg: Message):
        if msg.is_basic:
            with self._exec_lock:
                self.msg_balance += 1
        self.endpoint.send(msg)

    def _dispatch(self, msg: Message):
        if msg.is_basic:
            with self._exec_lock:
                self.msg_balance -= 1
            self.color = BLACK
        if msg.kind == Kind.ACTIVATE:
            self.on_activate(msg.key, msg.slot, msg.item)
        elif msg.kind == Kind.STEAL_REQUEST:
            self.migration.requests.put(msg)
        elif msg.kind == Kind.STEAL_GRANT:
            self.migration.on_grant(msg)
        elif msg.kind == Kind.STEAL_DENY:
            self.migration.on_deny(msg)
        elif msg.kind == Kind.TERM_TOKEN:
            if msg.color == TERMINATE:
                self._shutdown()
            else:
                self._token = msg

    def _safra_step(self):
        if not self.passive():
            return
        if self.n_nodes == 1:
            self._declare_termination()
            return
        if self.rank == 0:
            tok = self._token
            if tok is not None:
                self._token = None
                self._round_active = False
                with self._exec_lock:
                    total = tok.count + self.msg_balance
                if tok.color == WHITE and self.color == WHITE and total == 0:
                    self._declare_termination()
                    return
            if not self._round_active:
                self._round_active = True
                self.safra_rounds += 1
                self.color = WHITE
                self.send(Message.token(0, 1, WHITE, 0))
        elif self._token is not None:
            tok, self._token = self._token, None
            with self._exec_lock:
                count = tok.count + self.msg_balance
            color = BLACK if self.color == BLACK else tok.color
            self.color = WHITE
            self.send(Message.token(self.rank, (self.rank + 1) % self.n_nodes, color, count))

    def _declare_termination(self):
        self.events.record(ev.TERMINATED)
        for r in range(self.n_nodes):
            if r != self.rank:
                self.send(Message.token(self.rank, r, TERMINATE, 0))
        self._shutdown()

    def _shutdown(self):
        if self.terminated_at_ns is None:
            self.terminated_at_ns = self.events.now()
        self.stopping.set()
        with self._work:
            self._work.notify_all()

    def comm_loop(self):
        try:
            while not self.stopping.is_set():
                msg = self.endpoint.recv(timeout=1e-3)
                if msg is not None:
                    self._dispatch(msg)
                self._safra_step()
        except PeerDown as exc:
            if not self.stopping.is_set():
                self.fail(f"comm agent on rank {self.rank}: {exc}", exc)
        except BaseException as exc:  # noqa: BLE001
            self.fail(f"comm agent on rank {self.rank}: {exc!r}", exc)

    # lifecycle

    def fail(self, reason: str, exc: BaseException | None = None):
        if self.error is None:
            self.error = reason
            self.exc = exc
            log.error("%s", reason)
        self._shutdown()

    def start(self):
        for t in self._workers:
            t.start()
        self.migration.start()
        self._comm.start()

    def join(self, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        for t in [self._comm, self.migration.thread, *self._workers]:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            t.join(remaining)
            if t.is_alive():
                return False
        return True

    def leftover(self) -> dict:
        """Tasks still WAITING/READY/EXECUTING after shutdown (audit)."""
        with self._inst_lock:
            out: dict = {}
            for t in self._instances.values():
                if t.state in (TaskState.WAITING, TaskState.READY, TaskState.EXECUTING):
                    out.setdefault(t.state.value, []).append(t.key)
            return out

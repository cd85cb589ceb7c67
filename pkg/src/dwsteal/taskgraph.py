"""Task templates, instances, keys and data items.

A program is a set of templates plus a seeding function; the runtime
discovers the DAG lazily as data flows along output edges.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Sequence

import numpy as np


class WiringError(RuntimeError):
    """Raised when an activation does not match the DAG wiring."""


class DoubleFill(WiringError):
    pass


class BadSlot(WiringError):
    pass


class UnknownTemplate(WiringError):
    pass


class TaskKey(NamedTuple):
    template_id: int
    index: tuple

    def __repr__(self) -> str:
        return f"{self.template_id}{self.index}"


class DataKind(enum.IntEnum):
    DENSE = 0
    SPARSE = 1
    TREE_NODE = 2
    SCALAR = 3


@dataclass(frozen=True, eq=False)
class DataItem:
    """Immutable payload travelling along one DAG edge.

    ``payload`` is a read-only float64 array for DENSE tiles, ``None`` for
    SPARSE markers and a tuple of ints for TREE_NODE/SCALAR items.
    """

    kind: DataKind
    payload: Any = None

    def __post_init__(self):
        if self.kind == DataKind.DENSE:
            arr = np.array(self.payload, dtype=np.float64, order="C", copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, "payload", arr)
        elif self.kind in (DataKind.TREE_NODE, DataKind.SCALAR):
            object.__setattr__(self, "payload", tuple(int(v) for v in self.payload))

    @classmethod
    def dense(cls, array) -> "DataItem":
        return cls(DataKind.DENSE, array)

    @classmethod
    def sparse(cls) -> "DataItem":
        return cls(DataKind.SPARSE, None)

    @property
    def is_sparse(self) -> bool:
        return self.kind == DataKind.SPARSE

    @property
    def size_bytes(self) -> int:
        if self.kind == DataKind.DENSE:
            return self.payload.nbytes
        if self.kind == DataKind.SPARSE:
            return 1
        return 8 * len(self.payload)

    def __eq__(self, other):
        if not isinstance(other, DataItem):
            return NotImplemented
        if other.kind != self.kind:
            return False
        if self.kind == DataKind.DENSE:
            return (self.payload.shape == other.payload.shape
                    and self.payload.tobytes() == other.payload.tobytes())
        return self.payload == other.payload

    def __hash__(self):
        if self.kind == DataKind.DENSE:
            return hash((self.kind, self.payload.shape, self.payload.tobytes()))
        return hash((self.kind, self.payload))


class Output(NamedTuple):
    slot: int
    key: TaskKey | None
    item: DataItem


class TaskState(enum.Enum):
    WAITING = "WAITING"
    READY = "READY"
    EXECUTING = "EXECUTING"
    DONE = "DONE"
    MIGRATED = "MIGRATED"


def _always(inputs, key) -> bool:
    return True


def _zero_priority(key) -> int:
    return 0


def _no_successors(key, n_nodes) -> int:
    return 0


@dataclass(frozen=True)
class TaskTemplate:
    """A task class.

    ``body(inputs, key)`` returns a list of :class:`Output`; an output with
    ``key=None`` is a final result kept by the executing node.
    ``is_stealable`` sees exactly what the body sees.
    ``local_successors(key, n_nodes)`` is the static estimate of how many
    successor activations stay on the task's home node.  ``cost_weight``
    scales the runtime's artificial per-task delay (0 for no-op tasks).
    """

    template_id: int
    name: str
    arity_in: int
    body: Callable[[Sequence[DataItem], TaskKey], list]
    is_stealable: Callable[[Sequence[DataItem], TaskKey], bool] = _always
    priority_fn: Callable[[TaskKey], int] = _zero_priority
    cost_class: str = ""
    local_successors: Callable[[TaskKey, int], int] = _no_successors
    cost_weight: Callable[[Sequence[DataItem], TaskKey], float] | None = None


ActivationResult = enum.Enum("ActivationResult", "NOT_READY NOW_READY")
NOT_READY = ActivationResult.NOT_READY
NOW_READY = ActivationResult.NOW_READY


@dataclass(eq=False)
class TaskInstance:
    key: TaskKey
    arity_in: int
    priority: int = 0
    inputs: list = field(default=None)
    deps_remaining: int = field(default=None)
    state: TaskState = TaskState.WAITING
    stealable: bool | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.inputs is None:
            self.inputs = [None] * self.arity_in
        if self.deps_remaining is None:
            self.deps_remaining = sum(1 for x in self.inputs if x is None)
        if self.deps_remaining == 0 and self.state == TaskState.WAITING:
            self.state = TaskState.READY

    def fill_input(self, slot: int, item: DataItem) -> ActivationResult:
        if not 0 <= slot < self.arity_in:
            raise BadSlot(f"task {self.key}: slot {slot} outside arity {self.arity_in}")
        with self._lock:
            if self.inputs[slot] is not None:
                raise DoubleFill(f"task {self.key}: slot {slot} filled twice")
            if self.state != TaskState.WAITING:
                raise WiringError(f"task {self.key}: fill in state {self.state.value}")
            self.inputs[slot] = item
            self.deps_remaining -= 1
            if self.deps_remaining == 0:
                self.state = TaskState.READY
                return NOW_READY
        return NOT_READY


def fill_input(task: TaskInstance, slot: int, item: DataItem) -> ActivationResult:
    return task.fill_input(slot, item)


def evaluate_stealable(tmpl: TaskTemplate, task: TaskInstance) -> bool:
    """Evaluate and cache the stealable predicate of a READY task."""
    if task.stealable is None:
        task.stealable = bool(tmpl.is_stealable(tuple(task.inputs), task.key))
    return task.stealable


def cyclic_home(key: TaskKey, n_nodes: int, extent: int) -> int:
    """Row-major flattening of ``key.index`` with stride ``extent``, modulo the node count."""
    flat = 0
    for i in key.index:
        flat = flat * extent + int(i)
    return flat % n_nodes


@dataclass(frozen=True)
class TaskGraphProgram:
    """Templates plus static distribution.

    ``initial_tasks(rank, n_nodes)`` returns ``(key, slot, item)`` activations
    seeded on ``rank``; ``home_node(key, n_nodes)`` must be pure.
    """

    name: str
    templates: dict
    initial_tasks: Callable[[int, int], list]
    home_node: Callable[[TaskKey, int], int]
    meta: dict = field(default_factory=dict)

    def template(self, template_id: int) -> TaskTemplate:
        try:
            return self.templates[template_id]
        except KeyError:
            raise UnknownTemplate(f"no template with id {template_id}") from None

    def new_instance(self, key: TaskKey) -> TaskInstance:
        tmpl = self.template(key.template_id)
        return TaskInstance(key, tmpl.arity_in, priority=tmpl.priority_fn(key))


class Route(NamedTuple):
    key: TaskKey
    slot: int
    item: DataItem
    dest: int


def route_outputs(program: TaskGraphProgram, outputs, n_nodes: int) -> list[Route]:
    """Annotate body outputs with destination ranks.

    Destinations depend only on the successor key, never on where the
    producing task ran.  Final results (``key is None``) are dropped.
    """
    routes = []
    for out in outputs:
        if out.key is None:
            continue
        program.template(out.key.template_id)
        routes.append(Route(out.key, out.slot, out.item, program.home_node(out.key, n_nodes)))
    return routes


def topological_order(edges, nodes=()) -> list:
    """Kahn's algorithm; raises ValueError on a cycle."""
    succ: dict = {}
    indeg: dict = {n: 0 for n in nodes}
    for a, b in edges:
        succ.setdefault(a, []).append(b)
        indeg.setdefault(a, 0)
        indeg[b] = indeg.get(b, 0) + 1
    order = []
    frontier = [n for n, d in indeg.items() if d == 0]
    while frontier:
        n = frontier.pop()
        order.append(n)
        for m in succ.get(n, ()):
            indeg[m] -= 1
            if indeg[m] == 0:
                frontier.append(m)
    if len(order) != len(indeg):
        raise ValueError("task graph contains a cycle")
    return order

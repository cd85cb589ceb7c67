"""A bag of independent tasks piled on one rank.

Used to probe scheduler behaviour under stealing: a fraction of the tasks
is pinned (not stealable) and priorities interleave pinned and stealable
tasks, so a priority-ordered extraction keeps running into pinned ones.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..taskgraph import DataItem, DataKind, Output, TaskGraphProgram, TaskKey, TaskTemplate

BAG_TASK = 20


@dataclass(frozen=True)
class BagConfig:
    n_tasks: int = 400
    pinned_fraction: float = 0.5
    home: int = 0

    def pinned(self, i: int) -> bool:
        # evenly spread: task i is pinned when it crosses a multiple of 1/fraction
        f = self.pinned_fraction
        return int((i + 1) * f) > int(i * f)


def build_bag(cfg: BagConfig) -> TaskGraphProgram:
    def body(inputs, key):
        return [Output(0, None, DataItem(DataKind.SCALAR, (key.index[0],)))]

    def is_stealable(inputs, key):
        return not cfg.pinned(key.index[0])

    def initial_tasks(rank, n_nodes):
        if rank != cfg.home % n_nodes:
            return []
        return [(TaskKey(BAG_TASK, (i,)), 0, DataItem(DataKind.SCALAR, (i,)))
                for i in range(cfg.n_tasks)]

    tmpl = TaskTemplate(BAG_TASK, "BAG", 1, body, is_stealable=is_stealable,
                        priority_fn=lambda key: cfg.n_tasks - key.index[0],
                        cost_class="BAG")
    return TaskGraphProgram("bag", {BAG_TASK: tmpl}, initial_tasks,
                            lambda key, n_nodes: cfg.home % n_nodes,
                            meta={"config": cfg,
                                  "expected_keys": [TaskKey(BAG_TASK, (i,)) for i in range(cfg.n_tasks)]})

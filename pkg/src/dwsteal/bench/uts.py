"""Unbalanced tree search.

The root has ``b0`` children; every other node fills each of ``m`` child
slots with probability ``q``.  Coin flips come from a counter-based
splitmix64 hash of (seed, node hash, slot), so the tree shape does not
depend on where or when a node is expanded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..taskgraph import DataItem, DataKind, Output, TaskGraphProgram, TaskKey, TaskTemplate

UTS_NODE = 10
MASK64 = (1 << 64) - 1
NODE_CAP = 100_000

PRESETS = {
    # full-scale reference shape, far beyond the desk node cap
    "large": dict(b0=120, m=5, q=0.200014, g=12_000_000),
    "desk": dict(b0=64, m=5, q=0.19, g=1300),
    "tiny": dict(b0=8, m=5, q=0.19, g=170),
}


class TreeTooLarge(ValueError):
    pass


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def root_hash(seed: int) -> int:
    return splitmix64(seed & MASK64) >> 1


def child_hash(h: int, slot: int) -> int:
    # 63 bits so the hash fits a signed 64-bit key field
    return splitmix64(h ^ splitmix64(slot + 1)) >> 1


def coin(seed: int, h: int, slot: int) -> float:
    return splitmix64((splitmix64((seed & MASK64) ^ h) + slot) & MASK64) / 2.0**64


@dataclass(frozen=True)
class UtsConfig:
    b0: int = 64
    m: int = 5
    q: float = 0.19
    g: int = 0
    g_mode: str = "size"
    seed: int = 0
    max_depth: int | None = None
    affinity: bool = True
    cap: int = NODE_CAP

    def __post_init__(self):
        if self.b0 < 1 or self.m < 0:
            raise ValueError("need b0 >= 1 and m >= 0")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("q must be within [0, 1]")
        if self.g_mode not in ("size", "work"):
            raise ValueError("g_mode is 'size' or 'work'")

    @classmethod
    def preset(cls, name: str, **overrides) -> "UtsConfig":
        return cls(**{**PRESETS[name], **overrides})

    @property
    def expected_size(self) -> float:
        """Expected node count for a subcritical tree (inf otherwise)."""
        mq = self.m * self.q
        if mq >= 1.0:
            return math.inf
        return 1 + self.b0 / (1 - mq)

    @property
    def work_reps(self) -> int:
        return self.g if self.g_mode == "work" else 0


def child_slots(cfg: UtsConfig, depth: int, h: int) -> list[int]:
    if depth == 0:
        return list(range(cfg.b0))
    if cfg.max_depth is not None and depth >= cfg.max_depth:
        return []
    return [j for j in range(cfg.m) if coin(cfg.seed, h, j) < cfg.q]


def count_nodes(cfg: UtsConfig, cap: int | None = None) -> int:
    """Sequential walk of the whole tree, raising past ``cap`` nodes."""
    cap = cfg.cap if cap is None else cap
    stack = [(0, root_hash(cfg.seed))]
    n = 0
    while stack:
        depth, h = stack.pop()
        n += 1
        if n > cap:
            raise TreeTooLarge(f"tree exceeds {cap} nodes")
        stack.extend((depth + 1, child_hash(h, j)) for j in child_slots(cfg, depth, h))
    return n


def _spin(h: int, reps: int) -> int:
    for _ in range(reps):
        h = splitmix64(h)
    return h


def build_uts(cfg: UtsConfig) -> TaskGraphProgram:
    """One task per tree node, key index ``(node_hash, home_hint, depth)``.

    The home rank is ``home_hint`` modulo the node count.  With ``affinity`` the root's
    children get hints 0..b0-1 and every other node inherits its parent's
    hint; otherwise the hint is the node hash.
    """
    size = count_nodes(cfg)
    branching = cfg.m * cfg.q

    def home_node(key, n_nodes):
        return key.index[1] % n_nodes

    def body(inputs, key):
        depth, h = inputs[0].payload
        if cfg.work_reps:
            _spin(h, cfg.work_reps)
        outs = []
        for j in child_slots(cfg, depth, h):
            ch = child_hash(h, j)
            if not cfg.affinity:
                hint = ch
            elif depth == 0:
                hint = j
            else:
                hint = key.index[1]
            ckey = TaskKey(UTS_NODE, (ch, hint, depth + 1))
            outs.append(Output(0, ckey, DataItem(DataKind.TREE_NODE, (depth + 1, ch))))
        return outs

    def local_successors(key, n_nodes):
        if not cfg.affinity:
            return 0
        if key.index[2] == 0:
            return sum(1 for j in range(cfg.b0) if j % n_nodes == 0)
        return math.ceil(branching)

    def initial_tasks(rank, n_nodes):
        if rank != 0:
            return []
        h = root_hash(cfg.seed)
        return [(TaskKey(UTS_NODE, (h, 0, 0)), 0, DataItem(DataKind.TREE_NODE, (0, h)))]

    tmpl = TaskTemplate(UTS_NODE, "UTS", 1, body,
                        priority_fn=lambda key: key.index[2],
                        cost_class="UTS",
                        local_successors=local_successors)
    return TaskGraphProgram("uts", {UTS_NODE: tmpl}, initial_tasks, home_node,
                            meta={"config": cfg, "tree_size": size})

"""Right-looking tiled Cholesky over a half-sparse SPD matrix.

Tile (m, n), m >= n, is owned by the rank returned by :func:`tile_home`;
every task runs on the owner of the tile it writes.  Sparse tiles travel
as zero-size markers so the DAG shape never depends on the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from ..taskgraph import DataItem, Output, TaskGraphProgram, TaskKey, TaskTemplate

POTRF, TRSM, SYRK, GEMM = 1, 2, 3, 4
KERNEL_NAMES = {POTRF: "POTRF", TRSM: "TRSM", SYRK: "SYRK", GEMM: "GEMM"}
# relative flop counts of the tile kernels
FLOP_WEIGHT = {POTRF: 1 / 3, TRSM: 1.0, SYRK: 1.0, GEMM: 2.0}


class NotSPD(ValueError):
    pass


@dataclass(frozen=True)
class CholeskyConfig:
    T: int = 8
    tile: int = 16
    density: float = 0.5
    distribution: str = "cyclic"
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.tile < 1:
            raise ValueError("T and tile must be >= 1")
        if not 0.0 <= self.density <= 1.0:
            raise ValueError("density must be within [0, 1]")
        if self.distribution != "cyclic" and not self.distribution.startswith("skewed:"):
            raise ValueError(f"unknown distribution {self.distribution!r}")

    @property
    def skew_rank(self) -> int | None:
        if self.distribution.startswith("skewed:"):
            return int(self.distribution.split(":", 1)[1])
        return None


def dense_mask(cfg: CholeskyConfig) -> np.ndarray:
    """Lower-triangle tile mask with exactly round(density * T(T+1)/2)
    dense tiles; the diagonal is always dense."""
    T = cfg.T
    total = T * (T + 1) // 2
    n_dense = max(T, min(total, int(round(cfg.density * total))))
    mask = np.zeros((T, T), dtype=bool)
    mask[np.diag_indices(T)] = True
    off = [(m, n) for m in range(T) for n in range(m)]
    rng = np.random.default_rng([cfg.seed, 0x5eed])
    pick = rng.choice(len(off), size=n_dense - T, replace=False) if off else []
    for i in pick:
        mask[off[i]] = True
    return mask


@dataclass
class CholeskyProblem:
    cfg: CholeskyConfig
    mask: np.ndarray
    tiles: dict = field(repr=False)

    @cached_property
    def matrix(self) -> np.ndarray:
        return assemble(self.tiles, self.cfg.T, self.cfg.tile, symmetric=True)


def generate(cfg: CholeskyConfig) -> CholeskyProblem:
    """Diagonally dominant symmetric matrix with the sparsity of ``dense_mask``."""
    T, bs = cfg.T, cfg.tile
    mask = dense_mask(cfg)
    rng = np.random.default_rng([cfg.seed, 0xA11])
    tiles: dict = {}
    for m in range(T):
        for n in range(m):
            tiles[(m, n)] = rng.uniform(-1.0, 1.0, (bs, bs)) if mask[m, n] else None
    rowsum = np.zeros(T * bs)
    for (m, n), t in tiles.items():
        if t is not None:
            a = np.abs(t)
            rowsum[m * bs:(m + 1) * bs] += a.sum(axis=1)
            rowsum[n * bs:(n + 1) * bs] += a.sum(axis=0)
    for k in range(T):
        d = rng.uniform(-1.0, 1.0, (bs, bs))
        d = np.tril(d, -1)
        d = d + d.T
        d[np.diag_indices(bs)] = rowsum[k * bs:(k + 1) * bs] + np.abs(d).sum(axis=1) + 1.0
        tiles[(k, k)] = d
    return CholeskyProblem(cfg, mask, tiles)


def assemble(tiles: dict, T: int, bs: int, symmetric: bool = False) -> np.ndarray:
    out = np.zeros((T * bs, T * bs))
    for (m, n), t in tiles.items():
        if t is None:
            continue
        out[m * bs:(m + 1) * bs, n * bs:(n + 1) * bs] = t
        if symmetric and m != n:
            out[n * bs:(n + 1) * bs, m * bs:(m + 1) * bs] = t.T
    return out


def written_tile(key: TaskKey) -> tuple[int, int]:
    idx = key.index
    if key.template_id == POTRF:
        return idx[0], idx[0]
    if key.template_id == TRSM:
        return idx[1], idx[0]
    if key.template_id == SYRK:
        return idx[1], idx[1]
    return idx[1], idx[2]


def successors(key: TaskKey, T: int) -> list[tuple[int, TaskKey]]:
    """(slot, successor key) pairs fed by ``key``."""
    tid, idx = key.template_id, key.index
    if tid == POTRF:
        (k,) = idx
        return [(1, TaskKey(TRSM, (k, m))) for m in range(k + 1, T)]
    if tid == TRSM:
        k, m = idx
        out = [(1, TaskKey(SYRK, (k, m)))]
        out += [(1, TaskKey(GEMM, (k, m, n))) for n in range(k + 1, m)]
        out += [(2, TaskKey(GEMM, (k, p, m))) for p in range(m + 1, T)]
        return out
    if tid == SYRK:
        k, m = idx
        return [(0, TaskKey(SYRK, (k + 1, m)) if k + 1 < m else TaskKey(POTRF, (m,)))]
    k, m, n = idx
    return [(0, TaskKey(GEMM, (k + 1, m, n)) if k + 1 < n else TaskKey(TRSM, (n, m)))]


def all_keys(T: int) -> list[TaskKey]:
    keys = [TaskKey(POTRF, (k,)) for k in range(T)]
    keys += [TaskKey(TRSM, (k, m)) for k in range(T) for m in range(k + 1, T)]
    keys += [TaskKey(SYRK, (k, m)) for k in range(T) for m in range(k + 1, T)]
    keys += [TaskKey(GEMM, (k, m, n)) for k in range(T) for m in range(k + 1, T)
             for n in range(k + 1, m)]
    return keys


def first_task(m: int, n: int) -> TaskKey:
    """The task that consumes the original value of tile (m, n)."""
    if m == n:
        return TaskKey(POTRF, (0,)) if m == 0 else TaskKey(SYRK, (0, m))
    return TaskKey(TRSM, (0, m)) if n == 0 else TaskKey(GEMM, (0, m, n))


def _item(a) -> DataItem:
    return DataItem.sparse() if a is None else DataItem.dense(a)


def _is_stealable(inputs, key) -> bool:
    return not any(x.is_sparse for x in inputs)


def _noop(inputs, key) -> bool:
    tid = key.template_id
    if tid == TRSM:
        return inputs[0].is_sparse
    if tid == SYRK:
        return inputs[1].is_sparse
    if tid == GEMM:
        return inputs[1].is_sparse or inputs[2].is_sparse
    return False


def _cost_weight(inputs, key) -> float:
    return 0.0 if _noop(inputs, key) else FLOP_WEIGHT[key.template_id]


def tile_kernel(inputs, key) -> DataItem:
    """New value of the tile written by ``key``."""
    tid = key.template_id
    if tid == POTRF:
        return DataItem.dense(np.linalg.cholesky(inputs[0].payload))
    if _noop(inputs, key):
        return DataItem.sparse() if tid == TRSM else inputs[0]
    if tid == TRSM:
        a, lkk = inputs[0].payload, inputs[1].payload
        return DataItem.dense(solve_triangular(lkk, a.T, lower=True).T)
    if tid == SYRK:
        a, l = inputs[0].payload, inputs[1].payload
        return DataItem.dense(a - l @ l.T)
    c = inputs[0]
    lm, ln = inputs[1].payload, inputs[2].payload
    base = np.zeros((lm.shape[0], ln.shape[0])) if c.is_sparse else c.payload
    return DataItem.dense(base - lm @ ln.T)


def build_cholesky(cfg: CholeskyConfig, check_spd: bool = True) -> TaskGraphProgram:
    problem = generate(cfg)
    if check_spd and cfg.T * cfg.tile <= 4096:
        try:
            np.linalg.cholesky(problem.matrix)
        except np.linalg.LinAlgError as exc:
            raise NotSPD(f"generated matrix is not SPD: {exc}") from exc
    T = cfg.T
    mask = problem.mask
    skew = cfg.skew_rank

    def tile_home(m, n, n_nodes):
        if skew is not None and mask[m, n]:
            return skew % n_nodes
        return (m * T + n) % n_nodes

    def home_node(key, n_nodes):
        return tile_home(*written_tile(key), n_nodes)

    def local_successors(key, n_nodes):
        me = home_node(key, n_nodes)
        return sum(1 for _, s in successors(key, T) if home_node(s, n_nodes) == me)

    def body(inputs, key):
        item = tile_kernel(inputs, key)
        outs = [Output(s, k, item) for s, k in successors(key, T)]
        if key.template_id in (POTRF, TRSM):
            outs.append(Output(0, None, item))
        return outs

    def initial_tasks(rank, n_nodes):
        out = []
        for (m, n), a in problem.tiles.items():
            if tile_home(m, n, n_nodes) == rank:
                out.append((first_task(m, n), 0, _item(a)))
        out.sort(key=lambda r: r[0])
        return out

    arity = {POTRF: 1, TRSM: 2, SYRK: 2, GEMM: 3}
    templates = {
        tid: TaskTemplate(tid, KERNEL_NAMES[tid], arity[tid], body,
                          is_stealable=_is_stealable,
                          priority_fn=lambda key: -key.index[0],
                          cost_class=KERNEL_NAMES[tid],
                          local_successors=local_successors,
                          cost_weight=_cost_weight)
        for tid in (POTRF, TRSM, SYRK, GEMM)
    }
    return TaskGraphProgram("cholesky", templates, initial_tasks, home_node,
                            meta={"config": cfg, "problem": problem,
                                  "expected_keys": all_keys(T)})


def factor_from_results(results: dict, T: int, bs: int) -> np.ndarray:
    """Assemble the lower factor from POTRF/TRSM final outputs."""
    tiles = {}
    for (key, _slot), item in results.items():
        tiles[written_tile(key)] = None if item.is_sparse else item.payload
    missing = [(m, n) for m in range(T) for n in range(m + 1) if (m, n) not in tiles]
    if missing:
        raise ValueError(f"factor incomplete, missing tiles {missing[:5]}")
    return assemble(tiles, T, bs)


def reconstruction_error(A: np.ndarray, L: np.ndarray) -> float:
    """max |L L^T - A| / max |A|."""
    return float(np.max(np.abs(L @ L.T - A)) / np.max(np.abs(A)))
